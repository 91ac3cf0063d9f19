"""Exception hierarchy shared across the pipeline."""


class ClusterAPTError(Exception):
    pass


class ParseError(ClusterAPTError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(ParseError):
    pass


class ValidationError(ClusterAPTError, ValueError):
    pass


class InsufficientUniverseError(ClusterAPTError):
    pass


class ZeroDocumentError(ClusterAPTError, ValueError):
    pass


class DegenerateFactorError(ClusterAPTError):
    def __init__(self, cluster):
        self.cluster = cluster
        super().__init__(f"cluster {cluster} has no present member on any day")


class WindowTooShortError(ClusterAPTError):
    pass


class SingularDesignError(ClusterAPTError):
    pass


class MissingFactorError(ClusterAPTError):
    pass


class NoObservationsError(ClusterAPTError):
    pass


class MethodFailedError(ClusterAPTError):
    pass


class InsufficientPairsError(ClusterAPTError):
    pass
