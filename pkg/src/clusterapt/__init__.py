"""Evaluate stock clusterings as synthetic cluster-factor models in a weekly
roll-forward, out-of-sample backtest."""

__version__ = "0.1.0"
