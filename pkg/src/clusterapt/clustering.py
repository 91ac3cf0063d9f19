"""Turn similarity matrices, sector codes or a seed into K-cluster assignments."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CANONICAL_SECTORS, ReturnsPanel, SectorMap, sector_at, to_day
from .errors import InsufficientUniverseError
from .rng import derive_seed
from .similarity import SimilarityMatrix

LINKAGES = ("average", "complete", "single")


@dataclass(frozen=True)
class ClusterAssignment:
    as_of: np.datetime64
    method_id: str
    k: int
    labels: dict

    def __post_init__(self):
        object.__setattr__(self, "as_of", to_day(self.as_of))
        for t, lab in self.labels.items():
            if not 0 <= lab < self.k:
                raise ValueError(f"label {lab} of {t} outside [0, {self.k})")

    @property
    def tickers(self) -> list:
        return list(self.labels)

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels.values()))

    def compact(self) -> "ClusterAssignment":
        """Relabel so that only used labels remain, numbered 0.. in ascending
        order of the original label."""
        used = sorted(set(self.labels.values()))
        remap = {old: new for new, old in enumerate(used)}
        return ClusterAssignment(
            self.as_of,
            self.method_id,
            max(len(used), 1),
            {t: remap[lab] for t, lab in self.labels.items()},
        )


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 11
    max_iterations: int = 300
    n_init: int = 10
    seed: int = 0
    linkage: str = "average"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.max_iterations < 1 or self.n_init < 1:
            raise ValueError("max_iterations and n_init must be >= 1")
        if self.linkage not in LINKAGES:
            raise ValueError(f"linkage must be one of {LINKAGES}")


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber labels in order of first appearance."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse]


# --- k-means -----------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    wcss: float
    # WCSS after the seeding assignment and after every Lloyd update, per restart
    histories: list = field(default_factory=list)
    best_restart: int = 0


def wcss(x: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for c in np.unique(labels):
        pts = x[labels == c]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def _sq_dists(x, centers):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a centre already; pick an unused one
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _assign(x, centers, current=None):
    d = _sq_dists(x, centers)
    new = d.argmin(axis=1)
    if current is not None:
        # keep the current label on ties so Lloyd cannot cycle
        own = d[np.arange(len(x)), current]
        new = np.where(own <= d[np.arange(len(x)), new], current, new)
    return new, d


def _fill_empty(x, labels, centers, k):
    """Move the point farthest from its centre into each empty cluster."""
    for c in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[c]:
            continue
        dist = ((x - centers[labels]) ** 2).sum(axis=1)
        dist[counts[labels] < 2] = -1.0
        far = int(dist.argmax())
        if dist[far] <= 0:
            break
        labels[far] = c
        centers[c] = x[far]
    return labels


def _means(x, labels, centers, k):
    out = centers.copy()
    for c in range(k):
        mask = labels == c
        if mask.any():
            out[c] = x[mask].mean(axis=0)
    return out


def _lloyd(x, k, max_iter, rng):
    centers = kmeans_plusplus(x, k, rng)
    labels, _ = _assign(x, centers)
    labels = _fill_empty(x, labels, centers, k)
    history = [wcss(x, labels)]
    for _ in range(max_iter):
        centers = _means(x, labels, centers, k)
        new, _ = _assign(x, centers, labels)
        new = _fill_empty(x, new, centers, k)
        if np.array_equal(new, labels):
            break
        labels = new
        history.append(wcss(x, labels))
    return labels, _means(x, labels, centers, k), history


def kmeans(x: np.ndarray, k: int, n_init: int = 10, max_iter: int = 300, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Restart ``r`` draws from its own child of ``SeedSequence(seed)`` so the
    result does not depend on the order restarts are evaluated in.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] < k:
        raise InsufficientUniverseError(f"{x.shape[0]} points for k={k}")
    children = np.random.SeedSequence(seed).spawn(n_init)
    best = None
    histories = []
    for r, child in enumerate(children):
        labels, centers, history = _lloyd(x, k, max_iter, np.random.default_rng(child))
        histories.append(history)
        if best is None or history[-1] < best.wcss:
            best = KMeansResult(labels, centers, history[-1], best_restart=r)
    best.histories = histories
    return best


def kmeans_cluster(sim: SimilarityMatrix, cfg: ClusterConfig, method_id: str = "kmeans") -> ClusterAssignment:
    """k-means over the rows of the similarity matrix."""
    n = len(sim)
    if n < cfg.k:
        raise InsufficientUniverseError(f"{n} tickers for k={cfg.k}")
    res = kmeans(sim.values, cfg.k, cfg.n_init, cfg.max_iterations, cfg.seed)
    labels = canonical_labels(res.labels)
    return ClusterAssignment(sim.as_of, method_id, cfg.k, dict(zip(sim.tickers, labels.tolist())))


# --- agglomerative -------------------------------------------------------------


def agglomerate(dist: np.ndarray, k: int, linkage: str = "average") -> tuple[np.ndarray, list]:
    """Bottom-up merging on a dissimilarity matrix until ``k`` clusters remain.

    A cluster is identified by its smallest member index. Among equally close
    pairs the one with the lexicographically smallest (min id, max id) merges
    first. Returns per-point cluster ids and the merge list.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    d = np.array(dist, dtype=float)
    n = d.shape[0]
    if n < k:
        raise InsufficientUniverseError(f"{n} points for k={k}")
    np.fill_diagonal(d, np.inf)
    size = np.ones(n)
    owner = np.arange(n)
    merges = []
    for _ in range(n - k):
        flat = int(np.argmin(d))
        i, j = divmod(flat, n)
        if linkage == "average":
            row = (size[i] * d[i] + size[j] * d[j]) / (size[i] + size[j])
        elif linkage == "complete":
            row = np.maximum(d[i], d[j])
        else:
            row = np.minimum(d[i], d[j])
        d[i, :] = row
        d[:, i] = row
        d[i, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
        size[i] += size[j]
        owner[owner == j] = i
        merges.append((i, j))
    return owner, merges


def hierarchical_cluster(sim: SimilarityMatrix, cfg: ClusterConfig, method_id: str = "hierarchical") -> ClusterAssignment:
    """Agglomerative clustering on ``1 - similarity``."""
    if len(sim) < cfg.k:
        raise InsufficientUniverseError(f"{len(sim)} tickers for k={cfg.k}")
    owner, _ = agglomerate(1.0 - sim.values, cfg.k, cfg.linkage)
    labels = canonical_labels(owner)
    return ClusterAssignment(sim.as_of, method_id, cfg.k, dict(zip(sim.tickers, labels.tolist())))


# --- sector codes and random -----------------------------------------------------


def gics_cluster(smap: SectorMap, panel: ReturnsPanel, as_of, method_id: str = "gics_sector_tracking") -> ClusterAssignment:
    """Members on ``as_of`` labelled by the dense rank of their sector code."""
    idx = panel.calendar.index_of(as_of)
    codes = {}
    for t, member in zip(panel.tickers, panel.membership[idx]):
        if member:
            code = sector_at(smap, t, panel.dates[idx])
            if code is not None:
                codes[t] = code
    if not codes:
        raise InsufficientUniverseError(f"no member has a sector code at {panel.dates[idx]}")
    rank = {c: i for i, c in enumerate(sorted(set(codes.values())))}
    return ClusterAssignment(
        panel.dates[idx], method_id, len(CANONICAL_SECTORS), {t: rank[c] for t, c in codes.items()}
    )


def random_cluster(tickers: Sequence, k: int, seed: int, as_of=None, method_id: str = "random") -> ClusterAssignment:
    """Uniform i.i.d. labels. With ``as_of`` given the draw is re-seeded per
    date from ``seed``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(tickers) < k:
        raise InsufficientUniverseError(f"{len(tickers)} tickers for k={k}")
    s = derive_seed(seed, "random_cluster", "" if as_of is None else to_day(as_of))
    labels = np.random.default_rng(s).integers(0, k, size=len(tickers))
    return ClusterAssignment(
        to_day(as_of) if as_of is not None else np.datetime64("NaT", "D"),
        method_id,
        k,
        dict(zip(tickers, labels.tolist())),
    )


def adjusted_rand_index(a: Sequence, b: Sequence) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label arrays differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(v):
        return (v * (v - 1) / 2.0).sum()

    index = pairs(table)
    rows = pairs(table.sum(1))
    cols = pairs(table.sum(0))
    expected = rows * cols / pairs(np.array([len(a)], dtype=float))
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def assignment_ari(x: ClusterAssignment, y: ClusterAssignment) -> float:
    common = [t for t in x.labels if t in y.labels]
    return adjusted_rand_index([x.labels[t] for t in common], [y.labels[t] for t in common])
