"""Synthetic markets with planted cluster structure.

Returns follow ``R[t, i] = beta_i * F[t, c(i, t)] + eps[t, i]`` (plus an
optional common market term), with cluster factors i.i.d. normal. Stocks may
migrate between clusters on a Poisson schedule; the sector map and the weekly
embedding stream both mirror the true memberships.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterAssignment
from .data import (
    CANONICAL_SECTORS,
    EmbeddingSeries,
    HeadlineRecord,
    ReturnsPanel,
    SectorMap,
    atomic_write,
    iso_monday,
    to_day,
    write_embeddings,
    write_headlines,
    write_returns,
    write_sector_map,
)
from .rng import generator

TRADING_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class WorldSpec:
    n_stocks: int = 100
    n_clusters: int = 11
    n_days: int = 756
    factor_vol: float = 1.0
    idio_vol: float = 1.0
    beta_range: tuple = (0.5, 1.5)
    migration_rate: float = 0.0
    seed: int = 0
    market_vol: float = 0.0
    embedding_dim: int = 32
    embedding_noise: float = 1.0
    start: str = "2022-01-03"

    def __post_init__(self):
        if not self.n_stocks >= self.n_clusters >= 1:
            raise ValueError("need n_stocks >= n_clusters >= 1")
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if min(self.factor_vol, self.idio_vol, self.market_vol, self.embedding_noise) < 0:
            raise ValueError("volatilities must be >= 0")
        lo, hi = self.beta_range
        if lo > hi:
            raise ValueError("beta_range must satisfy lo <= hi")
        if not 0.0 <= self.migration_rate <= 1.0:
            raise ValueError("migration_rate must be in [0, 1]")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    panel: ReturnsPanel
    true_labels: np.ndarray  # [date x ticker] planted cluster ids
    sector_map: SectorMap
    embeddings: EmbeddingSeries
    betas: np.ndarray
    factors: np.ndarray

    def truth_at(self, date, method_id: str = "truth") -> ClusterAssignment:
        i = self.panel.calendar.index_of(date)
        return ClusterAssignment(
            self.panel.dates[i],
            method_id,
            self.spec.n_clusters,
            dict(zip(self.panel.tickers, self.true_labels[i].tolist())),
        )


def business_days(start, n: int) -> np.ndarray:
    first = np.busday_offset(to_day(start), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def ticker_names(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"S{i:0{width}d}" for i in range(n)]


def generate_market(spec: WorldSpec) -> World:
    n, c, t = spec.n_stocks, spec.n_clusters, spec.n_days
    dates = business_days(spec.start, t)
    tickers = ticker_names(n)

    labels0 = generator(spec.seed, "labels").permutation(np.arange(n) % c)
    labels = np.empty((t, n), dtype=int)
    labels[0] = labels0
    if spec.migration_rate > 0 and c > 1:
        mig = generator(spec.seed, "migration")
        events = mig.random((t, n)) < spec.migration_rate / TRADING_DAYS_PER_YEAR
        shifts = mig.integers(1, c, size=(t, n))
        for d in range(1, t):
            labels[d] = np.where(events[d], (labels[d - 1] + shifts[d]) % c, labels[d - 1])
    else:
        labels[:] = labels0

    lo, hi = spec.beta_range
    betas = generator(spec.seed, "betas").uniform(lo, hi, size=n)
    factors = generator(spec.seed, "factors").normal(0.0, 1.0, size=(t, c)) * spec.factor_vol
    noise = generator(spec.seed, "idio").normal(0.0, 1.0, size=(t, n)) * spec.idio_vol
    returns = betas[None, :] * np.take_along_axis(factors, labels, axis=1) + noise
    if spec.market_vol > 0:
        market = generator(spec.seed, "market").normal(0.0, spec.market_vol, size=t)
        returns = returns + market[:, None]

    panel = ReturnsPanel.from_arrays(dates, tickers, returns)
    return World(
        spec=spec,
        panel=panel,
        true_labels=labels,
        sector_map=sector_map_from_labels(dates, tickers, labels),
        embeddings=_embeddings(spec, dates, tickers, labels),
        betas=betas,
        factors=factors,
    )


def sector_code(label: int) -> int:
    return CANONICAL_SECTORS[label % len(CANONICAL_SECTORS)]


def sector_map_from_labels(dates, tickers, labels) -> SectorMap:
    """Point-in-time map with an entry on the first date and at every change."""
    entries = []
    for j, tk in enumerate(tickers):
        prev = None
        for d in range(len(dates)):
            code = sector_code(int(labels[d, j]))
            if code != prev:
                entries.append((dates[d], tk, code))
                prev = code
    return SectorMap(tuple(entries))


def sector_map_from_assignment(assignment: ClusterAssignment, effective_date) -> SectorMap:
    return SectorMap(
        tuple((to_day(effective_date), t, sector_code(lab)) for t, lab in assignment.labels.items())
    )


def _embeddings(spec, dates, tickers, labels) -> EmbeddingSeries:
    g = generator(spec.seed, "embeddings")
    dim = spec.embedding_dim
    centers = g.normal(size=(spec.n_clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    mondays = iso_monday(dates)
    week_last = np.flatnonzero(np.append(mondays[1:] != mondays[:-1], True))
    entries = {}
    for d in week_last:
        noise = g.normal(size=(len(tickers), dim)) * (spec.embedding_noise / math.sqrt(dim))
        vecs = centers[labels[d]] + noise
        for j, tk in enumerate(tickers):
            entries[(tk, mondays[d])] = vecs[j]
    return EmbeddingSeries.from_entries(entries, dimension=dim)


def perturb_assignment(truth: ClusterAssignment, fraction: float, seed: int) -> ClusterAssignment:
    """Move ``ceil(fraction * N)`` random tickers to a uniformly drawn wrong label."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    tickers = sorted(truth.labels)
    n_moved = min(len(tickers), math.ceil(fraction * len(tickers) - 1e-9))
    labels = dict(truth.labels)
    if truth.k > 1 and n_moved:
        g = generator(seed, "perturb", fraction)
        chosen = g.choice(len(tickers), size=n_moved, replace=False)
        shifts = g.integers(1, truth.k, size=n_moved)
        for idx, s in zip(chosen, shifts):
            t = tickers[idx]
            labels[t] = (labels[t] + int(s)) % truth.k
    return ClusterAssignment(truth.as_of, f"{truth.method_id}_perturbed", truth.k, labels)


_COMMON = ["announces", "reports", "update", "quarter", "results", "company", "shares", "market"]
_TYPES = ["earnings", "product", "partnership", "press-release", "stock-gain", "stock-loss"]


def generate_headlines(world: World, per_week: float = 2.0, seed: int = 0) -> list[HeadlineRecord]:
    """Synthetic headline stream whose vocabulary depends on the true cluster.

    Includes lower-relevance records, noisy article types and same-day
    near-duplicates so the preprocessing pipeline has something to remove.
    """
    g = generator(seed, "headlines")
    vocab = [[f"topic{c}w{j}" for j in range(12)] for c in range(world.spec.n_clusters)]
    out = []
    dates = world.panel.dates
    for d, day in enumerate(dates):
        n_today = g.poisson(per_week / 5.0, size=len(world.panel.tickers))
        for j in np.flatnonzero(n_today):
            tk = world.panel.tickers[j]
            words = vocab[world.true_labels[d, j]]
            for _ in range(int(n_today[j])):
                text = " ".join(
                    [tk] + list(g.choice(words, size=4)) + list(g.choice(_COMMON, size=2))
                )
                rel = 100 if g.random() < 0.7 else int(g.integers(10, 100))
                kind = _TYPES[int(g.integers(len(_TYPES)))]
                rec = HeadlineRecord(day.item(), tk, text, rel, kind)
                out.append(rec)
                if g.random() < 0.2:
                    out.append(HeadlineRecord(day.item(), tk, text + " update", rel, kind))
    return out


def write_truth(world: World, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "cluster"])
        for d, day in enumerate(world.panel.dates):
            for j, tk in enumerate(world.panel.tickers):
                w.writerow([str(day), tk, int(world.true_labels[d, j])])


def write_world(world: World, out_dir, headlines: list | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "returns.csv", out / "sectors.csv", out / "embeddings.csv", out / "truth.csv"]
    write_returns(world.panel, paths[0])
    write_sector_map(world.sector_map, paths[1])
    write_embeddings(world.embeddings, paths[2])
    write_truth(world, paths[3])
    if headlines is not None:
        paths.append(out / "headlines.csv")
        write_headlines(headlines, paths[-1])
    return paths
