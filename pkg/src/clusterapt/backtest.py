"""Weekly roll-forward evaluation of clustering methods.

At every week end W: cluster as of W, build cluster factors, fit each
stock's loadings on the ``estimation_days`` trading days ending at W, then
score the realised-factor predictions on each trading day of the following
week.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .clustering import (
    ClusterAssignment,
    ClusterConfig,
    gics_cluster,
    hierarchical_cluster,
    kmeans_cluster,
    random_cluster,
)
from .data import EmbeddingSeries, ReturnsPanel, SectorMap, atomic_write, to_day
from .errors import ClusterAPTError, MethodFailedError, NoObservationsError
from .factors import PredictionErrors, build_factor_returns, fit_many, prediction_errors
from .rng import derive_seed
from .similarity import embedding_similarity, return_correlation

log = logging.getLogger(__name__)

LOOKBACKS = (1, 4, 12, 24)
FAMILIES = ("returns", "embedding", "gics", "random")
ALGOS = ("kmeans", "hierarchical")

TABLE1_METHODS = (
    "returns_hierarchical_12w",
    "returns_hierarchical_4w",
    "returns_hierarchical_24w",
    "returns_kmeans_4w",
    "returns_hierarchical_1w",
    "returns_kmeans_1w",
    "returns_kmeans_24w",
    "returns_kmeans_12w",
    "embedding_24w_kmeans",
    "embedding_4w_hierarchical",
    "embedding_4w_kmeans",
    "embedding_12w_hierarchical",
    "embedding_12w_kmeans",
    "embedding_1w_kmeans",
    "embedding_1w_hierarchical",
    "gics_sector_tracking",
    "random",
)

REPORT_HEADER = ["method_id", "avg_rmse", "avg_mae", "n_days", "n_weeks_skipped"]
DAILY_HEADER = ["date", "method_id", "rmse", "mae", "n_stocks"]

_RETURNS_ID = re.compile(r"^returns_(kmeans|hierarchical)_(\d+)w$")
_EMBED_ID = re.compile(r"^embedding_(\d+)w_(kmeans|hierarchical)$")


@dataclass(frozen=True)
class MethodSpec:
    method_id: str
    family: str
    algo: str = "none"
    lookback_weeks: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family in ("returns", "embedding"):
            if self.algo not in ALGOS or not self.lookback_weeks or self.lookback_weeks < 1:
                raise ValueError(f"{self.method_id}: {self.family} needs an algo and a lookback")
        elif self.algo != "none" or self.lookback_weeks is not None:
            raise ValueError(f"{self.method_id}: {self.family} takes no algo or lookback")


def valid_method_ids() -> list[str]:
    ids = [f"returns_{a}_{w}w" for a in ALGOS for w in LOOKBACKS]
    ids += [f"embedding_{w}w_{a}" for w in LOOKBACKS for a in ALGOS]
    return ids + ["gics_sector_tracking", "random"]


def parse_method(method_id: str) -> MethodSpec:
    if method_id == "gics_sector_tracking":
        return MethodSpec(method_id, "gics")
    if method_id == "random":
        return MethodSpec(method_id, "random")
    m = _RETURNS_ID.match(method_id)
    if m:
        return MethodSpec(method_id, "returns", m.group(1), int(m.group(2)))
    m = _EMBED_ID.match(method_id)
    if m:
        return MethodSpec(method_id, "embedding", m.group(2), int(m.group(1)))
    raise ValueError(f"unknown method id {method_id!r}")


@dataclass(frozen=True)
class BacktestConfig:
    start: np.datetime64
    end: np.datetime64
    methods: tuple
    k: int = 11
    estimation_days: int = 21
    seed: int = 0
    n_init: int = 10
    max_iterations: int = 300
    linkage: str = "average"
    weighting: str = "equal"

    def __post_init__(self):
        object.__setattr__(self, "start", to_day(self.start))
        object.__setattr__(self, "end", to_day(self.end))
        methods = tuple(m if isinstance(m, MethodSpec) else parse_method(m) for m in self.methods)
        object.__setattr__(self, "methods", methods)
        if not self.start < self.end:
            raise ValueError("start must be before end")
        if not methods:
            raise ValueError("at least one method is required")
        if len({m.method_id for m in methods}) != len(methods):
            raise ValueError("duplicate method ids")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.estimation_days < self.k + 2:
            raise ValueError("estimation_days must be >= k + 2")

    def to_dict(self) -> dict:
        return {
            "start": str(self.start),
            "end": str(self.end),
            "methods": [m.method_id for m in self.methods],
            "k": self.k,
            "estimation_days": self.estimation_days,
            "seed": self.seed,
            "n_init": self.n_init,
            "max_iterations": self.max_iterations,
            "linkage": self.linkage,
            "weighting": self.weighting,
        }


@dataclass
class DailyErrorSeries:
    method_id: str
    dates: np.ndarray
    rmse: np.ndarray
    mae: np.ndarray
    n_stocks: np.ndarray
    # [evaluation grid date x panel ticker]; NaN where no error was defined
    per_stock_errors: np.ndarray
    error_dates: np.ndarray
    tickers: tuple
    skipped_weeks: list = field(default_factory=list)


def daily_metrics(errors: PredictionErrors, date) -> tuple[float, float, int]:
    i = int(np.searchsorted(errors.dates, to_day(date)))
    if i >= len(errors.dates) or errors.dates[i] != to_day(date):
        raise KeyError(f"{date} not in prediction errors")
    return _metrics(errors.per_stock[i])


def _metrics(row: np.ndarray) -> tuple[float, float, int]:
    e = row[np.isfinite(row)]
    if not e.size:
        raise NoObservationsError("no defined errors on this day")
    return math.sqrt(float(np.mean(e * e))), float(np.mean(np.abs(e))), int(e.size)


# --- per-week evaluation ------------------------------------------------------


@dataclass(frozen=True)
class _Context:
    panel: ReturnsPanel
    sector_map: SectorMap | None
    embeddings: EmbeddingSeries | None
    cfg: BacktestConfig


_WORKER_CTX: _Context | None = None


def _init_worker(ctx: _Context) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def assign_clusters(
    method: MethodSpec,
    panel: ReturnsPanel,
    as_of,
    cfg: BacktestConfig,
    sector_map: SectorMap | None = None,
    embeddings: EmbeddingSeries | None = None,
    cache: dict | None = None,
) -> ClusterAssignment:
    """Cluster assignment for one method at one rebalance date."""
    day = to_day(as_of)
    cache = {} if cache is None else cache
    if method.family in ("returns", "embedding"):
        key = (method.family, method.lookback_weeks, day)
        if key not in cache:
            if method.family == "returns":
                cache[key] = return_correlation(panel, day, method.lookback_weeks)
            else:
                if embeddings is None:
                    raise ClusterAPTError("embedding method requires an embedding series")
                cache[key] = embedding_similarity(embeddings, panel, day, method.lookback_weeks)
        ccfg = ClusterConfig(
            k=cfg.k,
            max_iterations=cfg.max_iterations,
            n_init=cfg.n_init,
            seed=derive_seed(cfg.seed, method.method_id, day) % 2**63,
            linkage=cfg.linkage,
        )
        algo = kmeans_cluster if method.algo == "kmeans" else hierarchical_cluster
        return algo(cache[key], ccfg, method.method_id)
    if method.family == "gics":
        if sector_map is None:
            raise ClusterAPTError("gics method requires a sector map")
        return gics_cluster(sector_map, panel, day, method.method_id)
    idx = panel.calendar.index_of(day)
    members = [t for t, m in zip(panel.tickers, panel.membership[idx]) if m]
    return random_cluster(members, cfg.k, derive_seed(cfg.seed, method.method_id), day, method.method_id)


def _evaluate_week(ctx: _Context, w_idx: int, eval_stop: int) -> dict:
    """Errors for every method over rows (w_idx, eval_stop); value is either
    a [rows x N] error block or a skip reason string."""
    panel, cfg = ctx.panel, ctx.cfg
    est_start = max(0, w_idx - cfg.estimation_days + 1)
    n_est = w_idx - est_start + 1
    day = panel.dates[w_idx]
    cache: dict = {}
    out = {}
    for method in cfg.methods:
        try:
            assignment = assign_clusters(
                method, panel, day, cfg, ctx.sector_map, ctx.embeddings, cache
            ).compact()
            factors = build_factor_returns(
                panel, assignment, slice(est_start, eval_stop), cfg.weighting
            )
            tickers = [t for t in panel.tickers if t in assignment.labels]
            models, _ = fit_many(panel, factors, tickers, slice(0, n_est))
            if not models:
                raise ClusterAPTError("no stock could be fitted")
            errs = prediction_errors(panel, models, factors, slice(n_est, None))
        except (ClusterAPTError, KeyError) as exc:
            out[method.method_id] = f"{type(exc).__name__}: {exc}"
            log.info("skip %s at %s: %s", method.method_id, day, exc)
            continue
        block = np.full((eval_stop - w_idx - 1, len(panel.tickers)), np.nan)
        cols = [panel.ticker_index(t) for t in errs.tickers]
        block[:, cols] = errs.per_stock
        out[method.method_id] = block
    return out


def _worker_week(args):
    return _evaluate_week(_WORKER_CTX, *args)


def rebalance_schedule(panel: ReturnsPanel, cfg: BacktestConfig) -> list[tuple[int, int]]:
    """(week-end row, exclusive stop row of its evaluation span) pairs."""
    dates = panel.dates
    bounds = [int(b) for b in panel.calendar.week_boundaries]
    last = int(np.searchsorted(dates, cfg.end, side="right"))  # rows < last are <= end
    out = []
    for p, b in enumerate(bounds):
        if not cfg.start <= dates[b] < cfg.end:
            continue
        nxt = bounds[p + 1] + 1 if p + 1 < len(bounds) else len(dates)
        stop = min(nxt, last)
        if stop > b + 1:
            out.append((b, stop))
    return out


def run_backtest(
    panel: ReturnsPanel,
    sector_map: SectorMap | None,
    embeddings: EmbeddingSeries | None,
    cfg: BacktestConfig,
    jobs: int = 1,
) -> dict[str, DailyErrorSeries]:
    ctx = _Context(panel, sector_map, embeddings, cfg)
    schedule = rebalance_schedule(panel, cfg)
    if jobs > 1 and len(schedule) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ctx,)) as ex:
            results = list(ex.map(_worker_week, schedule, chunksize=max(1, len(schedule) // (4 * jobs))))
    else:
        results = [_evaluate_week(ctx, w, stop) for w, stop in schedule]

    grid = np.concatenate([np.arange(w + 1, stop) for w, stop in schedule]) if schedule else np.zeros(0, int)
    grid_dates = panel.dates[grid]
    n = len(panel.tickers)
    series = {}
    # ordered reduction: week index, then method order
    for method in sorted(cfg.methods, key=lambda m: m.method_id):
        mid = method.method_id
        mat = np.full((len(grid), n), np.nan)
        skipped = []
        pos = 0
        for (w, stop), res in zip(schedule, results):
            width = stop - w - 1
            cell = res[mid]
            if isinstance(cell, str):
                skipped.append((str(panel.dates[w]), cell))
            else:
                mat[pos : pos + width] = cell
            pos += width
        if schedule and len(skipped) == len(schedule):
            raise MethodFailedError(f"{mid}: every week skipped ({skipped[0][1]})")
        days, rmse, mae, cnt = [], [], [], []
        for r in range(len(grid)):
            try:
                a, b, c = _metrics(mat[r])
            except NoObservationsError:
                continue
            days.append(grid_dates[r])
            rmse.append(a)
            mae.append(b)
            cnt.append(c)
        series[mid] = DailyErrorSeries(
            method_id=mid,
            dates=np.array(days, dtype="datetime64[D]"),
            rmse=np.array(rmse),
            mae=np.array(mae),
            n_stocks=np.array(cnt, dtype=int),
            per_stock_errors=mat,
            error_dates=grid_dates,
            tickers=panel.tickers,
            skipped_weeks=skipped,
        )
    return series


# --- reporting ------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    method_id: str
    avg_rmse: float
    avg_mae: float
    n_days: int
    n_weeks_skipped: int


def aggregate_report(series: Mapping[str, DailyErrorSeries]) -> list[ReportRow]:
    """Mean of daily RMSE and MAE per method, sorted by mean RMSE."""
    if not series:
        raise ValueError("no series to aggregate")
    rows = []
    for mid, s in series.items():
        nd = len(s.rmse)
        rows.append(
            ReportRow(
                mid,
                float(np.mean(s.rmse)) if nd else math.nan,
                float(np.mean(s.mae)) if nd else math.nan,
                nd,
                len(s.skipped_weeks),
            )
        )
    return sorted(rows, key=lambda r: (math.isnan(r.avg_rmse), r.avg_rmse, r.method_id))


def write_report(rows: Sequence[ReportRow], path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.method_id, repr(r.avg_rmse), repr(r.avg_mae), r.n_days, r.n_weeks_skipped])


def read_report(path) -> list[ReportRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            ReportRow(
                r["method_id"],
                float(r["avg_rmse"]),
                float(r["avg_mae"]),
                int(r["n_days"]),
                int(r["n_weeks_skipped"]),
            )
            for r in reader
        ]


def write_daily(series: Mapping[str, DailyErrorSeries], path) -> None:
    rows = []
    for mid, s in series.items():
        for d, a, b, c in zip(s.dates, s.rmse, s.mae, s.n_stocks):
            rows.append((str(d), mid, repr(float(a)), repr(float(b)), int(c)))
    rows.sort(key=lambda r: (r[0], r[1]))
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DAILY_HEADER)
        w.writerows(rows)


def read_daily(path) -> dict[str, DailyErrorSeries]:
    by_method: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            by_method.setdefault(r["method_id"], []).append(r)
    out = {}
    for mid, rs in by_method.items():
        out[mid] = DailyErrorSeries(
            mid,
            np.array([r["date"] for r in rs], dtype="datetime64[D]"),
            np.array([float(r["rmse"]) for r in rs]),
            np.array([float(r["mae"]) for r in rs]),
            np.array([int(r["n_stocks"]) for r in rs]),
            per_stock_errors=np.zeros((0, 0)),
            error_dates=np.zeros(0, dtype="datetime64[D]"),
            tickers=(),
        )
    return out


def write_errors(series: Mapping[str, DailyErrorSeries], out_dir) -> None:
    """Per-stock error matrices as ``errors/<method_id>.npy`` plus shared axes."""
    out = Path(out_dir) / "errors"
    out.mkdir(parents=True, exist_ok=True)
    first = next(iter(series.values()))
    with atomic_write(out / "axes.json") as fh:
        json.dump(
            {"dates": [str(d) for d in first.error_dates], "tickers": list(first.tickers)},
            fh,
            indent=1,
        )
    for mid, s in series.items():
        with atomic_write(out / f"{mid}.npy", "wb") as fh:
            np.save(fh, s.per_stock_errors, allow_pickle=False)


def read_errors(run_dir, method_id: str) -> np.ndarray:
    path = Path(run_dir) / "errors" / f"{method_id}.npy"
    if not path.exists():
        raise FileNotFoundError(f"no retained errors for {method_id} in {run_dir}")
    return np.load(path, allow_pickle=False)


def write_skips(series: Mapping[str, DailyErrorSeries], path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method_id", "week_end", "reason"])
        for mid in sorted(series):
            for day, reason in series[mid].skipped_weeks:
                w.writerow([mid, day, reason])
