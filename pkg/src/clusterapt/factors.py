"""Cluster index returns as regression factors, per-stock OLS loadings and
out-of-sample prediction errors.

The risk-free rate is not modelled separately; it is absorbed by the
intercept, which is fitted in sample and reused out of sample.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .clustering import ClusterAssignment
from .data import ReturnsPanel, atomic_write, to_day
from .errors import (
    DegenerateFactorError,
    MissingFactorError,
    SingularDesignError,
    WindowTooShortError,
)

COND_LIMIT = 1e10
RIDGE_SCALE = 1e-8


def date_rows(dates: np.ndarray, span) -> slice:
    """Resolve ``span`` to a row slice of ``dates``.

    ``span`` is a slice (returned as is), a single date, or an inclusive
    ``(start, end)`` pair of dates.
    """
    if isinstance(span, slice):
        return span
    if isinstance(span, tuple):
        start, end = span
    else:
        start = end = span
    lo = int(np.searchsorted(dates, to_day(start), side="left"))
    hi = int(np.searchsorted(dates, to_day(end), side="right"))
    return slice(lo, hi)


@dataclass(frozen=True)
class FactorReturns:
    method_id: str
    as_of: np.datetime64
    dates: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def row(self, date) -> int:
        i = int(np.searchsorted(self.dates, to_day(date)))
        if i >= len(self.dates) or self.dates[i] != to_day(date):
            raise KeyError(f"{date} not covered by factor returns")
        return i


def build_factor_returns(
    panel: ReturnsPanel,
    assignment: ClusterAssignment,
    dates,
    weighting: str = "equal",
) -> FactorReturns:
    """Daily mean return of each cluster's present members.

    Membership is frozen at ``assignment.as_of`` for the whole range. With
    ``weighting="value"`` the panel's weight column is used instead of equal
    weights.
    """
    rows = date_rows(panel.dates, dates)
    tickers = list(assignment.labels)
    cols = np.array([panel.ticker_index(t) for t in tickers], dtype=int)
    labels = np.array([assignment.labels[t] for t in tickers], dtype=int)
    r = panel.masked_returns(rows)[:, cols]
    present = np.isfinite(r)
    if weighting == "equal":
        w = present.astype(float)
    elif weighting == "value":
        if panel.weights is None:
            raise ValueError("value weighting needs a weight column in the panel")
        w = np.where(present, np.nan_to_num(panel.weights[rows][:, cols]), 0.0)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    # per-cluster row sums rather than a matmul: each day's value must not
    # depend on how many other days are in the range
    weighted = np.where(present, r, 0.0) * w
    sums = np.zeros((r.shape[0], assignment.k))
    wsum = np.zeros_like(sums)
    counts = np.zeros_like(sums)
    for c in range(assignment.k):
        m = labels == c
        sums[:, c] = weighted[:, m].sum(axis=1)
        wsum[:, c] = w[:, m].sum(axis=1)
        counts[:, c] = present[:, m].sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = sums / wsum
    values[(counts == 0) | (wsum == 0)] = np.nan
    for c in range(assignment.k):
        if not np.any(counts[:, c] > 0):
            raise DegenerateFactorError(c)
    values.setflags(write=False)
    return FactorReturns(
        assignment.method_id, assignment.as_of, panel.dates[rows], values, counts.astype(int)
    )


@dataclass(frozen=True)
class FactorModel:
    ticker: str
    alpha: float
    betas: np.ndarray
    estimation_window: tuple
    n_obs: int
    ridge: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.all(np.isfinite(self.betas))):
            raise SingularDesignError(f"non-finite coefficients for {self.ticker}")


def solve_normal(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares via normal equations; ``y`` may hold several columns.

    Falls back to a ridge of ``1e-8 * trace/k`` when the Gram matrix has
    condition number above 1e10 and reports whether it did.
    """
    a = x.T @ x
    b = x.T @ y
    ridge = False
    cond = np.linalg.cond(a)
    if not cond <= COND_LIMIT:
        lam = RIDGE_SCALE * np.trace(a) / max(a.shape[0] - 1, 1)
        a = a + lam * np.eye(a.shape[0])
        ridge = True
    try:
        coef = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(str(exc)) from None
    if not np.all(np.isfinite(coef)):
        raise SingularDesignError("non-finite solution")
    return coef, ridge


def _check_design(f: np.ndarray, ticker) -> None:
    flat = np.ptp(f, axis=0) == 0
    if np.any(flat):
        raise SingularDesignError(
            f"{ticker}: factor(s) {np.flatnonzero(flat).tolist()} constant over the window"
        )


def fit_ols(panel: ReturnsPanel, factors: FactorReturns, ticker, window) -> FactorModel:
    """OLS of the ticker's returns on an intercept and the k factor series,
    over the days in ``window`` where the ticker and every factor are present."""
    frows = date_rows(factors.dates, window)
    days = factors.dates[frows]
    prow = date_rows(panel.dates, (days[0], days[-1])) if len(days) else slice(0, 0)
    y = panel.masked_returns(prow)[:, panel.ticker_index(ticker)]
    f = factors.values[frows]
    ok = np.isfinite(y) & np.all(np.isfinite(f), axis=1)
    n_obs = int(ok.sum())
    k = factors.k
    if n_obs < k + 2:
        raise WindowTooShortError(f"{ticker}: {n_obs} usable days, need {k + 2}")
    _check_design(f[ok], ticker)
    x = np.column_stack([np.ones(n_obs), f[ok]])
    coef, ridge = solve_normal(x, y[ok])
    return FactorModel(ticker, float(coef[0]), coef[1:].copy(), (days[0], days[-1]), n_obs, ridge)


def fit_many(panel: ReturnsPanel, factors: FactorReturns, tickers: Sequence, window) -> tuple[dict, dict]:
    """Fit every ticker; tickers with complete data share one Gram matrix.

    Returns ``(models, failures)`` where failures maps ticker to the error.
    """
    frows = date_rows(factors.dates, window)
    days = factors.dates[frows]
    if not len(days):
        return {}, {t: WindowTooShortError("empty window") for t in tickers}
    prow = date_rows(panel.dates, (days[0], days[-1]))
    f = factors.values[frows]
    f_ok = np.all(np.isfinite(f), axis=1)
    cols = np.array([panel.ticker_index(t) for t in tickers], dtype=int)
    y = panel.masked_returns(prow)[:, cols]
    full = np.all(np.isfinite(y[f_ok]), axis=0)
    models, failures = {}, {}
    k = factors.k
    n_full = int(f_ok.sum())
    shared = None
    if full.any() and n_full >= k + 2:
        try:
            _check_design(f[f_ok], "shared design")
            x = np.column_stack([np.ones(n_full), f[f_ok]])
            coef, ridge = solve_normal(x, y[f_ok][:, full])
            shared = (coef, ridge)
        except SingularDesignError:
            shared = None
    if shared is not None:
        coef, ridge = shared
        for j, t in enumerate(np.asarray(tickers, dtype=object)[full]):
            models[t] = FactorModel(t, float(coef[0, j]), coef[1:, j].copy(), (days[0], days[-1]), n_full, ridge)
    for t in tickers:
        if t in models:
            continue
        try:
            models[t] = fit_ols(panel, factors, t, window)
        except (WindowTooShortError, SingularDesignError) as exc:
            failures[t] = exc
    return models, failures


def predict(model: FactorModel, factors: FactorReturns, date) -> float:
    """alpha + betas . F on ``date``, using same-day realised factor returns."""
    fv = factors.values[factors.row(date)]
    if not np.all(np.isfinite(fv)):
        raise MissingFactorError(f"factor(s) missing on {to_day(date)}")
    return float(model.alpha + model.betas @ fv)


@dataclass(frozen=True)
class PredictionErrors:
    dates: np.ndarray
    tickers: tuple
    per_stock: np.ndarray


def prediction_errors(
    panel: ReturnsPanel,
    models: Mapping[str, FactorModel],
    factors: FactorReturns,
    dates,
) -> PredictionErrors:
    """actual - predicted for every (day, modelled ticker); NaN where either is
    unavailable."""
    frows = date_rows(factors.dates, dates)
    days = factors.dates[frows]
    tickers = tuple(t for t in panel.tickers if t in models)
    if not len(days) or not tickers:
        return PredictionErrors(days, tickers, np.full((len(days), len(tickers)), np.nan))
    for m in models.values():
        if m.estimation_window[1] >= days[0]:
            raise ValueError(
                f"model for {m.ticker} was estimated through {m.estimation_window[1]}, "
                f"not strictly before {days[0]}"
            )
    prow = date_rows(panel.dates, (days[0], days[-1]))
    cols = np.array([panel.ticker_index(t) for t in tickers], dtype=int)
    actual = panel.masked_returns(prow)[:, cols]
    alpha = np.array([models[t].alpha for t in tickers])
    betas = np.vstack([models[t].betas for t in tickers])
    f = factors.values[frows]
    pred = np.broadcast_to(alpha, (len(days), len(tickers))).copy()
    for c in range(factors.k):
        pred += f[:, c : c + 1] * betas[:, c]
    return PredictionErrors(days, tickers, actual - pred)


def write_models(models: Mapping[str, FactorModel], path) -> None:
    models = list(models.values())
    k = len(models[0].betas) if models else 0
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "alpha"] + [f"beta_{c}" for c in range(k)] + ["n_obs"])
        for m in models:
            w.writerow([m.ticker, repr(m.alpha)] + [repr(float(b)) for b in m.betas] + [m.n_obs])
