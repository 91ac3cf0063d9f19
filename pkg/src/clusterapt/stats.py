"""Paired comparison of two methods' per-stock prediction errors."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InsufficientPairsError

UNDERFLOW = 1e-300
TTEST_HEADER = ["method_a", "method_b", "n", "mean_diff", "t_stat", "p_value"]


def t_cdf(x, df):
    """Student's t CDF with ``df`` degrees of freedom (regularised incomplete beta)."""
    if np.any(np.asarray(df) < 1):
        raise ValueError("df must be >= 1")
    out = special.stdtr(df, x)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PairedTestResult:
    method_a: str
    method_b: str
    n: int
    mean_diff: float
    t_stat: float
    p_value: float
    zero_variance: bool = False

    @property
    def underflow(self) -> bool:
        return self.p_value < UNDERFLOW

    def p_text(self) -> str:
        return "< 1e-300 (underflow)" if self.underflow else f"{self.p_value:.6g}"

    def row(self) -> list:
        return [self.method_a, self.method_b, self.n, repr(self.mean_diff), repr(self.t_stat), repr(self.p_value)]


def paired_t_test(a, b, method_a: str = "a", method_b: str = "b") -> PairedTestResult:
    """Two-sided paired t-test on ``|a| - |b|`` over cells defined in both inputs.

    A positive mean difference means method ``a`` has the larger absolute
    errors.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    both = np.isfinite(a) & np.isfinite(b)
    d = np.abs(a[both]) - np.abs(b[both])
    n = d.size
    if n < 2:
        raise InsufficientPairsError(f"{n} paired observations, need 2")
    mean = float(d.mean())
    sd = math.sqrt(float(((d - mean) ** 2).sum()) / (n - 1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTestResult(method_a, method_b, n, 0.0, 0.0, 1.0)
        return PairedTestResult(method_a, method_b, n, mean, math.copysign(math.inf, mean), 0.0, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    p = min(1.0, 2.0 * float(special.stdtr(n - 1, -abs(t))))
    return PairedTestResult(method_a, method_b, n, mean, t, p)


def append_ttest(result: PairedTestResult, path) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(TTEST_HEADER)
        w.writerow(result.row())


def daily_summary(values) -> dict:
    """Distribution summary of a daily metric series (NaNs ignored)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if not v.size:
        return {"n": 0}
    q = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "p05": float(q[0]),
        "p25": float(q[1]),
        "median": float(q[2]),
        "p75": float(q[3]),
        "p95": float(q[4]),
    }
