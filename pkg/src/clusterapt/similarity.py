"""Pairwise stock similarity from return co-movement and from text embeddings.

Also holds the headline pipeline that turns raw news records into weekly
documents and vectors: relevance/type filter, same-day TF-IDF dedup, weekly
concatenation and a deterministic hashing embedder used in place of a hosted
model.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import EmbeddingSeries, HeadlineRecord, ReturnsPanel, iso_monday, to_day
from .errors import InsufficientUniverseError, ZeroDocumentError

MIN_WINDOW_DAYS = 5
MIN_COVERAGE = 0.8
DEFAULT_DEDUP_THRESHOLD = 0.3

_TOKEN = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class SimilarityMatrix:
    tickers: tuple
    values: np.ndarray
    as_of: np.datetime64
    lookback_weeks: int
    kind: str
    # (ticker, reason) for tickers dropped from the matrix
    warnings: tuple = ()

    def __post_init__(self):
        n = len(self.tickers)
        if self.values.shape != (n, n):
            raise ValueError(f"values must be {n}x{n}")
        if self.kind not in ("return_correlation", "embedding_cosine"):
            raise ValueError(f"unknown similarity kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.tickers)


def _finish(values: np.ndarray) -> np.ndarray:
    values = np.nan_to_num(values, nan=0.0)
    values = 0.5 * (values + values.T)
    np.clip(values, -1.0, 1.0, out=values)
    np.fill_diagonal(values, 1.0)
    values.setflags(write=False)
    return values


def pairwise_complete_corr(x: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Pearson correlation between columns of ``x`` using, for each pair, only
    the rows where both columns are present. Pairs with < 2 common rows or a
    constant common segment come back as NaN."""
    x = np.where(present, x, 0.0)
    m = present.astype(float)
    counts = m.sum(axis=0)
    # Centre first so the raw-moment formulas below do not cancel badly.
    mu = np.divide(x.sum(axis=0), counts, out=np.zeros_like(counts), where=counts > 0)
    xc = np.where(present, x - mu, 0.0)
    n = m.T @ m
    sx = xc.T @ m
    sxy = xc.T @ xc
    sxx = (xc * xc).T @ m
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = sxy - sx * sx.T / n
        vx = sxx - sx * sx / n
        vy = vx.T
        corr = cov / np.sqrt(vx * vy)
    corr[(n < 2) | ~(vx > 0) | ~(vy > 0)] = np.nan
    return corr


def return_correlation(
    panel: ReturnsPanel,
    as_of,
    lookback_weeks: int,
    min_coverage: float = MIN_COVERAGE,
) -> SimilarityMatrix:
    cal = panel.calendar
    idx = cal.index_of(as_of)
    window = cal.lookback_slice(idx, lookback_weeks)
    n_days = window.stop - window.start
    if n_days < MIN_WINDOW_DAYS:
        raise InsufficientUniverseError(
            f"lookback window at {cal.dates[idx]} has {n_days} trading days, need {MIN_WINDOW_DAYS}"
        )
    r = panel.masked_returns(window)
    present = np.isfinite(r)
    coverage = present.sum(axis=0) / n_days
    eligible = panel.membership[idx] & (coverage >= min_coverage)

    warnings = []
    cols = []
    for j in np.flatnonzero(eligible):
        seg = r[present[:, j], j]
        if seg.max() == seg.min():
            warnings.append((panel.tickers[j], "zero variance"))
        else:
            cols.append(j)
    if len(cols) < 2:
        raise InsufficientUniverseError(
            f"{len(cols)} eligible tickers for return correlation at {cal.dates[idx]}"
        )
    cols = np.asarray(cols)
    corr = pairwise_complete_corr(r[:, cols], present[:, cols])
    for a, b in zip(*np.nonzero(np.triu(np.isnan(corr), 1))):
        warnings.append(
            (f"{panel.tickers[cols[a]]}/{panel.tickers[cols[b]]}", "undefined pair set to 0")
        )
    return SimilarityMatrix(
        tickers=tuple(panel.tickers[j] for j in cols),
        values=_finish(corr),
        as_of=cal.dates[idx],
        lookback_weeks=lookback_weeks,
        kind="return_correlation",
        warnings=tuple(warnings),
    )


def embedding_similarity(
    series: EmbeddingSeries, panel: ReturnsPanel, as_of, lookback_weeks: int
) -> SimilarityMatrix:
    """Cosine similarity of per-ticker mean vectors over weeks starting in
    ``(as_of - 7*lookback_weeks days, as_of]``."""
    if lookback_weeks < 1:
        raise ValueError("lookback_weeks must be >= 1")
    idx = panel.calendar.index_of(as_of)
    day = panel.dates[idx]
    lo = day - np.timedelta64(7 * lookback_weeks, "D")
    in_window = (series.week_starts > lo) & (series.week_starts <= day)
    members = {t for t, m in zip(panel.tickers, panel.membership[idx]) if m}

    sums = defaultdict(lambda: np.zeros(series.dimension))
    counts: dict = defaultdict(int)
    for i in np.flatnonzero(in_window):
        t = series.tickers[i]
        if t in members:
            sums[t] += series.vectors[i]
            counts[t] += 1

    warnings = []
    kept, pooled = [], []
    for t in panel.tickers:
        if t not in counts:
            continue
        v = sums[t] / counts[t]
        norm = np.linalg.norm(v)
        if norm == 0.0:
            warnings.append((t, "zero pooled vector"))
            continue
        kept.append(t)
        pooled.append(v / norm)
    if len(kept) < 2:
        raise InsufficientUniverseError(
            f"{len(kept)} tickers with embeddings in window ending {day}"
        )
    u = np.vstack(pooled)
    return SimilarityMatrix(
        tickers=tuple(kept),
        values=_finish(u @ u.T),
        as_of=day,
        lookback_weeks=lookback_weeks,
        kind="embedding_cosine",
        warnings=tuple(warnings),
    )


# --- headline pipeline -----------------------------------------------------


@dataclass(frozen=True)
class WeeklyDocument:
    ticker: str
    week_start: dt.date
    text: str


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def load_exclusions(path) -> set[str]:
    """One article type per line; ``#`` starts a comment."""
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tag = line.split("#", 1)[0].strip()
            if tag:
                out.add(tag)
    return out


def filter_headlines(
    records: Iterable[HeadlineRecord], excluded_types: Iterable[str] = ()
) -> list[HeadlineRecord]:
    excluded = set(excluded_types)
    return [r for r in records if r.relevance == 100 and r.article_type not in excluded]


def tfidf_matrix(texts: Sequence[str]) -> np.ndarray:
    """Row-normalised TF-IDF vectors with IDF taken over ``texts`` only.

    Uses raw term counts and smoothed IDF ``ln((1+n)/(1+df)) + 1`` so that
    terms present in every document keep a positive weight.
    """
    docs = [tokenize(t) for t in texts]
    vocab = {w: i for i, w in enumerate(sorted({w for d in docs for w in d}))}
    tf = np.zeros((len(docs), len(vocab)))
    for i, d in enumerate(docs):
        for w in d:
            tf[i, vocab[w]] += 1.0
    df = (tf > 0).sum(axis=0)
    idf = np.log((1.0 + len(docs)) / (1.0 + df)) + 1.0
    x = tf * idf
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _greedy_keep(texts: Sequence[str], threshold: float) -> list[int]:
    x = tfidf_matrix(texts)
    keep: list[int] = []
    for i in range(len(texts)):
        if not keep or np.max(x[keep] @ x[i]) <= threshold:
            keep.append(i)
    return keep


def tfidf_dedup(
    records: Sequence[HeadlineRecord], threshold: float = DEFAULT_DEDUP_THRESHOLD
) -> list[HeadlineRecord]:
    """Drop later same-day, same-ticker headlines whose TF-IDF cosine with an
    earlier surviving headline exceeds ``threshold``.

    The greedy scan is repeated on the survivors until nothing more is
    dropped, because IDF is recomputed over each (ticker, date) group and
    removing documents shifts it; the fixed point makes the operation
    idempotent.
    """
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    order = sorted(range(len(records)), key=lambda i: records[i].timestamp)
    groups: dict = defaultdict(list)
    for i in order:
        groups[(records[i].ticker, records[i].timestamp)].append(i)

    survivors = set()
    for members in groups.values():
        while True:
            keep = _greedy_keep([records[i].text for i in members], threshold)
            if len(keep) == len(members):
                break
            members = [members[k] for k in keep]
        survivors.update(members)
    return [records[i] for i in order if i in survivors]


def weekly_concat(records: Iterable[HeadlineRecord]) -> list[WeeklyDocument]:
    """One document per (ticker, ISO week), texts joined by single spaces in
    timestamp order. Output sorted by (ticker, week_start)."""
    grouped: dict = defaultdict(list)
    for r in sorted(records, key=lambda r: r.timestamp):
        week = iso_monday(np.array([to_day(r.timestamp)]))[0].item()
        grouped[(r.ticker, week)].append(r.text.strip())
    return [WeeklyDocument(t, w, " ".join(texts)) for (t, w), texts in sorted(grouped.items())]


def stub_embed(doc: WeeklyDocument | str, dimension: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of tokens into ``dimension`` buckets, L2-normalised."""
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    text = doc.text if isinstance(doc, WeeklyDocument) else doc
    tokens = tokenize(text)
    if not tokens:
        raise ZeroDocumentError("document has no tokens")
    v = np.zeros(dimension)
    salt = f"{seed}:".encode()
    for tok in tokens:
        h = int.from_bytes(hashlib.blake2b(salt + tok.encode(), digest_size=8).digest(), "little")
        v[h % dimension] += 1.0 if (h >> 63) & 1 else -1.0
    norm = math.sqrt(float(v @ v))
    if norm == 0.0:
        raise ZeroDocumentError("hashed document vector is zero")
    return v / norm


def embed_documents(
    docs: Iterable[WeeklyDocument], dimension: int, seed: int = 0
) -> EmbeddingSeries:
    entries = {}
    for d in docs:
        try:
            entries[(d.ticker, d.week_start)] = stub_embed(d, dimension, seed)
        except ZeroDocumentError:
            continue
    return EmbeddingSeries.from_entries(entries, dimension=dimension)
