"""Parsing, validation and in-memory panels for returns, sectors, headlines
and embeddings.

All panels are immutable after construction: arrays are flagged read-only.
Returns are held in percent (0.5 means 0.5%) with NaN marking a missing
observation.
"""
from __future__ import annotations

import bisect
import contextlib
import csv
import datetime as dt
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DuplicateKeyError, ParseError, ValidationError

CANONICAL_SECTORS = (10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60)

RETURNS_HEADER = ["date", "ticker", "return_pct"]
MEMBERSHIP_HEADER = ["date", "ticker", "member"]
SECTOR_HEADER = ["effective_date", "ticker", "sector_code"]
HEADLINE_HEADER = ["date", "ticker", "relevance", "article_type", "text"]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def to_day(value) -> np.datetime64:
    return np.datetime64(value, "D")


def iso_monday(days: np.ndarray) -> np.ndarray:
    """Monday of the ISO week containing each date."""
    days = np.asarray(days, dtype="datetime64[D]")
    n = days.astype(np.int64)
    # 1970-01-01 was a Thursday.
    return (n - (n + 3) % 7).astype("datetime64[D]")


@contextlib.contextmanager
def atomic_write(path, mode="w", **kwargs) -> Iterator:
    """Write to a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        if "b" not in mode:
            kwargs.setdefault("encoding", "utf-8")
            kwargs.setdefault("newline", "")
        with open(tmp, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class TradingCalendar:
    dates: np.ndarray
    week_boundaries: np.ndarray
    week_ids: np.ndarray = field(repr=False)

    @classmethod
    def from_dates(cls, dates: Iterable) -> "TradingCalendar":
        days = np.asarray([to_day(d) for d in dates], dtype="datetime64[D]")
        if days.size and np.any(np.diff(days.astype(np.int64)) <= 0):
            raise ValidationError("calendar dates must be strictly increasing")
        mondays = iso_monday(days)
        if days.size:
            new_week = np.concatenate([[True], mondays[1:] != mondays[:-1]])
            week_ids = np.cumsum(new_week) - 1
            last_of_week = np.concatenate([mondays[1:] != mondays[:-1], [True]])
            boundaries = np.flatnonzero(last_of_week)
        else:
            week_ids = np.zeros(0, dtype=np.int64)
            boundaries = np.zeros(0, dtype=np.int64)
        return cls(_readonly(days), _readonly(boundaries), _readonly(week_ids))

    def __len__(self) -> int:
        return len(self.dates)

    def index_of(self, date) -> int:
        d = to_day(date)
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self.dates) or self.dates[i] != d:
            raise KeyError(f"{d} is not a trading date")
        return i

    def lookback_slice(self, as_of_idx: int, lookback_weeks: int) -> slice:
        """Trading days of the ``lookback_weeks`` calendar weeks ending at
        ``as_of_idx`` (inclusive), truncated at ``as_of_idx``."""
        if lookback_weeks < 1:
            raise ValueError("lookback_weeks must be >= 1")
        first_week = self.week_ids[as_of_idx] - lookback_weeks + 1
        start = int(np.searchsorted(self.week_ids, first_week, side="left"))
        return slice(start, as_of_idx + 1)


@dataclass(frozen=True)
class IngestConfig:
    membership_path: str | os.PathLike | None = None
    # "percent" keeps values as given, "decimal" multiplies by 100.
    units: str = "percent"


@dataclass(frozen=True)
class ReturnsPanel:
    calendar: TradingCalendar
    tickers: tuple
    returns: np.ndarray
    membership: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        shape = (len(self.calendar), len(self.tickers))
        if self.returns.shape != shape or self.membership.shape != shape:
            raise ValidationError(f"panel arrays must have shape {shape}")
        if len(set(self.tickers)) != len(self.tickers):
            raise ValidationError("tickers must be unique")
        if np.any(np.isinf(self.returns)):
            raise ValidationError("returns must be finite where present")
        if self.weights is not None and self.weights.shape != shape:
            raise ValidationError(f"weights must have shape {shape}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tickers)})

    @classmethod
    def from_arrays(cls, dates, tickers, returns, membership=None, weights=None):
        returns = np.array(returns, dtype=float)
        if membership is None:
            membership = np.isfinite(returns)
        membership = np.array(membership, dtype=bool)
        if weights is not None:
            weights = _readonly(np.array(weights, dtype=float))
        return cls(
            TradingCalendar.from_dates(dates),
            tuple(tickers),
            _readonly(returns),
            _readonly(membership),
            weights,
        )

    @property
    def dates(self) -> np.ndarray:
        return self.calendar.dates

    @property
    def present(self) -> np.ndarray:
        """Cells usable in any computation: member and a finite return."""
        return np.isfinite(self.returns) & self.membership

    def ticker_index(self, ticker) -> int:
        return self._index[ticker]

    def masked_returns(self, rows=slice(None)) -> np.ndarray:
        """Returns with non-member cells blanked to NaN."""
        r = np.array(self.returns[rows], dtype=float)
        r[~self.membership[rows]] = np.nan
        return r

    def truncate(self, last_date) -> "ReturnsPanel":
        """Panel restricted to dates <= last_date."""
        n = int(np.searchsorted(self.dates, to_day(last_date), side="right"))
        w = None if self.weights is None else self.weights[:n]
        return ReturnsPanel.from_arrays(
            self.dates[:n], self.tickers, self.returns[:n], self.membership[:n], w
        )


def _open_csv(path, header, *, prefix_ok=False):
    fh = open(path, encoding="utf-8", newline="")
    reader = csv.reader(fh)
    try:
        got = next(reader)
    except StopIteration:
        fh.close()
        raise ParseError("empty file", line=1)
    ok = got[: len(header)] == header if prefix_ok else got == header
    if not ok:
        fh.close()
        raise ParseError(f"expected header {','.join(header)}, got {','.join(got)}", line=1)
    return fh, reader, got


def _parse_date(text, line):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad date {text!r}", line=line) from None


def _parse_float(text, line, what):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"bad {what} {text!r}", line=line) from None
    if not math.isfinite(value):
        raise ValidationError(f"line {line}: non-finite {what} {text!r}")
    return value


def load_returns(path, config: IngestConfig | None = None) -> ReturnsPanel:
    config = config or IngestConfig()
    if config.units not in ("percent", "decimal"):
        raise ValueError(f"unknown units {config.units!r}")
    scale = 100.0 if config.units == "decimal" else 1.0
    fh, reader, header = _open_csv(path, RETURNS_HEADER, prefix_ok=True)
    has_weight = header[3:] == ["weight"]
    if len(header) > 3 and not has_weight:
        fh.close()
        raise ParseError(f"unexpected columns {header[3:]}", line=1)
    cells = {}
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            day = _parse_date(row[0], lineno)
            ticker = row[1].strip()
            if not ticker:
                raise ParseError("empty ticker", line=lineno)
            value = _parse_float(row[2], lineno, "return") * scale
            weight = _parse_float(row[3], lineno, "weight") if has_weight else None
            key = (day, ticker)
            if key in cells:
                raise DuplicateKeyError(f"duplicate ({day}, {ticker})", line=lineno)
            cells[key] = (value, weight)

    dates = sorted({d for d, _ in cells})
    tickers = sorted({t for _, t in cells})
    di = {d: i for i, d in enumerate(dates)}
    ti = {t: i for i, t in enumerate(tickers)}
    returns = np.full((len(dates), len(tickers)), np.nan)
    weights = np.full_like(returns, np.nan) if has_weight else None
    for (d, t), (value, weight) in cells.items():
        returns[di[d], ti[t]] = value
        if has_weight:
            weights[di[d], ti[t]] = weight
    membership = np.isfinite(returns)
    if config.membership_path is not None:
        _apply_membership(config.membership_path, membership, di, ti)
    return ReturnsPanel.from_arrays(dates, tickers, returns, membership, weights)


def _apply_membership(path, membership, di, ti):
    fh, reader, _ = _open_csv(path, MEMBERSHIP_HEADER)
    seen = set()
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            day = _parse_date(row[0], lineno)
            ticker = row[1].strip()
            if row[2].strip() not in ("0", "1"):
                raise ParseError(f"member must be 0 or 1, got {row[2]!r}", line=lineno)
            if (day, ticker) in seen:
                raise DuplicateKeyError(f"duplicate ({day}, {ticker})", line=lineno)
            seen.add((day, ticker))
            if day in di and ticker in ti:
                membership[di[day], ti[ticker]] = row[2].strip() == "1"


def write_returns(panel: ReturnsPanel, path) -> None:
    header = RETURNS_HEADER + (["weight"] if panel.weights is not None else [])
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for d, day in enumerate(panel.dates):
            ds = str(day)
            for i, t in enumerate(panel.tickers):
                v = panel.returns[d, i]
                if np.isfinite(v):
                    row = [ds, t, repr(float(v))]
                    if panel.weights is not None:
                        row.append(repr(float(panel.weights[d, i])))
                    w.writerow(row)


def write_membership(panel: ReturnsPanel, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEMBERSHIP_HEADER)
        for d, day in enumerate(panel.dates):
            for i, t in enumerate(panel.tickers):
                w.writerow([str(day), t, int(panel.membership[d, i])])


@dataclass(frozen=True)
class SectorMap:
    """Point-in-time sector codes, sorted by (ticker, effective_date)."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(sorted((to_day(d), t, int(c)) for d, t, c in self.entries))
        entries = tuple(sorted(entries, key=lambda e: (e[1], e[0])))
        index: dict = {}
        for d, t, c in entries:
            if c not in CANONICAL_SECTORS:
                raise ValidationError(f"unknown sector code {c} for {t}")
            days, codes = index.setdefault(t, ([], []))
            if days and days[-1] >= d:
                raise DuplicateKeyError(f"duplicate effective date {d} for {t}")
            days.append(d)
            codes.append(c)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_index", index)

    @property
    def tickers(self):
        return sorted(self._index)


def sector_at(smap: SectorMap, ticker, date) -> int | None:
    """Code of the latest entry effective on or before ``date``; None if none."""
    found = smap._index.get(ticker)
    if found is None:
        return None
    days, codes = found
    i = bisect.bisect_right(days, to_day(date))
    return codes[i - 1] if i else None


def load_sector_map(path) -> SectorMap:
    fh, reader, _ = _open_csv(path, SECTOR_HEADER)
    entries = []
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            day = _parse_date(row[0], lineno)
            try:
                code = int(row[2])
            except ValueError:
                raise ParseError(f"bad sector code {row[2]!r}", line=lineno) from None
            if code not in CANONICAL_SECTORS:
                raise ValidationError(f"line {lineno}: unknown sector code {code}")
            entries.append((day, row[1].strip(), code))
    return SectorMap(tuple(entries))


def write_sector_map(smap: SectorMap, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECTOR_HEADER)
        for d, t, c in smap.entries:
            w.writerow([str(d), t, c])


@dataclass(frozen=True)
class HeadlineRecord:
    timestamp: dt.date
    ticker: str
    text: str
    relevance: int
    article_type: str

    def __post_init__(self):
        if not 0 <= self.relevance <= 100:
            raise ValidationError(f"relevance {self.relevance} outside [0, 100]")
        if not self.text.strip():
            raise ValidationError("headline text is empty")


def load_headlines(path) -> list[HeadlineRecord]:
    fh, reader, _ = _open_csv(path, HEADLINE_HEADER)
    out = []
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            day = _parse_date(row[0], lineno)
            try:
                rel = int(row[2])
            except ValueError:
                raise ParseError(f"bad relevance {row[2]!r}", line=lineno) from None
            try:
                out.append(HeadlineRecord(day, row[1].strip(), row[4], rel, row[3].strip()))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
    return out


def write_headlines(records: Iterable[HeadlineRecord], path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(HEADLINE_HEADER)
        for r in records:
            w.writerow([r.timestamp.isoformat(), r.ticker, r.relevance, r.article_type, r.text])


@dataclass(frozen=True)
class EmbeddingSeries:
    """Weekly vectors keyed by (ticker, week_start); rows stored sorted by key."""

    dimension: int
    tickers: tuple
    week_starts: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        if self.dimension < 1:
            raise ValidationError("dimension must be positive")
        if self.vectors.shape != (len(self.tickers), self.dimension):
            raise ValidationError("ragged or mismatched embedding dimensions")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("embedding vectors must be finite")

    @classmethod
    def from_entries(cls, entries: dict, dimension: int | None = None) -> "EmbeddingSeries":
        norm = {}
        for (t, w), v in entries.items():
            key = (t, to_day(w))
            if key in norm:
                raise DuplicateKeyError(f"duplicate entry {key}")
            norm[key] = np.asarray(v, dtype=float)
        keys = sorted(norm)
        dims = {norm[k].shape for k in keys}
        if len(dims) > 1 or any(len(s) != 1 for s in dims):
            raise ValidationError(f"ragged embedding dimensions: {sorted(dims)}")
        if dimension is None:
            if not keys:
                raise ValidationError("dimension required for an empty series")
            dimension = norm[keys[0]].shape[0]
        mat = np.vstack([norm[k] for k in keys]) if keys else np.zeros((0, dimension))
        return cls(
            dimension,
            tuple(t for t, _ in keys),
            _readonly(np.array([w for _, w in keys], dtype="datetime64[D]")),
            _readonly(mat),
        )

    @property
    def entries(self) -> dict:
        return {
            (t, w.item()): self.vectors[i]
            for i, (t, w) in enumerate(zip(self.tickers, self.week_starts))
        }

    def __len__(self) -> int:
        return len(self.tickers)


def load_embeddings(path) -> EmbeddingSeries:
    fh = open(path, encoding="utf-8", newline="")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1)
        dim = len(header) - 2
        expected = ["ticker", "week_start"] + [f"v{i}" for i in range(dim)]
        if dim < 1 or header != expected:
            raise ParseError("expected header ticker,week_start,v0,...", line=1)
        entries = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise ValidationError(
                    f"line {lineno}: ragged dimension {len(row) - 2}, expected {dim}"
                )
            week = _parse_date(row[1], lineno)
            vec = [_parse_float(x, lineno, "component") for x in row[2:]]
            key = (row[0].strip(), week)
            if key in entries:
                raise DuplicateKeyError(f"duplicate {key}", line=lineno)
            entries[key] = vec
    return EmbeddingSeries.from_entries(entries, dimension=dim)


def write_embeddings(series: EmbeddingSeries, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "week_start"] + [f"v{i}" for i in range(series.dimension)])
        for t, wk, vec in zip(series.tickers, series.week_starts, series.vectors):
            w.writerow([t, str(wk)] + [repr(float(x)) for x in vec])
