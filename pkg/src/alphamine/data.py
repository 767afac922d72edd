"""Panel containers, CSV I/O, forward returns and a synthetic market generator."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .formula import BASE_FACTORS, Factor, Formula, iter_nodes, to_text

PRICE_FIELDS = ("open", "high", "low", "close")
CSV_COLUMNS = ("date", "ticker", "open", "high", "low", "close", "volume", "vwap")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FactorPanel:
    """T x n values with a validity mask; invalid cells hold NaN."""

    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_array(cls, values: np.ndarray) -> "FactorPanel":
        values = np.array(values, dtype=float)
        valid = np.isfinite(values)
        values[~valid] = np.nan
        values.setflags(write=False)
        valid.setflags(write=False)
        return cls(values, valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ReturnPanel(FactorPanel):
    horizon: int = 1


@dataclass(frozen=True)
class MarketDataset:
    calendar: tuple[dt.date, ...]
    tickers: tuple[str, ...]
    panels: Mapping[str, FactorPanel]
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        shape = (len(self.calendar), len(self.tickers))
        for name, p in self.panels.items():
            if p.shape != shape:
                raise DataError(f"panel {name} has shape {p.shape}, expected {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.calendar), len(self.tickers)

    def __getitem__(self, name: str) -> FactorPanel:
        return self.panels[name]

    def calendar_days(self, start: int = 0, end: int = -1) -> int:
        """Elapsed calendar days between two trading-day indices."""
        return (self.calendar[end] - self.calendar[start]).days

    def slice(self, start: dt.date | None = None, end: dt.date | None = None) -> "MarketDataset":
        """Rows with ``start <= date <= end``."""
        idx = [i for i, d in enumerate(self.calendar) if (start is None or d >= start) and (end is None or d <= end)]
        if not idx:
            raise DataError("date range selects no trading days")
        lo, hi = idx[0], idx[-1] + 1
        panels = {k: FactorPanel.from_array(p.values[lo:hi]) for k, p in self.panels.items()}
        return MarketDataset(self.calendar[lo:hi], self.tickers, panels, self.notes)


def check_ohlc(ds: MarketDataset) -> None:
    o, h, l, c = (ds[k].values for k in PRICE_FIELDS)
    ok = np.isfinite(o) & np.isfinite(h) & np.isfinite(l) & np.isfinite(c)
    lo, hi = np.minimum(o, c), np.maximum(o, c)
    bad = ok & ~((l <= lo) & (hi <= h))
    if bad.any():
        t, s = np.argwhere(bad)[0]
        raise DataError(f"OHLC ordering violated at {ds.calendar[t]} {ds.tickers[s]}")


# ---------------------------------------------------------------------------
# CSV


def _parse_float(text: str, col: str, row: int) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"row {row}: cannot parse {col}={text!r}") from None
    if not math.isfinite(x):
        raise DataError(f"row {row}: non-finite {col}={text!r}")
    return x


def load_csv(path: str | os.PathLike) -> MarketDataset:
    """Read ``date,ticker,open,high,low,close,volume[,vwap]`` rows into dense panels.

    The calendar is the union of dates; missing (date, ticker) rows are invalid in
    every panel. Without a vwap column, vwap is approximated by (high+low+close)/3.
    Row numbers in errors count the header as row 1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_vwap = header == list(CSV_COLUMNS)
        if not has_vwap and header != list(CSV_COLUMNS[:-1]):
            raise DataError(f"{path}: header must be {','.join(CSV_COLUMNS[:-1])}[,vwap], got {','.join(header)}")
        fields = header[2:]
        records: dict[tuple[dt.date, str], tuple[int, list[float]]] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            try:
                date = dt.date.fromisoformat(row[0].strip())
            except ValueError:
                raise DataError(f"row {row_no}: cannot parse date {row[0]!r}") from None
            ticker = row[1].strip()
            if not ticker:
                raise DataError(f"row {row_no}: empty ticker")
            vals = [_parse_float(v, c, row_no) for v, c in zip(row[2:], fields)]
            rec = dict(zip(fields, vals))
            for c in PRICE_FIELDS + (("vwap",) if has_vwap else ()):
                if rec[c] <= 0:
                    raise DataError(f"row {row_no}: non-positive price {c}={rec[c]}")
            if rec["volume"] < 0:
                raise DataError(f"row {row_no}: negative volume")
            lo, hi = min(rec["open"], rec["close"]), max(rec["open"], rec["close"])
            if not (rec["low"] <= lo and hi <= rec["high"]):
                raise DataError(f"row {row_no}: OHLC ordering violated")
            key = (date, ticker)
            if key in records:
                raise DataError(f"row {row_no}: duplicate ({date}, {ticker}), first seen at row {records[key][0]}")
            records[key] = (row_no, vals)
    if not records:
        raise DataError(f"{path}: no data rows")

    calendar = tuple(sorted({d for d, _ in records}))
    tickers = tuple(sorted({s for _, s in records}))
    ti = {d: i for i, d in enumerate(calendar)}
    si = {s: j for j, s in enumerate(tickers)}
    arr = np.full((len(fields), len(calendar), len(tickers)), np.nan)
    for (d, s), (_, vals) in records.items():
        arr[:, ti[d], si[s]] = vals
    panels = {f: FactorPanel.from_array(arr[k]) for k, f in enumerate(fields)}
    notes: tuple[str, ...] = ()
    if not has_vwap:
        p = {k: panels[k].values for k in ("high", "low", "close")}
        panels["vwap"] = FactorPanel.from_array((p["high"] + p["low"] + p["close"]) / 3.0)
        notes = ("vwap approximated as (high+low+close)/3",)
    return MarketDataset(calendar, tickers, panels, notes)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(ds: MarketDataset, path: str | os.PathLike) -> None:
    """Write rows for every cell with a valid close; floats use round-trip repr."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    cols = [ds[c].values for c in CSV_COLUMNS[2:]]
    close_ok = ds["close"].valid
    for t, d in enumerate(ds.calendar):
        iso = d.isoformat()
        for s, tk in enumerate(ds.tickers):
            if close_ok[t, s]:
                w.writerow([iso, tk, *(repr(float(c[t, s])) for c in cols)])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Returns


def forward_returns(ds: MarketDataset, h: int = 1) -> ReturnPanel:
    """r[t, s] = (close[t+h, s] - close[t, s]) / close[t, s]; the last h rows are invalid."""
    T = len(ds.calendar)
    if not 1 <= h < T:
        raise DataError(f"horizon {h} out of range 1..{T - 1}")
    c = ds["close"].values
    r = np.full_like(c, np.nan)
    r[: T - h] = (c[h:] - c[: T - h]) / c[: T - h]
    p = FactorPanel.from_array(r)
    return ReturnPanel(p.values, p.valid, horizon=h)


# ---------------------------------------------------------------------------
# Synthetic markets


def business_days(n: int, start: dt.date = dt.date(2010, 1, 4)) -> tuple[dt.date, ...]:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return tuple(out)


def _zscore_row(x: np.ndarray) -> np.ndarray:
    z = np.zeros_like(x)
    ok = np.isfinite(x)
    if ok.sum() >= 3:
        v = x[ok]
        sd = v.std()
        if sd > 0:
            z[ok] = (v - v.mean()) / sd
    return z


def synth_market(
    n_days: int,
    n_stocks: int,
    planted: tuple[Formula, float] | None = None,
    seed: int = 0,
    daily_vol: float = 0.02,
) -> MarketDataset:
    """Geometric random-walk market with optional planted predictive signal.

    When ``planted=(formula, strength)`` is given, each day's log return to the
    next close is ``vol * (strength * z + sqrt(1 - strength**2) * eps)`` plus a
    common market move, where ``z`` is the cross-sectional z-score of the planted
    formula on that day. The formula's daily cross-sectional correlation with the
    next-day return then averages about ``strength``.
    """
    if n_days < 80 or n_stocks < 10:
        raise DataError("synth_market needs n_days >= 80 and n_stocks >= 10")
    if planted is not None:
        formula, strength = planted
        if not 0.0 <= strength <= 1.0:
            raise DataError("planted strength must lie in [0, 1]")
        unknown = {n.name for n in iter_nodes(formula) if isinstance(n, Factor)} - set(BASE_FACTORS)
        if unknown:
            raise DataError(f"planted formula {to_text(formula)} uses unknown factors {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    T, n = n_days, n_stocks
    vol = daily_vol * rng.uniform(0.7, 1.3, size=n)
    base_volume = np.exp(rng.normal(13.0, 0.8, size=n))
    close = np.empty((T, n))
    opn = np.empty((T, n))
    high = np.empty((T, n))
    low = np.empty((T, n))
    vwap = np.empty((T, n))
    volume = np.empty((T, n))
    prev = np.exp(rng.normal(3.0, 0.5, size=n))

    def intraday(t: int, c_prev: np.ndarray, c: np.ndarray) -> None:
        o = c_prev * np.exp(rng.normal(0.0, 0.3, size=n) * vol)
        hi = np.maximum(o, c) * np.exp(np.abs(rng.normal(0.0, 0.5, size=n)) * vol)
        lo = np.minimum(o, c) * np.exp(-np.abs(rng.normal(0.0, 0.5, size=n)) * vol)
        w = rng.dirichlet(np.ones(4), size=n)
        vw = np.exp(w[:, 0] * np.log(o) + w[:, 1] * np.log(hi) + w[:, 2] * np.log(lo) + w[:, 3] * np.log(c))
        opn[t], high[t], low[t], close[t] = o, hi, lo, c
        vwap[t] = np.clip(vw, lo, hi)
        volume[t] = np.round(base_volume * np.exp(rng.normal(0.0, 0.4, size=n)))

    calendar = business_days(T)
    tickers = tuple(f"S{j:03d}" for j in range(n))
    intraday(0, prev, prev * np.exp(rng.normal(0.0, 1.0, size=n) * vol))

    if planted is not None:
        from .evaluation import evaluate  # local: evaluation imports this module

    for t in range(T - 1):
        eps = rng.normal(0.0, 1.0, size=n)
        market = rng.normal(0.0, 0.5 * daily_vol)
        if planted is not None and strength > 0:
            partial = _assemble(calendar[: t + 1], tickers, opn, high, low, close, volume, vwap, t + 1)
            a = evaluate(formula, partial).values[t]
            z = _zscore_row(a)
            live = z != 0
            shock = np.where(live, strength * z + math.sqrt(1.0 - strength**2) * eps, eps)
        else:
            shock = eps
        c_next = close[t] * np.exp(market + vol * shock)
        intraday(t + 1, close[t], c_next)

    return _assemble(calendar, tickers, opn, high, low, close, volume, vwap, T)


def _assemble(calendar, tickers, opn, high, low, close, volume, vwap, rows: int) -> MarketDataset:
    arrays = {"open": opn, "high": high, "low": low, "close": close, "volume": volume, "vwap": vwap}
    panels = {k: FactorPanel.from_array(v[:rows]) for k, v in arrays.items()}
    return MarketDataset(tuple(calendar[:rows]), tuple(tickers), panels)


def dataset_from_arrays(
    arrays: Mapping[str, np.ndarray],
    tickers: Sequence[str] | None = None,
    calendar: Sequence[dt.date] | None = None,
) -> MarketDataset:
    """Wrap raw T x n arrays (NaN = invalid) as a dataset; handy in tests."""
    first = next(iter(arrays.values()))
    T, n = first.shape
    tickers = tuple(tickers) if tickers is not None else tuple(f"S{j:03d}" for j in range(n))
    calendar = tuple(calendar) if calendar is not None else business_days(T)
    return MarketDataset(calendar, tickers, {k: FactorPanel.from_array(v) for k, v in arrays.items()})
