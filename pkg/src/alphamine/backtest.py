"""Portfolio simulations driven by per-day stock scores.

Capital is split into ``h`` equal tranches. Tranche ``t mod h`` trades at the
close of day ``t``: it sells everything it holds and buys its new selection
equal-weighted. Wealth is marked at each close before that day's trades, so the
first entry is the starting capital of 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FactorPanel, MarketDataset, atomic_write_text
from .evaluation import cs_rank

log = logging.getLogger(__name__)

TRADING_DAYS_PER_YEAR = 244


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class Trade:
    day: int
    stock: int
    side: str
    notional: float
    cost: float


@dataclass
class WealthSeries:
    wealth: np.ndarray
    trades: list[Trade] = field(default_factory=list, repr=False)

    @property
    def total_cost(self) -> float:
        return float(sum(t.cost for t in self.trades))


@dataclass
class BacktestReport:
    dates: tuple
    wealth: WealthSeries
    market: np.ndarray
    ar: float
    vol: float
    sr: float
    relative: dict[str, float]
    label: str = ""

    def metrics(self) -> dict[str, float]:
        return {
            "ar": self.ar,
            "vol": self.vol,
            "sr": self.sr,
            "rel_ar": self.relative["ar"],
            "rel_vol": self.relative["vol"],
            "rel_sr": self.relative["sr"],
            "final_wealth": float(self.wealth.wealth[-1]),
            "total_cost": self.wealth.total_cost,
        }


# ---------------------------------------------------------------------------
# Metrics


def annualized_return(wealth: Sequence[float] | WealthSeries, calendar_days: float) -> float:
    """exp(365 / T' * log(S_T / S_0)) - 1 with T' elapsed calendar days."""
    w = wealth.wealth if isinstance(wealth, WealthSeries) else np.asarray(wealth, dtype=float)
    if w[0] <= 0 or w[-1] <= 0 or calendar_days < 1:
        raise BacktestError("annualized return needs positive wealth and T' >= 1")
    return math.exp(365.0 / calendar_days * math.log(w[-1] / w[0])) - 1.0


def annualized_vol(wealth: Sequence[float] | WealthSeries) -> float:
    """Sample std of daily log wealth returns, scaled by sqrt(244)."""
    w = wealth.wealth if isinstance(wealth, WealthSeries) else np.asarray(wealth, dtype=float)
    lw = np.log(w)
    lr = np.diff(lw)
    # constant up to the rounding of the logs themselves
    if lr.size < 2 or lr.max() - lr.min() <= 1e-12 * max(np.abs(lr).max(), np.abs(lw).max()):
        return 0.0
    return float(lr.std(ddof=1) * math.sqrt(TRADING_DAYS_PER_YEAR))


def sharpe(ar: float, vol: float) -> float:
    """Annualized return over annualized volatility; the risk-free rate is zero."""
    if not vol > 0:
        raise BacktestError("Sharpe ratio undefined for zero volatility")
    return ar / vol


def _metrics(w: np.ndarray, days: int) -> tuple[float, float, float]:
    ar = annualized_return(w, days)
    vol = annualized_vol(w)
    sr = sharpe(ar, vol) if vol > 0 else float("nan")
    return ar, vol, sr


# ---------------------------------------------------------------------------
# Scores


def rank_ensemble(alphas: Sequence[tuple[FactorPanel | np.ndarray, int]]) -> FactorPanel:
    """Mean per-day cross-sectional rank of the oriented alphas.

    Each cell averages over the alphas valid there; a cell no alpha covers is
    invalid.
    """
    if not alphas:
        raise BacktestError("rank_ensemble needs at least one alpha")
    total = None
    count = None
    for a, orientation in alphas:
        v = a.values if isinstance(a, FactorPanel) else np.asarray(a, dtype=float)
        r = cs_rank(v if orientation > 0 else -v)
        ok = np.isfinite(r)
        if total is None:
            total, count = np.zeros(r.shape), np.zeros(r.shape)
        elif r.shape != total.shape:
            raise BacktestError("alpha panels are not aligned")
        total += np.where(ok, r, 0.0)
        count += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        return FactorPanel.from_array(total / count)


# ---------------------------------------------------------------------------
# Simulation


def _filled_close(ds: MarketDataset) -> np.ndarray:
    """Close forward-filled along time; NaN before a stock's first valid close."""
    c = ds["close"].values
    out = np.array(c, dtype=float)
    for t in range(1, out.shape[0]):
        gap = ~np.isfinite(out[t])
        out[t, gap] = out[t - 1, gap]
    return out


def market_wealth(ds: MarketDataset) -> np.ndarray:
    """Equal-weight daily-rebalanced portfolio of the stocks with a valid close."""
    px = _filled_close(ds)
    c = ds["close"].values
    T = px.shape[0]
    w = np.ones(T)
    for t in range(T - 1):
        ok = np.isfinite(c[t])
        r = px[t + 1, ok] / c[t, ok] - 1.0 if ok.any() else np.zeros(1)
        w[t + 1] = w[t] * (1.0 + r.mean())
    return w


def simulate(
    ds: MarketDataset,
    select: Callable[[int], np.ndarray],
    h: int,
    cost_rate: float = 0.0,
) -> WealthSeries:
    """Run the tranche simulation with ``select(t)`` giving the stock indices to buy."""
    T, n = ds.shape
    if not 1 <= h < T:
        raise BacktestError(f"horizon {h} out of range 1..{T - 1}")
    if cost_rate < 0:
        raise BacktestError("cost_rate must be >= 0")
    close = ds["close"].values
    px = _filled_close(ds)
    leg = cost_rate / 2.0
    shares = np.zeros((h, n))
    cash = np.full(h, 1.0 / h)
    wealth = np.empty(T)
    trades: list[Trade] = []
    for t in range(T):
        held = shares @ np.nan_to_num(px[t])
        wealth[t] = cash.sum() + held.sum()
        if t == T - 1:
            break
        j = t % h
        for s in np.flatnonzero(shares[j]):
            notional = shares[j, s] * px[t, s]
            fee = leg * notional
            cash[j] += notional - fee
            trades.append(Trade(t, int(s), "sell", float(notional), float(fee)))
        shares[j] = 0.0
        picks = select(t)
        if len(picks) == 0:
            continue
        notional = cash[j] / (len(picks) * (1.0 + leg))
        for s in picks:
            shares[j, s] = notional / close[t, s]
            trades.append(Trade(t, int(s), "buy", float(notional), float(leg * notional)))
        cash[j] = 0.0
    return WealthSeries(wealth, trades)


def _tradeable(scores: np.ndarray, close: np.ndarray, t: int) -> np.ndarray:
    ok = np.isfinite(scores[t]) & np.isfinite(close[t])
    idx = np.flatnonzero(ok)
    # ascending score, ties by column index
    return idx[np.lexsort((idx, scores[t, idx]))]


def _report(ds: MarketDataset, ws: WealthSeries, label: str) -> BacktestReport:
    days = max(1, ds.calendar_days(0, -1))
    mkt = market_wealth(ds)
    ar, vol, sr = _metrics(ws.wealth, days)
    rar, rvol, rsr = _metrics(ws.wealth / mkt, days)
    return BacktestReport(ds.calendar, ws, mkt, ar, vol, sr, {"ar": rar, "vol": rvol, "sr": rsr}, label)


def _score_values(scores: FactorPanel | np.ndarray, ds: MarketDataset) -> np.ndarray:
    v = scores.values if isinstance(scores, FactorPanel) else np.asarray(scores, dtype=float)
    if v.shape != ds.shape:
        raise BacktestError(f"score panel shape {v.shape} does not match dataset {ds.shape}")
    return v


def top_k_backtest(
    scores: FactorPanel | np.ndarray,
    ds: MarketDataset,
    h: int = 1,
    k: int | None = 10,
    cost_rate: float = 0.003,
) -> BacktestReport:
    """Buy the ``k`` best-scored stocks each day, hold ``h`` days, pay ``cost_rate`` per round trip.

    ``k=None`` buys every stock with a valid score and close that day.
    """
    if k is not None and k < 1:
        raise BacktestError("k must be >= 1")
    sv = _score_values(scores, ds)
    close = ds["close"].values
    short_days: list[int] = []

    def select(t: int) -> np.ndarray:
        order = _tradeable(sv, close, t)
        if k is None:
            return order
        if len(order) < k:
            if len(order) or np.isfinite(sv[t]).any():
                short_days.append(t)
            return order[:0]
        return order[::-1][:k]

    ws = simulate(ds, select, h, cost_rate)
    if short_days:
        log.warning("%d rebalance day(s) had fewer than %d valid scores; tranche held cash", len(short_days), k)
    return _report(ds, ws, f"top{'all' if k is None else k}_h{h}")


def fold_members(scores: np.ndarray, close: np.ndarray, t: int, folds: int) -> list[np.ndarray]:
    """Score-ordered split of day ``t``'s valid stocks into contiguous folds, last = best."""
    return np.array_split(_tradeable(scores, close, t), folds)


def stratified_backtest(
    scores: FactorPanel | np.ndarray,
    ds: MarketDataset,
    h: int = 1,
    folds: int = 10,
) -> list[BacktestReport]:
    """One zero-cost strategy per score fold; fold ``folds - 1`` holds the highest scores."""
    if folds < 2:
        raise BacktestError("folds must be >= 2")
    sv = _score_values(scores, ds)
    close = ds["close"].values
    split = [fold_members(sv, close, t, folds) for t in range(ds.shape[0])]
    return [
        _report(ds, simulate(ds, lambda t, i=i: split[t][i], h, 0.0), f"fold{i}_h{h}")
        for i in range(folds)
    ]


# ---------------------------------------------------------------------------
# Output


def wealth_csv(report: BacktestReport) -> str:
    lines = ["date,wealth,market_wealth"]
    for d, w, m in zip(report.dates, report.wealth.wealth, report.market):
        lines.append(f"{d.isoformat()},{float(w)!r},{float(m)!r}")
    return "\n".join(lines) + "\n"


def write_wealth_csv(report: BacktestReport, path) -> None:
    atomic_write_text(path, wealth_csv(report))


def metrics_lines(reports: Sequence[BacktestReport]) -> str:
    """``label.key: value`` lines, one metric per line."""
    out = []
    for r in reports:
        for k, v in r.metrics().items():
            out.append(f"{r.label}.{k}: {float(v)!r}")
    return "\n".join(out) + "\n"


def metrics_table(reports: Sequence[BacktestReport]) -> str:
    """AR and SR with market-relative values in brackets, one row per strategy."""
    rows = [f"{'strategy':<14}{'AR':>22}{'SR':>18}{'vol':>10}"]
    for r in reports:
        ar = f"{r.ar:.1%}({r.relative['ar']:.1%})"
        sr = f"{r.sr:.2f}({r.relative['sr']:.2f})"
        rows.append(f"{r.label:<14}{ar:>22}{sr:>18}{r.vol:>10.3f}")
    return "\n".join(rows) + "\n"
