"""Formula evaluation over panels, IC and similarity, first-PC scores.

Panels are plain float arrays with NaN marking invalid cells. Window sums are
accumulated lag by lag in time order so results are reproducible bit for bit
and agree with a straightforward scalar loop.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .data import FactorPanel, MarketDataset, ReturnPanel, forward_returns
from .formula import Apply, Factor, Formula, to_text

MIN_STOCKS = 3
MIN_DAY_FRACTION = 0.5
PCA_MIN_COLUMN_FRACTION = 0.6
PCA_TOL = 1e-8
PCA_MAX_ITER = 200
PCA_MIN_OVERLAP = 10


class EvaluationError(ValueError):
    pass


class PcaError(ValueError):
    pass


class OpCounter:
    """Counts scalar multiply-adds on the archive screening path."""

    def __init__(self) -> None:
        self.pc = 0
        self.compare = 0

    def reset(self) -> None:
        self.pc = 0
        self.compare = 0


op_counter = OpCounter()


@dataclass(frozen=True)
class AlphaMatrix(FactorPanel):
    source: str = ""


# ---------------------------------------------------------------------------
# Operator kernels


def _clean(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x[~np.isfinite(x)] = np.nan
    return x


def _windows(x: np.ndarray, d: int) -> list[np.ndarray]:
    """Lagged views; element j holds x[t - d + 1 + j] for rows t >= d - 1."""
    T = x.shape[0]
    return [x[j : T - d + 1 + j] for j in range(d)]


def _pad(x: np.ndarray, body: np.ndarray, lead: int) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    if body.shape[0] > 0:
        out[lead:] = body
    return out


def _roll_sum(ws: list[np.ndarray]) -> np.ndarray:
    s = ws[0].copy()
    for w in ws[1:]:
        s += w
    return s


def _roll_extreme(ws: list[np.ndarray], fn) -> np.ndarray:
    s = ws[0].copy()
    for w in ws[1:]:
        s = fn(s, w)
    return s


def ts_mean(x: np.ndarray, d: int) -> np.ndarray:
    if x.shape[0] < d:
        return np.full(x.shape, np.nan)
    return _pad(x, _roll_sum(_windows(x, d)) / d, d - 1)


def ts_std(x: np.ndarray, d: int) -> np.ndarray:
    if x.shape[0] < d:
        return np.full(x.shape, np.nan)
    ws = _windows(x, d)
    m = _roll_sum(ws) / d
    ss = _roll_sum([(w - m) ** 2 for w in ws])
    sd = np.sqrt(ss / (d - 1))
    const = _roll_extreme(ws, np.maximum) == _roll_extreme(ws, np.minimum)
    sd[const] = 0.0
    return _pad(x, sd, d - 1)


def ts_min(x: np.ndarray, d: int) -> np.ndarray:
    if x.shape[0] < d:
        return np.full(x.shape, np.nan)
    return _pad(x, _roll_extreme(_windows(x, d), np.minimum), d - 1)


def ts_max(x: np.ndarray, d: int) -> np.ndarray:
    if x.shape[0] < d:
        return np.full(x.shape, np.nan)
    return _pad(x, _roll_extreme(_windows(x, d), np.maximum), d - 1)


def ts_rank(x: np.ndarray, d: int) -> np.ndarray:
    """Position of today's value inside its window, 0 = lowest, 1 = highest, ties averaged."""
    if x.shape[0] < d:
        return np.full(x.shape, np.nan)
    ws = _windows(x, d)
    last = ws[-1]
    less = np.zeros(last.shape)
    equal = np.zeros(last.shape)
    bad = np.zeros(last.shape, dtype=bool)
    for w in ws:
        less += w < last
        equal += w == last
        bad |= np.isnan(w)
    r = (less + 0.5 * (equal - 1.0)) / (d - 1)
    r[bad] = np.nan
    return _pad(x, r, d - 1)


def delay(x: np.ndarray, d: int) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    if x.shape[0] > d:
        out[d:] = x[:-d]
    return out


def delta(x: np.ndarray, d: int) -> np.ndarray:
    return x - delay(x, d)


def ts_corr(x: np.ndarray, y: np.ndarray, d: int) -> np.ndarray:
    """Rolling Pearson correlation; windows where either side is constant are invalid."""
    if x.shape[0] < d:
        return np.full(x.shape, np.nan)
    wx, wy = _windows(x, d), _windows(y, d)
    mx, my = _roll_sum(wx) / d, _roll_sum(wy) / d
    dx = [w - mx for w in wx]
    dy = [w - my for w in wy]
    sxy = _roll_sum([a * b for a, b in zip(dx, dy)])
    sxx = _roll_sum([a * a for a in dx])
    syy = _roll_sum([b * b for b in dy])
    with np.errstate(divide="ignore", invalid="ignore"):
        c = sxy / np.sqrt(sxx * syy)
    const = (_roll_extreme(wx, np.maximum) == _roll_extreme(wx, np.minimum)) | (
        _roll_extreme(wy, np.maximum) == _roll_extreme(wy, np.minimum)
    )
    c[const] = np.nan
    return _pad(x, c, d - 1)


def cs_rank(x: np.ndarray) -> np.ndarray:
    """Per-row rank over valid cells scaled to [0, 1]; a lone valid cell maps to 0.5."""
    out = np.full(x.shape, np.nan)
    ok = np.isfinite(x)
    m = ok.sum(axis=1)
    rows = m > 0
    if not rows.any():
        return out
    r = rankdata(np.where(ok, x, np.nan)[rows], axis=1, nan_policy="omit")
    mm = m[rows][:, None].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(mm > 1, (r - 1.0) / (mm - 1.0), 0.5)
    scaled[~ok[rows]] = np.nan
    out[rows] = scaled
    return out


def _div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a / b
    out[b == 0] = np.nan
    return out


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.abs(a))
    out[a == 0] = np.nan
    return out


KERNELS: dict[str, Callable[..., np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _div,
    "neg": np.negative,
    "abs_": np.abs,
    "sign": np.sign,
    "log_": _log,
    "ts_mean": ts_mean,
    "ts_std": ts_std,
    "ts_min": ts_min,
    "ts_max": ts_max,
    "ts_rank": ts_rank,
    "delay": delay,
    "delta": delta,
    "ts_corr": ts_corr,
    "cs_rank": cs_rank,
}


def _eval_node(f: Formula, ds: MarketDataset, cache: "PanelCache | None") -> np.ndarray:
    if isinstance(f, Factor):
        if f.name not in ds.panels:
            raise EvaluationError(f"unknown factor {f.name!r}")
        return ds.panels[f.name].values
    key = to_text(f)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    args = [_eval_node(a, ds, cache) for a in f.args]
    fn = KERNELS[f.op.name]
    with np.errstate(all="ignore"):
        out = fn(*args, f.op.window) if f.op.window is not None else fn(*args)
    out = _clean(out)
    out.setflags(write=False)
    if cache is not None:
        cache.put(key, out)
    return out


def evaluate(f: Formula, ds: MarketDataset, cache: "PanelCache | None" = None) -> AlphaMatrix:
    """Compute the T x n alpha panel of ``f`` over ``ds``."""
    vals = _eval_node(f, ds, cache)
    valid = np.isfinite(vals)
    return AlphaMatrix(vals, valid, source=to_text(f))


class PanelCache:
    """Thread-safe LRU of evaluated subtree panels keyed by canonical text."""

    def __init__(self, max_items: int = 1024):
        self.max_items = max_items
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: str) -> np.ndarray | None:
        with self._lock:
            v = self._data.get(key)
            if v is not None:
                self._data.move_to_end(key)
            return v

    def put(self, key: str, value: np.ndarray) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.max_items:
                self._data.popitem(last=False)


# ---------------------------------------------------------------------------
# Correlation statistics


def daily_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row Pearson correlation over jointly valid cells; NaN marks skipped rows.

    Works along the last axis and broadcasts leading axes, so ``a`` of shape
    (T, n) against ``b`` of shape (k, T, n) gives k rows of T correlations. A row
    is skipped with fewer than three joint-valid cells or when either side is
    constant over them.
    """
    if a.shape[-2:] != b.shape[-2:]:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.isfinite(a) & np.isfinite(b)
    cnt = m.sum(axis=-1)
    A = np.where(m, a, 0.0)
    B = np.where(m, b, 0.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ma = A.sum(axis=-1) / cnt
        mb = B.sum(axis=-1) / cnt
        da = np.where(m, a - ma[..., None], 0.0)
        db = np.where(m, b - mb[..., None], 0.0)
        sab = (da * db).sum(axis=-1)
        saa = (da * da).sum(axis=-1)
        sbb = (db * db).sum(axis=-1)
        c = sab / np.sqrt(saa * sbb)
    const_a = np.where(m, a, -np.inf).max(axis=-1) == np.where(m, a, np.inf).min(axis=-1)
    const_b = np.where(m, b, -np.inf).max(axis=-1) == np.where(m, b, np.inf).min(axis=-1)
    skip = (cnt < MIN_STOCKS) | const_a | const_b | ~np.isfinite(c)
    c[skip] = np.nan
    return c


@dataclass(frozen=True)
class IcReport:
    ic: float
    ic_array: np.ndarray
    valid_days: int
    orientation: int
    raw_mean: float
    valid: bool

    @property
    def day_valid(self) -> np.ndarray:
        return np.isfinite(self.ic_array)

    @property
    def fitness(self) -> float:
        return self.ic if self.valid else 0.0


def ic(a: FactorPanel | np.ndarray, r: FactorPanel | np.ndarray) -> IcReport:
    """Mean daily cross-sectional Pearson correlation between alpha and returns.

    The reported ``ic`` is oriented (non-negative); ``orientation`` is -1 when the
    raw mean was negative. The report is invalid when fewer than half the days on
    which returns exist survive the skip rules.
    """
    av = a.values if isinstance(a, FactorPanel) else np.asarray(a, dtype=float)
    rv = r.values if isinstance(r, FactorPanel) else np.asarray(r, dtype=float)
    arr = daily_corr(av, rv)
    ok = np.isfinite(arr)
    n_ok = int(ok.sum())
    ret_days = int(np.isfinite(rv).any(axis=1).sum())
    raw = float(arr[ok].mean()) if n_ok else 0.0
    valid = n_ok > 0 and n_ok >= MIN_DAY_FRACTION * ret_days
    orientation = -1 if raw < 0 else 1
    return IcReport(abs(raw), arr, n_ok, orientation, raw, valid)


def similarity(a: FactorPanel | np.ndarray, b: FactorPanel | np.ndarray) -> float:
    av = a.values if isinstance(a, FactorPanel) else np.asarray(a, dtype=float)
    bv = b.values if isinstance(b, FactorPanel) else np.asarray(b, dtype=float)
    arr = daily_corr(av, bv)
    ok = np.isfinite(arr)
    if not ok.any():
        raise EvaluationError("similarity undefined: no comparable days")
    return float(arr[ok].mean())


def similarity_many(a: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """``similarity`` of ``a`` (T x n) against every panel of a k x T x n stack.

    Pairs with no comparable day come back as NaN.
    """
    arr = daily_corr(np.asarray(a, dtype=float), np.asarray(stack, dtype=float))
    ok = np.isfinite(arr)
    cnt = ok.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(ok, arr, 0.0).sum(axis=-1) / cnt
    out[cnt == 0] = np.nan
    return out


# ---------------------------------------------------------------------------
# First principal component


@dataclass(frozen=True)
class PcScores:
    """Unit-norm first-PC score per day; NaN on days dropped during cleaning."""

    scores: np.ndarray
    loading: np.ndarray
    columns: np.ndarray
    iterations: int

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.scores)


def clean_for_pca(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Drop dead days and sparse columns, mean-impute the rest.

    Returns the dense matrix, the kept row indices and the kept column indices.
    """
    ok = np.isfinite(values)
    rows = np.flatnonzero(ok.any(axis=1))
    if rows.size == 0:
        raise PcaError("alpha has no valid cells")
    frac = ok[rows].mean(axis=0)
    cols = np.flatnonzero(frac >= PCA_MIN_COLUMN_FRACTION)
    if cols.size < 3:
        raise PcaError(f"only {cols.size} columns have >= {PCA_MIN_COLUMN_FRACTION:.0%} valid days")
    sub = values[np.ix_(rows, cols)]
    live = np.isfinite(sub).any(axis=1)
    rows, sub = rows[live], sub[live]
    means = np.nanmean(sub, axis=0)
    dense = np.where(np.isfinite(sub), sub, means[None, :])
    return dense, rows, cols


def power_iteration(X: np.ndarray, tol: float = PCA_TOL, max_iter: int = PCA_MAX_ITER) -> tuple[np.ndarray, int]:
    """Leading eigenvector of X^T X without ever forming it.

    Each step applies one X-multiply pair to the newest iterate, as in the plain
    power method, but keeps the orthonormalised iterates and takes the top Ritz
    vector of their span. That converges where the plain method stalls on close
    leading eigenvalues. Stops when the Ritz residual falls below ``tol`` relative
    to the eigenvalue, the iterates span an invariant subspace, or after
    ``max_iter`` steps.
    """
    k = X.shape[1]
    q = np.random.default_rng(0).standard_normal(k)
    q /= np.linalg.norm(q)
    Q = np.empty((k, min(k, max_iter)))
    W = np.empty_like(Q)
    v = q
    it = 0
    for it in range(1, min(k, max_iter) + 1):
        Q[:, it - 1] = q
        W[:, it - 1] = X.T @ (X @ q)
        Qk, Wk = Q[:, :it], W[:, :it]
        H = Qk.T @ Wk
        theta, Y = np.linalg.eigh(0.5 * (H + H.T))
        if theta[-1] <= 0:
            raise PcaError("zero matrix")
        y = Y[:, -1]
        v = Qk @ y
        resid = np.linalg.norm(Wk @ y - theta[-1] * v) / theta[-1]
        if resid < tol:
            break
        nxt = W[:, it - 1].copy()
        for _ in range(2):
            nxt -= Qk @ (Qk.T @ nxt)
        nn = np.linalg.norm(nxt)
        if nn <= 1e-12 * np.linalg.norm(W[:, it - 1]):
            break
        q = nxt / nn
    op_counter.pc += 2 * it * X.size
    return v / np.linalg.norm(v), it


def first_pc_scores(a: FactorPanel | np.ndarray, max_iter: int = PCA_MAX_ITER) -> PcScores:
    """Project the cleaned, column-centred alpha matrix on its first principal axis.

    Days are samples and stocks are features. The score vector has unit norm and
    its largest-magnitude entry is positive.
    """
    values = a.values if isinstance(a, FactorPanel) else np.asarray(a, dtype=float)
    dense, rows, cols = clean_for_pca(values)
    X = dense - dense.mean(axis=0)
    if not np.any(X):
        raise PcaError("matrix is zero after centring")
    loading, it = power_iteration(X, max_iter=max_iter)
    s = X @ loading
    ns = np.linalg.norm(s)
    if ns == 0 or not np.isfinite(ns):
        raise PcaError("degenerate first component")
    s /= ns
    sign = 1.0 if s[np.argmax(np.abs(s))] >= 0 else -1.0
    scores = np.full(values.shape[0], np.nan)
    scores[rows] = sign * s
    return PcScores(scores, sign * loading, cols, it)


def _abs_pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x @ x) * (y @ y))
    if den == 0:
        raise PcaError("constant score vector")
    return float(min(1.0, abs(x @ y) / den))


def pca_similarity(p: PcScores, q: PcScores) -> float:
    """Absolute Pearson correlation of two score vectors over jointly valid days."""
    if p.scores.shape != q.scores.shape:
        raise PcaError("score vectors cover different calendars")
    m = p.valid & q.valid
    if m.sum() < PCA_MIN_OVERLAP:
        raise PcaError(f"only {int(m.sum())} overlapping days")
    op_counter.compare += p.scores.shape[0]
    return _abs_pearson(p.scores[m], q.scores[m])


def pca_similarity_many(q: PcScores, stack: np.ndarray) -> np.ndarray:
    """``pca_similarity`` of ``q`` against each row of a p x T score stack.

    Rows with too little overlap or zero variance get NaN. Work is O(p T).
    """
    p, T = stack.shape
    if T != q.scores.shape[0]:
        raise PcaError("score vectors cover different calendars")
    op_counter.compare += p * T
    m = np.isfinite(stack) & q.valid[None, :]
    cnt = m.sum(axis=1)
    S = np.where(m, stack, 0.0)
    Q = np.where(m, q.scores[None, :], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ms = S.sum(axis=1) / cnt
        mq = Q.sum(axis=1) / cnt
        ds = np.where(m, S - ms[:, None], 0.0)
        dq = np.where(m, Q - mq[:, None], 0.0)
        out = np.abs((ds * dq).sum(axis=1)) / np.sqrt((ds * ds).sum(axis=1) * (dq * dq).sum(axis=1))
    out = np.minimum(out, 1.0)
    out[(cnt < PCA_MIN_OVERLAP) | ~np.isfinite(out)] = np.nan
    return out


# ---------------------------------------------------------------------------
# Convenience wrapper bound to one dataset


class Evaluator:
    """Dataset plus forward returns, with panel and IC caches keyed by formula text."""

    def __init__(self, ds: MarketDataset, horizon: int = 1, cache_items: int | None = None):
        self.ds = ds
        self.horizon = horizon
        self.returns: ReturnPanel = forward_returns(ds, horizon)
        if cache_items is None:
            # ~256 MB of panels
            cache_items = max(64, int(256e6 // (8 * ds.shape[0] * ds.shape[1])))
        self.panels = PanelCache(cache_items)
        self._fit: dict[str, tuple[float, int]] = {}
        self._lock = threading.Lock()

    def alpha(self, f: Formula) -> AlphaMatrix:
        return evaluate(f, self.ds, self.panels)

    def ic(self, f: Formula) -> IcReport:
        try:
            return ic(self.alpha(f), self.returns)
        except EvaluationError:
            return IcReport(0.0, np.full(self.ds.shape[0], np.nan), 0, 1, 0.0, False)

    def fitness(self, f: Formula) -> tuple[float, int]:
        """(fitness, orientation), memoised; invalid reports score 0."""
        key = to_text(f)
        with self._lock:
            hit = self._fit.get(key)
        if hit is not None:
            return hit
        rep = self.ic(f)
        out = (rep.fitness, rep.orientation)
        with self._lock:
            self._fit[key] = out
        return out

    def oriented(self, f: Formula, orientation: int) -> np.ndarray:
        v = self.alpha(f).values
        return v if orientation > 0 else -v
