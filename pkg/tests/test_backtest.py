import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from alphamine.backtest import (
    BacktestError,
    annualized_return,
    annualized_vol,
    fold_members,
    market_wealth,
    metrics_lines,
    metrics_table,
    rank_ensemble,
    sharpe,
    stratified_backtest,
    top_k_backtest,
    wealth_csv,
)
from alphamine.data import dataset_from_arrays, forward_returns, synth_market
from alphamine.evaluation import evaluate
from alphamine.formula import parse


@pytest.fixture(scope="module")
def ds():
    return synth_market(150, 20, seed=21)


def _gappy(ds):
    arrays = {k: np.array(v.values) for k, v in ds.panels.items()}
    for a in arrays.values():
        a[30:40, 4] = np.nan
        a[:15, 7] = np.nan
        a[100:, 11] = np.nan
    return dataset_from_arrays(arrays, ds.tickers, ds.calendar)


# -- metrics -----------------------------------------------------------------


def test_annualized_return_closed_forms():
    assert annualized_return([1.0, 2.0], 365) == 1.0
    assert annualized_return([1.0, 1.0], 100) == 0.0
    assert abs(annualized_return([1.0, 1.1], 730) - 0.0488088) <= 1e-7
    assert abs(annualized_return([1.0, 1.1], 730) - (math.exp(0.5 * math.log(1.1)) - 1)) <= 1e-15
    with pytest.raises(BacktestError):
        annualized_return([1.0, 0.0], 10)
    with pytest.raises(BacktestError):
        annualized_return([1.0, 2.0], 0)


def test_sharpe_and_vol():
    assert sharpe(0.2, 0.1) == 2.0
    assert sharpe(0.0, 0.3) == 0.0
    w = np.exp(np.cumsum(np.full(20, 0.01)))
    assert annualized_vol(w) == 0.0
    with pytest.raises(BacktestError):
        sharpe(0.1, annualized_vol(w))
    lr = np.array([0.01, -0.02, 0.015, 0.0])
    w = np.exp(np.concatenate([[0.0], np.cumsum(lr)]))
    assert annualized_vol(w) == pytest.approx(lr.std(ddof=1) * math.sqrt(244), rel=1e-12)


# -- rank ensemble -----------------------------------------------------------


def _rank_loop(row):
    idx = [j for j, v in enumerate(row) if math.isfinite(v)]
    out = [math.nan] * len(row)
    m = len(idx)
    for j in idx:
        less = sum(row[u] < row[j] for u in idx)
        eq = sum(row[u] == row[j] for u in idx)
        out[j] = 0.5 if m == 1 else (less + (eq - 1) / 2) / (m - 1)
    return out


def test_rank_ensemble_single_and_negation():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(10, 6))
    single = rank_ensemble([(a, 1)]).values
    assert np.allclose(single, [_rank_loop(r) for r in a], atol=1e-15)
    both = rank_ensemble([(a, 1), (-a, -1)]).values
    assert np.array_equal(both, single)


def test_rank_ensemble_matches_loop_oracle():
    rng = np.random.default_rng(1)
    alphas = [rng.normal(size=(20, 10)) for _ in range(3)]
    alphas[1][rng.random((20, 10)) < 0.2] = np.nan
    alphas[2][:, 3] = np.nan
    orient = [1, -1, 1]
    got = rank_ensemble(list(zip(alphas, orient))).values
    for t in range(20):
        ranks = [_rank_loop(list(o * a[t])) for a, o in zip(alphas, orient)]
        for s in range(10):
            vals = [r[s] for r in ranks if math.isfinite(r[s])]
            if vals:
                assert abs(got[t, s] - sum(vals) / len(vals)) <= 1e-12
            else:
                assert math.isnan(got[t, s])


def test_rank_ensemble_errors():
    with pytest.raises(BacktestError):
        rank_ensemble([])
    with pytest.raises(BacktestError):
        rank_ensemble([(np.ones((3, 3)), 1), (np.ones((3, 4)), 1)])


# -- top-k -------------------------------------------------------------------


def test_single_stock_pass_through():
    c = np.array([[10.0], [11.0], [9.9], [12.0]])
    d = dataset_from_arrays({"close": c})
    rep = top_k_backtest(np.ones_like(c), d, h=1, k=1, cost_rate=0.0)
    assert rep.wealth.wealth[-1] == pytest.approx(1.2, abs=1e-12)
    assert rep.wealth.wealth[0] == 1.0


def test_flat_full_universe_equals_market(ds):
    rep = top_k_backtest(np.ones(ds.shape), ds, h=1, k=ds.shape[1], cost_rate=0.0)
    assert np.max(np.abs(rep.wealth.wealth - market_wealth(ds))) <= 1e-9


def test_flat_every_valid_stock_equals_market_with_gaps(ds):
    d = _gappy(ds)
    rep = top_k_backtest(np.ones(d.shape), d, h=1, k=None, cost_rate=0.0)
    assert rep.label == "topall_h1"
    assert np.max(np.abs(rep.wealth.wealth - market_wealth(d))) <= 1e-9


def _replay(ws, d):
    """Rebuild wealth from the trade log alone."""
    from alphamine.backtest import _filled_close

    px = _filled_close(d)
    close = d["close"].values
    T, n = d.shape
    shares = np.zeros(n)
    cash = 1.0
    paid = 0.0
    by_day = {}
    for tr in ws.trades:
        by_day.setdefault(tr.day, []).append(tr)
    out = []
    for t in range(T):
        out.append(cash + float(np.nansum(shares * np.nan_to_num(px[t]))))
        for tr in by_day.get(t, []):
            assert tr.cost >= 0
            paid += tr.cost
            if tr.side == "sell":
                shares[tr.stock] -= tr.notional / px[t, tr.stock]
                cash += tr.notional - tr.cost
            else:
                shares[tr.stock] += tr.notional / close[t, tr.stock]
                cash -= tr.notional + tr.cost
        assert cash >= -1e-9
    return np.array(out), paid


@pytest.mark.parametrize("h", [1, 5])
def test_trade_log_cash_audit(ds, h):
    scores = np.random.default_rng(3).normal(size=ds.shape)
    rep = top_k_backtest(scores, ds, h=h, k=5, cost_rate=0.003)
    replay, paid = _replay(rep.wealth, ds)
    assert np.max(np.abs(replay - rep.wealth.wealth)) <= 1e-9
    assert paid == pytest.approx(rep.wealth.total_cost, abs=1e-12)
    assert (rep.wealth.wealth > 0).all()
    for tr in rep.wealth.trades:
        assert tr.cost == pytest.approx(0.0015 * tr.notional, abs=1e-15)
    buys_day0 = [tr for tr in rep.wealth.trades if tr.day == 0]
    assert sum(tr.notional + tr.cost for tr in buys_day0) == pytest.approx(1.0 / h, abs=1e-12)


def test_tranches_rebalance_on_their_own_days(ds):
    scores = np.random.default_rng(4).normal(size=ds.shape)
    rep = top_k_backtest(scores, ds, h=5, k=3, cost_rate=0.0)
    sells = sorted({tr.day for tr in rep.wealth.trades if tr.side == "sell"})
    assert sells[0] == 5
    buys_per_day = {}
    for tr in rep.wealth.trades:
        if tr.side == "buy":
            buys_per_day[tr.day] = buys_per_day.get(tr.day, 0) + 1
    assert set(buys_per_day.values()) == {3}


def test_cost_monotonicity(ds):
    scores = np.random.default_rng(5).normal(size=ds.shape)
    ars = [top_k_backtest(scores, ds, h=1, k=5, cost_rate=c).ar for c in (0.0, 0.001, 0.003, 0.01)]
    assert all(a > b for a, b in zip(ars, ars[1:]))


def test_short_universe_holds_cash(ds, caplog):
    scores = np.full(ds.shape, np.nan)
    scores[:, :3] = 1.0
    rep = top_k_backtest(scores, ds, h=1, k=5, cost_rate=0.0)
    assert np.all(rep.wealth.wealth == 1.0)
    assert rep.wealth.trades == []
    assert "fewer than 5" in caplog.text


def test_top_k_errors(ds):
    s = np.zeros(ds.shape)
    with pytest.raises(BacktestError):
        top_k_backtest(s, ds, h=0)
    with pytest.raises(BacktestError):
        top_k_backtest(s, ds, h=ds.shape[0])
    with pytest.raises(BacktestError):
        top_k_backtest(s, ds, k=0)
    with pytest.raises(BacktestError):
        top_k_backtest(s, ds, cost_rate=-0.1)
    with pytest.raises(BacktestError):
        top_k_backtest(np.zeros((3, 3)), ds)


def test_relative_metrics_use_market(ds):
    scores = np.random.default_rng(6).normal(size=ds.shape)
    rep = top_k_backtest(scores, ds, h=1, k=5)
    rel = rep.wealth.wealth / rep.market
    assert rep.relative["ar"] == pytest.approx(annualized_return(rel, ds.calendar_days()), abs=1e-15)
    assert rep.sr == pytest.approx(rep.ar / rep.vol, abs=1e-15)


# -- stratified --------------------------------------------------------------


def test_folds_partition_and_sizes(ds):
    scores = np.random.default_rng(7).normal(size=ds.shape)
    scores[scores > 1.5] = np.nan
    close = ds["close"].values
    for t in range(ds.shape[0]):
        folds = fold_members(scores, close, t, 10)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        flat = np.concatenate(folds)
        assert sorted(flat) == sorted(np.flatnonzero(np.isfinite(scores[t])))
        vals = [scores[t, f] for f in folds if len(f)]
        assert all(a.max() <= b.min() for a, b in zip(vals, vals[1:]))


def test_ten_stocks_ten_folds():
    d = synth_market(90, 10, seed=8)
    scores = np.random.default_rng(8).normal(size=d.shape)
    close = d["close"].values
    for t in range(d.shape[0]):
        assert [len(f) for f in fold_members(scores, close, t, 10)] == [1] * 10


def test_perfect_foresight_monotone(ds):
    fwd = forward_returns(ds, 1).values
    reps = stratified_backtest(fwd, ds, h=1, folds=10)
    ars = [r.ar for r in reps]
    assert all(a < b for a, b in zip(ars, ars[1:]))
    assert all(r.wealth.total_cost == 0 for r in reps)


def test_planted_folds_rank_correlated(planted_ds):
    a = evaluate(parse("div(vwap,close)"), planted_ds)
    reps = stratified_backtest(rank_ensemble([(a, 1)]), planted_ds, h=1, folds=10)
    rho = spearmanr(np.arange(10), [r.ar for r in reps]).statistic
    assert rho >= 0.6


def test_stratified_needs_two_folds(ds):
    with pytest.raises(BacktestError):
        stratified_backtest(np.zeros(ds.shape), ds, folds=1)


# -- output ------------------------------------------------------------------


def test_report_emission(ds):
    scores = np.random.default_rng(9).normal(size=ds.shape)
    rep = top_k_backtest(scores, ds, h=1, k=5)
    csv = wealth_csv(rep).splitlines()
    assert csv[0] == "date,wealth,market_wealth"
    assert len(csv) == ds.shape[0] + 1
    assert csv[1].startswith(ds.calendar[0].isoformat() + ",1.0,1.0")
    lines = metrics_lines([rep]).splitlines()
    assert lines[0].startswith("top5_h1.ar: ")
    assert len(lines) == 8
    table = metrics_table([rep])
    assert "top5_h1" in table and "%(" in table
