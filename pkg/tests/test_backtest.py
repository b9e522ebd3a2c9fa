import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from ctrlmv.core.panel_store import generate_synthetic_panel, random_market
from ctrlmv.models.market import ReturnPanel
from ctrlmv.models.params import PolicyParams, ValueParams
from ctrlmv.services.backtest import (
    BacktestConfig,
    ReplicationResult,
    draw_subset,
    replicate,
    run_backtest,
)
from ctrlmv.utils.errors import (
    DegeneracyError,
    InsufficientDataError,
    MissingSideDataError,
    NumericalOverflowError,
    UnknownStrategyError,
)

CLASSICAL = ("ew", "mv", "min_v", "js", "rp")


def _panel(seed=1, n_days=252 * 2):
    return generate_synthetic_panel(random_market(4, np.random.default_rng(5)), n_days=n_days, seed=seed)


def _ctrl_init(d=4):
    return ValueParams(theta3=1.0), PolicyParams.initial(d, phi1=1.0, phi2=0.1, w=1.5)


def _config(**kw):
    base = dict(window_months=12, subset_size=None, init=_ctrl_init())
    base.update(kw)
    return BacktestConfig(**base)


def _month_growth(panel, result, name):
    """(realized month growth, weights-implied month growth) for every test month."""
    test_days = result.wealth.index[1:]
    wealth = result.wealth[name]
    logged = result.weights[result.weights.strategy == name]
    out = []
    for period, days in pd.Series(test_days, index=test_days).groupby(test_days.to_period("M")):
        first, last = days.iloc[0], days.iloc[-1]
        before = wealth.index[wealth.index.get_loc(first) - 1]
        w = logged[logged.date == first].set_index("ticker")["weight"].reindex(panel.tickers).to_numpy()
        growth = (1.0 + panel.returns.loc[first:last]).prod().to_numpy()
        out.append((wealth[last] / wealth[before], float(w @ growth)))
    return out


def test_equal_weights_hand_computed():
    dates = pd.bdate_range("2020-01-01", "2020-03-31")
    returns = pd.DataFrame(0.0, index=dates, columns=["A", "B"])
    march = dates[dates.month == 3]
    returns.loc[march[0]] = [0.1, -0.1]
    returns.loc[march[1]] = [-0.1, 0.1]
    panel = ReturnPanel(returns=returns)
    result = run_backtest(panel, BacktestConfig(window_months=2, strategies=("ew",)))
    wealth = result.wealth["ew"].to_numpy()
    assert len(wealth) == len(march) + 1
    np.testing.assert_allclose(wealth[:3], [1.0, 1.0, 0.99], atol=1e-15)
    assert wealth[-1] == pytest.approx(0.99)


def test_market_column_is_passed_through():
    panel = _panel()
    result = run_backtest(panel, _config(strategies=("market", "ew")))
    test_days = result.wealth.index[1:]
    expected = np.cumprod(1.0 + panel.market.loc[test_days].to_numpy())
    np.testing.assert_array_equal(result.wealth["market"].to_numpy()[1:], expected)
    assert result.wealth.index[0] < test_days[0]
    assert test_days[0] == panel.dates[panel.dates.to_period("M") == test_days[0].to_period("M")][0]


def test_logged_weights_are_fully_invested():
    result = run_backtest(_panel(), _config(strategies=(*CLASSICAL, "ctrl")))
    sums = result.weights.groupby(["date", "strategy"])["weight"].sum()
    np.testing.assert_allclose(sums.to_numpy(), 1.0, atol=1e-10)
    assert set(result.weights.strategy) == {*CLASSICAL, "ctrl"}
    assert result.weights.date.nunique() == 12


@pytest.mark.parametrize("strategy", ["mv", "rp", "ctrl"])
def test_holdings_drift_within_the_month(strategy):
    panel = _panel()
    result = run_backtest(panel, _config(strategies=(strategy,)))
    for realized, implied in _month_growth(panel, result, strategy):
        assert realized == pytest.approx(implied, rel=1e-10)


def test_decisions_ignore_future_returns():
    panel = _panel()
    cfg = _config(strategies=(*CLASSICAL, "ctrl"))
    base = run_backtest(panel, cfg)
    cutoff = pd.Timestamp(base.weights.date.unique()[6])
    shocked = panel.returns.copy()
    shocked.loc[cutoff:] = shocked.loc[cutoff:] * -3.0
    altered = run_backtest(ReturnPanel(returns=shocked, factors=panel.factors, caps=panel.caps), cfg)
    keep = base.weights.date <= cutoff
    pd.testing.assert_frame_equal(base.weights[keep], altered.weights[keep])
    before = base.wealth.index < cutoff
    pd.testing.assert_frame_equal(base.wealth[before], altered.wealth[before])


def test_history_requirements():
    panel = _panel()
    with pytest.raises(InsufficientDataError):
        run_backtest(panel, _config(window_months=30))
    with pytest.raises(InsufficientDataError):
        run_backtest(panel, _config(test_start="2000-06"))
    result = run_backtest(panel, _config(strategies=("ew",), test_start="2001-03", test_end="2001-05"))
    assert result.weights.date.nunique() == 3


def test_missing_side_data_is_reported_up_front():
    bare = ReturnPanel(returns=_panel().returns)
    for strategy in ("market", "lw", "bl", "ff"):
        with pytest.raises(MissingSideDataError):
            run_backtest(bare, _config(strategies=(strategy,)))


def test_unknown_strategy():
    with pytest.raises(UnknownStrategyError):
        BacktestConfig(strategies=("ew", "magic"))


class TestStrategyFailures(unittest.TestCase):
    def setUp(self):
        self.panel = _panel()

    @patch("ctrlmv.services.backtest.allocate")
    def test_failed_rule_keeps_previous_weights(self, mock_allocate):
        mock_allocate.side_effect = DegeneracyError("singular window")
        result = run_backtest(self.panel, _config(strategies=("mv",)))
        first = result.weights[result.weights.date == result.weights.date.iloc[0]]
        np.testing.assert_allclose(first.weight.to_numpy(), 0.25)
        sums = result.weights.groupby("date")["weight"].sum()
        np.testing.assert_allclose(sums.to_numpy(), 1.0)
        self.assertEqual(mock_allocate.call_count, 12)

    @patch("ctrlmv.services.backtest.allocate")
    def test_failure_after_a_success_reuses_drifted_weights(self, mock_allocate):
        calls = []

        def first_then_fail(req):
            calls.append(req)
            if len(calls) == 1:
                return np.array([0.4, 0.3, 0.2, 0.1])
            raise DegeneracyError("singular window")

        mock_allocate.side_effect = first_then_fail
        result = run_backtest(self.panel, _config(strategies=("mv",)))
        dates = result.weights.date.unique()
        first = result.weights[result.weights.date == dates[0]].weight.to_numpy()
        second = result.weights[result.weights.date == dates[1]].weight.to_numpy()
        np.testing.assert_allclose(first, [0.4, 0.3, 0.2, 0.1])
        self.assertAlmostEqual(float(second.sum()), 1.0)
        self.assertFalse(np.allclose(second, first))
        self.assertEqual(calls[0].window.shape, (12, 4))

    @patch("ctrlmv.services.backtest.OnlineLearner.step")
    def test_learner_overflow_freezes_ctrl(self, mock_step):
        def overflow_on_day_30(log_returns):
            if mock_step.call_count == 30:
                raise NumericalOverflowError("non-finite iterate", iteration=2)
            return 1.0

        mock_step.side_effect = overflow_on_day_30
        result = run_backtest(self.panel, _config(strategies=("ew", "ctrl")))
        self.assertEqual(mock_step.call_count, 30)
        self.assertEqual(len(result.failures), 1)
        date, name, message = result.failures[0]
        self.assertEqual(name, "ctrl")
        self.assertEqual(date, result.wealth.index[30])
        self.assertIn("non-finite", message)
        self.assertTrue(np.all(np.isfinite(result.wealth["ctrl"].to_numpy())))
        sums = result.weights[result.weights.strategy == "ctrl"].groupby("date")["weight"].sum()
        np.testing.assert_allclose(sums.to_numpy(), 1.0)
        for realized, implied in _month_growth(self.panel, result, "ctrl"):
            self.assertAlmostEqual(realized, implied, places=10)
        table = ReplicationResult([result]).failures()
        self.assertEqual(table.shape, (1, 4))
        self.assertEqual(table.replication.iloc[0], 0)


def test_ctrl_pretrains_on_history_when_not_initialized():
    panel = _panel()
    cfg = _config(strategies=("ctrl",), init=None, pretrain_iterations=2)
    result = run_backtest(panel, cfg)
    assert np.all(result.wealth["ctrl"].to_numpy() >= 0)
    sums = result.weights.groupby("date")["weight"].sum()
    np.testing.assert_allclose(sums.to_numpy(), 1.0)


def test_subsets_are_seeded():
    panel = _panel()
    cfg = _config(subset_size=2, seed=3)
    assert draw_subset(panel, cfg, 0) == draw_subset(panel, cfg, 0)
    assert len(draw_subset(panel, cfg, 1)) == 2
    assert draw_subset(panel, _config(subset_size=None), 0) == panel.tickers


def test_replications_are_reproducible():
    panel = _panel()
    cfg = _config(strategies=("ew", "min_v", "ctrl"), subset_size=3, replications=2, seed=8,
                  init=_ctrl_init(3))
    first = replicate(panel, cfg)
    again = replicate(panel, cfg)
    assert len(first.results) == 2
    pd.testing.assert_frame_equal(first.summary(), again.summary())
    assert first.wilcoxon() is None
    assert first.sharpe_frame().shape == (2, 3)
    assert first.mean_wealth().shape == (len(first.results[0].wealth), 3)
    with pytest.raises(InsufficientDataError):
        replicate(panel, _config(subset_size=10))


def test_subperiod_metrics():
    result = run_backtest(_panel(), _config(strategies=("ew", "min_v")))
    part = result.subperiod("2001-03-01", "2001-06-30")
    assert set(part) == {"ew", "min_v"}
    assert part["ew"].ann_vol > 0
    with pytest.raises(InsufficientDataError):
        result.subperiod("2001-03-01", "2001-03-01")
