import math

import numpy as np
import pandas as pd
import pytest

from ctrlmv.core.metrics import (
    METRIC_COLUMNS,
    MetricReport,
    annualize,
    calmar,
    daily_returns,
    evaluate,
    max_drawdown,
    recovery_time,
    sharpe,
    sortino,
    summarize_reports,
    wilcoxon_matrix,
    wilcoxon_paired,
)
from ctrlmv.utils.errors import (
    InsufficientDataError,
    InvalidStateError,
    UndefinedMetricError,
)


def _report(sharpe_value=1.0, rt=None):
    return MetricReport(0.1, 0.2, sharpe_value, 1.5, 0.8, 0.1, rt)


def test_constant_growth_annualizes_exactly():
    wealth = 1.001 ** np.arange(253)
    ann_return, ann_vol = annualize(wealth)
    assert ann_return == pytest.approx(1.001**252 - 1.0, rel=1e-12)
    assert ann_return == pytest.approx(0.2864, abs=1e-3)
    assert ann_vol == pytest.approx(0.0, abs=1e-12)


def test_flat_wealth():
    assert annualize(np.ones(30)) == (0.0, 0.0)
    with pytest.raises(UndefinedMetricError):
        sharpe(np.ones(30))
    report = evaluate(np.ones(30))
    assert math.isnan(report.sharpe)
    assert math.isnan(report.calmar)
    assert report.mdd == 0.0
    assert report.rt == 0


def test_bankruptcy_is_total_loss():
    wealth = [1.0, 0.5, 0.0, 0.0, 0.0]
    assert annualize(wealth)[0] == -1.0
    np.testing.assert_allclose(daily_returns(wealth), [-0.5, -1.0])


def test_wealth_validation():
    with pytest.raises(InvalidStateError):
        annualize([1.0, np.nan])
    with pytest.raises(InvalidStateError):
        annualize([0.0, 1.0])
    with pytest.raises(InsufficientDataError):
        annualize([1.0])


def test_sharpe_uses_annualized_figures():
    rng = np.random.default_rng(4)
    wealth = np.cumprod(np.r_[1.0, 1.0 + rng.normal(0.0005, 0.01, 500)])
    ann_return, ann_vol = annualize(wealth)
    assert sharpe(wealth, r=0.02) == pytest.approx((ann_return - 0.02) / ann_vol)
    assert sharpe(wealth, r=ann_return) == pytest.approx(0.0, abs=1e-12)


def test_sortino_needs_downside():
    with pytest.raises(UndefinedMetricError):
        sortino(2.0 ** np.arange(10))
    wealth = np.cumprod([1.0, 1.02, 0.99, 1.03, 0.98, 1.01])
    assert sortino(wealth) > sharpe(wealth)


def test_drawdown_examples():
    assert max_drawdown(np.arange(1.0, 6.0)) == 0.0
    assert recovery_time(np.arange(1.0, 6.0)) == 0
    assert max_drawdown([1.0, 0.5, 0.75]) == pytest.approx(0.5)
    assert recovery_time([1.0, 0.5, 0.75]) is None
    assert recovery_time([1.0, 0.5, 1.0]) == 1


def test_recovery_from_earliest_deepest_trough():
    wealth = [1.0, 0.5, 1.0, 2.0, 1.0, 1.5, 1.8, 2.0]
    assert max_drawdown(wealth) == 0.5
    assert recovery_time(wealth) == 1


def test_calmar():
    wealth = [1.0, 0.5, 1.0, 1.2]
    assert calmar(wealth) == pytest.approx(annualize(wealth)[0] / 0.5)
    with pytest.raises(UndefinedMetricError):
        calmar(np.arange(1.0, 4.0))


def test_summary_substitutes_unrecovered_time():
    table = summarize_reports(
        {"ctrl": [_report(1.0, None), _report(2.0, 5)], "ew": [_report(0.5, 3)]}
    )
    assert list(table.columns) == ["strategy", "stat", *METRIC_COLUMNS]
    ctrl_mean = table[(table.strategy == "ctrl") & (table.stat == "mean")].iloc[0]
    assert ctrl_mean["rt"] == pytest.approx(5.0)
    assert ctrl_mean["sharpe"] == pytest.approx(1.5)
    ew_std = table[(table.strategy == "ew") & (table.stat == "std")].iloc[0]
    assert ew_std["sharpe"] == 0.0


def test_summary_substitutes_within_each_strategy():
    table = summarize_reports(
        {
            "ctrl": [_report(1.0, None), _report(2.0, 5)],
            "ew": [_report(0.5, 300)],
            "market": [_report(0.4, None), _report(0.6, 40)],
        }
    )
    means = table[table.stat == "mean"].set_index("strategy")["rt"]
    assert means["ctrl"] == pytest.approx(5.0)
    assert means["ew"] == pytest.approx(300.0)
    # the market index keeps its unrecovered path out of the average
    assert means["market"] == pytest.approx(40.0)


def test_summary_without_any_recovery():
    table = summarize_reports({"ctrl": [_report(1.0, None), _report(2.0, None)], "ew": [_report(0.5, 7)]})
    means = table[table.stat == "mean"].set_index("strategy")["rt"]
    assert np.isnan(means["ctrl"])
    assert means["ew"] == pytest.approx(7.0)


def test_summary_skips_undefined_ratios():
    table = summarize_reports({"a": [_report(float("nan")), _report(2.0)]})
    assert table.loc[table.stat == "mean", "sharpe"].iloc[0] == pytest.approx(2.0)
    with pytest.raises(InsufficientDataError):
        summarize_reports({})


def test_wilcoxon_identical_samples():
    a = np.linspace(0.0, 1.0, 12)
    assert wilcoxon_paired(a, a) == 0.5


def test_wilcoxon_clear_winner():
    rng = np.random.default_rng(0)
    b = rng.normal(size=100)
    assert wilcoxon_paired(b + 5.0 + rng.uniform(0, 0.1, 100), b) < 1e-6


def test_wilcoxon_is_antisymmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert wilcoxon_paired(a, b) + wilcoxon_paired(b, a) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InsufficientDataError):
        wilcoxon_paired(a[:5], b[:5])


def test_wilcoxon_matrix_layout():
    rng = np.random.default_rng(2)
    frame = pd.DataFrame(rng.normal(size=(12, 3)), columns=["ctrl", "ew", "mv"])
    frame.loc[3, "mv"] = np.nan
    out = wilcoxon_matrix(frame)
    assert list(out.index) == ["ctrl", "ew", "mv"]
    assert np.isnan(out.loc["ew", "ew"])
    assert out.loc["ctrl", "ew"] + out.loc["ew", "ctrl"] == pytest.approx(1.0)
