import numpy as np
import pandas as pd
import pytest

from ctrlmv.core.panel_store import (
    PanelSampler,
    generate_synthetic_panel,
    load_panel,
    month_boundaries,
    monthly_returns,
    random_market,
    write_panel,
)
from ctrlmv.models.market import MarketModel
from ctrlmv.utils.errors import InsufficientDataError, InvalidParameterError, PanelFormatError


@pytest.fixture
def market():
    return random_market(4, np.random.default_rng(21), r=0.01)


def _write(tmp_path, text):
    path = tmp_path / "panel.csv"
    path.write_text(text)
    return path


def test_minimal_panel(tmp_path):
    panel = load_panel(_write(tmp_path, "date,A,B\n2020-01-02,0.01,-0.02\n"))
    assert panel.tickers == ["A", "B"]
    assert panel.returns.shape == (1, 2)
    assert panel.factors is None
    assert panel.caps is None


def test_side_columns_are_split_out(tmp_path):
    text = (
        "date,A,B,MKT,SMB,HML,CAP_A,CAP_B\n"
        "2020-01-02,0.01,0.02,0.015,0.001,-0.002,10,20\n"
        "2020-01-03,0.00,0.01,0.005,0.000,0.001,10,20.2\n"
    )
    panel = load_panel(_write(tmp_path, text))
    assert panel.tickers == ["A", "B"]
    assert list(panel.factors.columns) == ["MKT", "SMB", "HML"]
    assert list(panel.caps.columns) == ["A", "B"]
    assert list(panel.ff_factors.columns) == ["MKT", "SMB", "HML"]
    assert panel.market.iloc[1] == pytest.approx(0.005)


@pytest.mark.parametrize(
    "text, row, column",
    [
        ("date,A\n2020-01-03,0.01\n2020-01-02,0.02\n", 3, "date"),
        ("date,A\n2020-01-02,0.01\n2020-01-03,\n", 3, "A"),
        ("date,A\n2020-01-02,abc\n", 2, "A"),
        ("date,A\n2020-01-02,0.01\n2020-01-03,-1.0\n", 3, "A"),
        ("date,A,MKT\n2020-01-02,0.01,-1.5\n", 2, "MKT"),
    ],
)
def test_malformed_rows_are_located(tmp_path, text, row, column):
    with pytest.raises(PanelFormatError) as excinfo:
        load_panel(_write(tmp_path, text))
    assert excinfo.value.row == row
    assert excinfo.value.column == column


def test_structural_errors(tmp_path):
    with pytest.raises(PanelFormatError):
        load_panel(_write(tmp_path, "day,A\n2020-01-02,0.01\n"))
    with pytest.raises(PanelFormatError):
        load_panel(_write(tmp_path, "date,MKT\n2020-01-02,0.01\n"))
    with pytest.raises(PanelFormatError):
        load_panel(tmp_path / "missing.csv")


def test_written_panel_reads_back_identically(tmp_path, market):
    panel = generate_synthetic_panel(market, n_days=60, seed=4)
    loaded = load_panel(write_panel(panel, tmp_path / "out" / "panel.csv"))
    pd.testing.assert_frame_equal(loaded.returns, panel.returns, check_exact=True, check_freq=False)
    pd.testing.assert_frame_equal(loaded.factors, panel.factors, check_exact=True, check_freq=False)
    pd.testing.assert_frame_equal(loaded.caps, panel.caps, check_exact=True, check_freq=False)


def test_month_boundaries_partition_the_index():
    dates = pd.bdate_range("2020-01-02", "2020-02-27")
    ranges = month_boundaries(dates)
    assert len(ranges) == 2
    assert ranges[0].start == 0 and ranges[-1].stop == len(dates)
    assert all(a.stop == b.start for a, b in zip(ranges, ranges[1:]))
    assert all(dates[i].month == 1 for i in ranges[0])
    assert len(month_boundaries(pd.bdate_range("2020-03-02", "2020-03-20"))) == 1
    with pytest.raises(InsufficientDataError):
        month_boundaries([])


def test_monthly_returns_compound():
    index = pd.DatetimeIndex(["2020-01-02", "2020-01-03", "2020-02-03"])
    frame = pd.DataFrame({"A": [0.1, -0.1, 0.05]}, index=index)
    out = monthly_returns(frame)
    assert out["A"].iloc[0] == pytest.approx(-0.01)
    assert out["A"].iloc[1] == pytest.approx(0.05)


def test_sampler_draws_contiguous_windows(market):
    panel = generate_synthetic_panel(market, n_days=40, seed=1)
    sampler = PanelSampler(panel)
    rng = np.random.default_rng(0)
    batch = sampler.draw(10, 1 / 252, rng, size=5)
    assert batch.shape == (5, 10, 4)
    logs = panel.log_returns()
    for window in batch:
        start = int(np.flatnonzero(np.all(logs == window[0], axis=1))[0])
        np.testing.assert_array_equal(window, logs[start : start + 10])
    assert sampler.draw(10, 1 / 252, rng).shape == (10, 4)
    assert sampler.r == 0.0
    with pytest.raises(InsufficientDataError):
        sampler.draw(41, 1 / 252, rng)


def test_random_market_ranges():
    model = random_market(6, np.random.default_rng(3))
    assert model.d == 6
    assert np.all((model.mu >= 0.05) & (model.mu <= 0.25))
    vols = np.sqrt(np.diag(model.Sigma))
    assert np.all((vols >= 0.15 - 1e-12) & (vols <= 0.45 + 1e-12))


def test_synthetic_panel_side_data(market):
    panel = generate_synthetic_panel(market, n_days=30, seed=2, tickers=["A", "B", "C", "D"])
    simple = panel.returns.to_numpy()
    np.testing.assert_allclose(panel.factors["MKT"], simple.mean(axis=1))
    np.testing.assert_allclose(panel.factors["SMB"], simple[:, :2].mean(axis=1) - simple[:, 2:].mean(axis=1))
    np.testing.assert_allclose(panel.factors["MKTRF"], panel.factors["MKT"] - 0.01 / 252)
    growth = panel.caps.to_numpy()[1:] / panel.caps.to_numpy()[:-1]
    np.testing.assert_allclose(growth, 1.0 + simple[1:])
    assert panel.dates[0] == pd.Timestamp("2000-01-03")


def test_synthetic_panel_regime_shift(market):
    base = generate_synthetic_panel(market, n_days=50, seed=9)
    shifted = generate_synthetic_panel(
        market, n_days=50, seed=9, shift_day=30, shifted_mu=market.mu - 0.2
    )
    pd.testing.assert_frame_equal(base.returns.iloc[:30], shifted.returns.iloc[:30])
    assert not np.allclose(base.returns.iloc[30:], shifted.returns.iloc[30:])


def test_synthetic_panel_validation():
    small = MarketModel.two_stock()
    with pytest.raises(InvalidParameterError):
        generate_synthetic_panel(small, n_days=10)
    with pytest.raises(InvalidParameterError):
        generate_synthetic_panel(random_market(4, np.random.default_rng(0)), n_days=10, tickers=["A"])
