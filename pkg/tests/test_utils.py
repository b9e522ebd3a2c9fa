import json
import logging

import numpy as np
import pytest

from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import (
    CtrlMVError,
    DegeneracyError,
    InvalidParameterError,
    NumericalOverflowError,
    PanelFormatError,
)
from ctrlmv.utils.logger import get_logger, set_console_level
from ctrlmv.utils.manifest import content_hash, write_manifest
from ctrlmv.utils.numeric import (
    check_spd,
    expm1_ratio,
    expm1_ratio2,
    solve_spd,
    spd_inverse,
    spd_logdet,
)


class TestStreams:
    def test_same_keys_same_draws(self):
        a = rngs.stream(3, rngs.EPISODE, 7).standard_normal(5)
        b = rngs.stream(3, rngs.EPISODE, 7).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        base = rngs.stream(3, rngs.EPISODE, 7).standard_normal(5)
        for other in (rngs.stream(3, rngs.EPISODE, 8), rngs.stream(3, rngs.SUBSET, 7), rngs.stream(4, rngs.EPISODE, 7)):
            assert not np.allclose(base, other.standard_normal(5))

    def test_negative_keys_rejected(self):
        with pytest.raises(ValueError):
            rngs.stream(-1)

    def test_spawned_seeds(self):
        seed = rngs.spawn_seed(rngs.stream(0, rngs.PRETRAIN, 1))
        assert 0 <= seed < 2**63 - 1
        assert seed == rngs.spawn_seed(rngs.stream(0, rngs.PRETRAIN, 1))


class TestSeries:
    @pytest.mark.parametrize("t", [0.5, 1.0, 3.0])
    def test_continuous_across_the_threshold(self, t):
        below, above = 0.99e-8, 1.01e-8
        assert expm1_ratio(below, t) == pytest.approx(expm1_ratio(above, t), rel=1e-7)
        assert expm1_ratio2(below, t) == pytest.approx(expm1_ratio2(above, t), rel=1e-6)
        assert expm1_ratio(0.0, t) == t
        assert expm1_ratio2(0.0, t) == pytest.approx(t**2 / 2)

    def test_matches_the_closed_form(self):
        q = np.array([-2.0, -0.3, 0.4, 1.5])
        np.testing.assert_allclose(expm1_ratio(q, 1.0), np.expm1(q) / q, rtol=1e-14)
        np.testing.assert_allclose(expm1_ratio2(q, 2.0), (np.expm1(2 * q) - 2 * q) / q**2, rtol=1e-12)


class TestMatrices:
    def test_check_spd(self):
        a = check_spd([[2.0, 0.5], [0.5, 1.0]])
        assert a.shape == (2, 2)
        for bad in ([[1.0, 2.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]], [[1.0, np.nan], [np.nan, 1.0]]):
            with pytest.raises(InvalidParameterError):
                check_spd(bad)

    def test_inverse_and_logdet(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(spd_inverse(a) @ a, np.eye(2), atol=1e-12)
        assert spd_logdet(a) == pytest.approx(np.log(1.75))
        np.testing.assert_allclose(solve_spd(a, [1.0, 1.0]), np.linalg.solve(a, [1.0, 1.0]))

    def test_singular(self):
        singular = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(DegeneracyError):
            spd_inverse(singular)
        with pytest.raises(DegeneracyError):
            solve_spd(singular, [1.0, 0.0])
        with pytest.raises(DegeneracyError):
            spd_inverse(np.diag([1.0, 1e-14]))


def test_errors_carry_context():
    err = PanelFormatError("not a number", row=4, column="AAPL")
    assert str(err) == "not a number (row 4, column 'AAPL')"
    assert (err.row, err.column) == (4, "AAPL")
    assert str(PanelFormatError("empty file")) == "empty file"
    assert isinstance(err, CtrlMVError) and isinstance(err, ValueError)
    assert NumericalOverflowError("wealth overflow", iteration=12).iteration == 12


def test_manifest(tmp_path):
    data = tmp_path / "panel.csv"
    data.write_text("date,A\n2020-01-02,0.01\n", encoding="utf-8")
    config = {"seed": 1, "scale": np.float64(0.5)}
    path = write_manifest(tmp_path, "backtest", config, inputs=[data], results={"w": np.float64(1.7)})
    manifest = json.loads(path.read_text(encoding="utf-8"))
    assert manifest["command"] == "backtest"
    assert manifest["config"]["scale"] == 0.5
    assert manifest["results"]["w"] == 1.7
    assert manifest["content_hash"] == content_hash(config, [data])

    data.write_text("date,A\n2020-01-02,0.02\n", encoding="utf-8")
    assert content_hash(config, [data]) != manifest["content_hash"]
    assert content_hash({"seed": 2, "scale": 0.5}) != content_hash({"seed": 1, "scale": 0.5})


def test_logger_levels(monkeypatch):
    monkeypatch.setenv("CTRL_MV_LOG_LEVEL", "INFO")
    logger = get_logger("UtilsTest")
    assert logger is get_logger("UtilsTest")
    assert logger.name == "ctrlmv.UtilsTest"
    assert not logger.propagate
    set_console_level("WARNING")
    console = [h for h in logger.handlers if getattr(h, "_ctrlmv_console", False)]
    assert console and console[0].level == logging.WARNING
    set_console_level(logging.INFO)
    assert console[0].level == logging.INFO
