import json

import numpy as np
import pandas as pd
import pytest

from ctrlmv.core import oracles
from ctrlmv.core.ctrl_online import load_params
from ctrlmv.core.panel_store import generate_synthetic_panel, random_market, write_panel
from ctrlmv.models.market import MarketModel
from ctrlmv.services.experiments import (
    ExperimentConfig,
    backtest_config,
    backtest_panel,
    cmd_backtest,
    cmd_convergence,
    cmd_pretrain,
    cmd_regret,
    cmd_sensitivity,
    cmd_tradeoff,
    initial_params,
    simulation_model,
    staging_dir,
    train_config,
    variance_dominance,
)
from ctrlmv.utils.errors import ConfigError
from ctrlmv.utils.settings import get_settings_manager

TINY = {
    "simulation.dt": 0.1,
    "training.episodes": 30,
    "replications": 2,
    "burn_in": 5,
    "grid_points": 4,
    "grid_max": 10.0,
    "tradeoff_episodes": 40,
    "synthetic_assets": 4,
    "synthetic_years": 3,
    "window_months": 12,
    "subset_size": 3,
    "backtest.strategies": ["ew", "min_v", "ctrl"],
    "pretrain_iterations": 2,
    "lr_factors": [2.0],
    "gamma_factors": [],
    "phi3_factors": [],
}


def _config(command, tmp_path, settings=None, **overrides):
    get_settings_manager().apply_flat({**TINY, "out": str(tmp_path / "runs"), **(settings or {})})
    return ExperimentConfig.from_settings(command, **overrides)


def _manifest(target):
    return json.loads((target / "manifest.json").read_text(encoding="utf-8"))


class TestStagingDir:
    def test_success_renames_and_replaces(self, tmp_path):
        (tmp_path / "regret").mkdir()
        (tmp_path / "regret" / "old.csv").write_text("x", encoding="utf-8")
        with staging_dir(tmp_path, "regret") as stage:
            (stage / "new.csv").write_text("y", encoding="utf-8")
        assert sorted(p.name for p in (tmp_path / "regret").iterdir()) == ["new.csv"]
        assert [p.name for p in tmp_path.iterdir()] == ["regret"]

    def test_error_leaves_nothing_behind(self, tmp_path):
        with pytest.raises(RuntimeError):
            with staging_dir(tmp_path, "regret") as stage:
                (stage / "partial.csv").write_text("y", encoding="utf-8")
                raise RuntimeError("boom")
        assert list(tmp_path.iterdir()) == []


class TestExperimentConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"command": "plot"},
            {"command": "regret", "lr_scale": 0.0},
            {"command": "regret", "gamma_scale": -1.0},
            {"command": "regret", "episodes": 0},
            {"command": "regret", "workers": 0},
            {"command": "regret", "init": "random"},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kwargs)

    def test_from_settings_ignores_unset_flags(self, tmp_path):
        cfg = _config("regret", tmp_path, seed=7, episodes=None, panel=None)
        assert cfg.seed == 7
        assert cfg.episodes == 30
        assert cfg.panel is None
        assert cfg.out == tmp_path / "runs"
        assert cfg.section("simulation")["dt"] == 0.1
        data = cfg.to_dict()
        assert data["out"] == str(tmp_path / "runs")
        assert data["init_params"] is None

    def test_replications_get_distinct_seeds(self, tmp_path):
        cfg = _config("convergence", tmp_path)
        seeds = {train_config(cfg, i).seed for i in range(5)}
        assert len(seeds) == 5
        assert train_config(cfg, 3).seed == train_config(cfg, 3).seed


class TestInitialParams:
    def test_default(self, tmp_path):
        v, p = initial_params(_config("convergence", tmp_path), 2)
        assert (v.theta1, v.theta2, v.theta3) == (0.0, 0.0, 1.0)
        np.testing.assert_array_equal(p.phi1, [0.0, 0.0])
        np.testing.assert_array_equal(p.phi2, np.eye(2))
        assert p.w == 1.5

    def test_ones_and_scales(self, tmp_path):
        cfg = _config("convergence", tmp_path, init="ones", phi3_scale=2.0, gamma_scale=0.5)
        v, p = initial_params(cfg, 3)
        assert v.theta3 == p.phi3 == 2.0
        assert p.gamma == pytest.approx(0.05)
        np.testing.assert_array_equal(p.phi1, np.ones(3))

    def test_oracle(self, tmp_path, two_stock):
        cfg = _config("convergence", tmp_path, init="oracle")
        with pytest.raises(ConfigError):
            initial_params(cfg, 2)
        oracle = oracles.optimal_params(two_stock, 0.1, 1.4)
        _, p = initial_params(cfg, 2, oracle)
        np.testing.assert_allclose(p.phi1, oracle.phi1_star)
        assert p.w == oracle.w_star


def test_simulation_model_reads_settings(tmp_path, two_stock):
    model = simulation_model(_config("regret", tmp_path))
    assert isinstance(model, MarketModel)
    np.testing.assert_allclose(model.Sigma, two_stock.Sigma)
    assert model.r == 0.02


def test_convergence_outputs(tmp_path):
    target = cmd_convergence(_config("convergence", tmp_path, burn_in=5))
    assert target == tmp_path / "runs" / "convergence"
    curves = pd.read_csv(target / "convergence.csv")
    assert len(curves) == 30
    assert {"n", "mse_phi1_mean", "mse_phi1_p2.5", "mse_phi1_p97.5", "mse_w_mean"} <= set(curves)
    assert np.all(curves["mse_phi2_p2.5"] <= curves["mse_phi2_p97.5"])
    slopes = pd.read_csv(target / "slopes.csv")
    assert list(slopes["parameter"]) == ["phi1", "phi2", "w"]
    assert len(pd.read_csv(target / "iterates_run0.csv")) == 31
    manifest = _manifest(target)
    assert manifest["command"] == "convergence"
    assert set(manifest["results"]["slopes"]) == {"phi1", "phi2", "w"}
    assert len(manifest["content_hash"]) == 64


def test_convergence_is_reproducible(tmp_path):
    first = pd.read_csv(cmd_convergence(_config("convergence", tmp_path / "a")) / "convergence.csv")
    second = pd.read_csv(cmd_convergence(_config("convergence", tmp_path / "b")) / "convergence.csv")
    pd.testing.assert_frame_equal(first, second)


def test_regret_outputs(tmp_path):
    target = cmd_regret(_config("regret", tmp_path))
    frame = pd.read_csv(target / "regret.csv")
    assert len(frame) == 30
    assert np.all(np.isfinite(frame["regret_mean"]))
    assert np.all(frame["regret_p2.5"] <= frame["regret_p97.5"])
    summary = pd.read_csv(target / "slope.csv")
    assert summary["burn_in"].iloc[0] == 5
    assert summary["sr_star"].iloc[0] == pytest.approx(1.0807, abs=1e-4)


def test_tradeoff_outputs(tmp_path):
    target = cmd_tradeoff(_config("tradeoff", tmp_path))
    curve = pd.read_csv(target / "tradeoff.csv")
    np.testing.assert_allclose(curve["phi2_norm"], np.geomspace(0.01, 10.0, 4))
    assert np.all(curve["var_z1"] >= 0)
    assert np.all(curve["var_z1_se"] >= 0)
    assert "interior_minimum" in _manifest(target)["results"]


def test_variance_dominance_keeps_the_mean(two_stock):
    oracle = oracles.optimal_params(two_stock, 0.1, 1.4)
    frame = variance_dominance(two_stock, oracle, 1.0)
    np.testing.assert_allclose(frame["terminal_mean"], 1.4, rtol=1e-7)
    assert np.all(np.diff(frame["terminal_var"]) > 0)


def test_backtest_needs_a_panel(tmp_path):
    with pytest.raises(ConfigError):
        backtest_panel(_config("backtest", tmp_path))


def test_backtest_config_from_settings(tmp_path):
    bt = backtest_config(_config("backtest", tmp_path, lr_scale=2.0), strategies=("ew",))
    assert bt.window_months == 12
    assert bt.subset_size == 3
    assert bt.strategies == ("ew",)
    assert bt.lr_scale == 2.0
    assert bt.init is None


def test_synthetic_backtest_outputs(tmp_path):
    target = cmd_backtest(_config("backtest", tmp_path, synthetic=True))
    metrics = pd.read_csv(target / "metrics.csv")
    assert set(metrics["stat"]) >= {"mean"}
    assert set(metrics["strategy"]) == {"ew", "min_v", "ctrl"}
    sharpe = pd.read_csv(target / "sharpe.csv", index_col="replication")
    assert sharpe.shape == (2, 3)
    assert not (target / "wilcoxon.csv").exists()
    weights = pd.read_csv(target / "weights.csv")
    assert weights["ticker"].nunique() == 3
    assert len(_manifest(target)["results"]["tickers_run0"]) == 3


def test_panel_file_is_hashed_into_the_manifest(tmp_path):
    panel = generate_synthetic_panel(random_market(4, np.random.default_rng(2)), n_days=252 * 2)
    path = write_panel(panel, tmp_path / "panel.csv")
    cfg = _config("backtest", tmp_path, settings={"backtest.strategies": ["ew"]}, panel=path, replications=1)
    loaded, inputs = backtest_panel(cfg)
    assert inputs == [path]
    assert loaded.tickers == panel.tickers
    manifest = _manifest(cmd_backtest(cfg))
    assert manifest["inputs"] == [str(path)]


def test_sensitivity_rows(tmp_path):
    cfg = _config("sensitivity", tmp_path, synthetic=True, replications=1)
    frame = pd.read_csv(cmd_sensitivity(cfg) / "sensitivity.csv")
    assert list(frame["parameter"]) == ["baseline", "lr"]
    assert list(frame["factor"]) == [1.0, 2.0]
    assert "sharpe" in frame


def test_pretrain_saves_loadable_parameters(tmp_path):
    target = cmd_pretrain(_config("pretrain", tmp_path, episodes=3))
    v, p = load_params(target / "params.json")
    assert p.d == 2
    assert len(pd.read_csv(target / "pretrain.csv")) == 4
    assert _manifest(target)["results"]["w"] == pytest.approx(p.w)

    cfg = _config("convergence", tmp_path, init_params=target / "params.json")
    v2, p2 = initial_params(cfg, 2)
    np.testing.assert_array_equal(p2.phi1, p.phi1)
    assert v2.theta1 == v.theta1
