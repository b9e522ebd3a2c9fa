import json
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import pytest

from ctrlmv.application import OUT_ENV, build_parser, main, resolve_config
from ctrlmv.utils.errors import ConfigError
from ctrlmv.utils.settings import get_settings_manager


class TestMain(unittest.TestCase):
    @pytest.fixture(autouse=True)
    def _tmp(self, tmp_path, monkeypatch):
        self.tmp_path = tmp_path
        self.monkeypatch = monkeypatch
        monkeypatch.delenv(OUT_ENV, raising=False)

    def test_recipe_receives_resolved_config(self):
        recipe = MagicMock(return_value=self.tmp_path / "regret")
        with patch.dict("ctrlmv.application.RECIPES", {"regret": recipe}):
            code = main(["ctrlmv", "regret", "--seed", "4", "--episodes", "12", "--out", str(self.tmp_path)])
        self.assertEqual(code, 0)
        cfg = recipe.call_args[0][0]
        self.assertEqual(cfg.command, "regret")
        self.assertEqual(cfg.seed, 4)
        self.assertEqual(cfg.episodes, 12)
        self.assertEqual(cfg.out, self.tmp_path)
        self.assertEqual(cfg.replications, 100)

    def test_library_errors_exit_with_one(self):
        recipe = MagicMock(side_effect=ConfigError("backtests need --panel PATH or --synthetic"))
        with patch.dict("ctrlmv.application.RECIPES", {"backtest": recipe}):
            self.assertEqual(main(["ctrlmv", "backtest"]), 1)

    def test_backtest_without_a_panel_fails(self):
        self.assertEqual(main(["ctrlmv", "backtest", "--out", str(self.tmp_path)]), 1)
        self.assertFalse((self.tmp_path / "backtest").exists())

    def test_environment_output_directory_wins(self):
        self.monkeypatch.setenv(OUT_ENV, str(self.tmp_path / "env"))
        args = build_parser().parse_args(["tradeoff", "--out", str(self.tmp_path / "flag")])
        self.assertEqual(resolve_config(args).out, self.tmp_path / "env")

    def test_config_file_and_schedule_flags(self):
        config = self.tmp_path / "run.json"
        config.write_text(json.dumps({"training": {"z": 1.2}, "seed": 11}), encoding="utf-8")
        args = build_parser().parse_args(
            ["convergence", "--config", str(config), "--alpha", "5", "--gamma-scale", "2"]
        )
        cfg = resolve_config(args)
        self.assertEqual(cfg.seed, 11)
        self.assertEqual(cfg.gamma_scale, 2.0)
        self.assertEqual(cfg.section("training")["z"], 1.2)
        self.assertEqual(cfg.section("training")["alpha"], 5.0)
        self.assertEqual(get_settings_manager().get("training", "beta"), 50.0)

    def test_unknown_config_key_exits_with_one(self):
        config = self.tmp_path / "run.json"
        config.write_text(json.dumps({"learning_rate": 3}), encoding="utf-8")
        self.assertEqual(main(["ctrlmv", "regret", "--config", str(config)]), 1)

    def test_invalid_flags_stop_the_parser(self):
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["regret", "--init", "random"])
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["plot"])

    def test_pretrain_end_to_end(self):
        code = main(["ctrlmv", "pretrain", "--episodes", "2", "--out", str(self.tmp_path)])
        self.assertEqual(code, 0)
        target = Path(self.tmp_path) / "pretrain"
        self.assertTrue((target / "params.json").exists())
        self.assertTrue((target / "manifest.json").exists())
