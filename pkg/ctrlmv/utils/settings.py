import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from ctrlmv.utils.errors import ConfigError
from ctrlmv.utils.logger import get_logger

logger = get_logger("Settings")


class SettingsManager:
    """Singleton holding experiment defaults and user overrides."""

    _instance: Optional["SettingsManager"] = None
    _initialized: bool = False

    DEFAULT_SETTINGS = {
        "simulation": {
            "mu": [0.2, 0.3],
            "vols": [0.3, 0.4],
            "corr": 0.1,
            "r": 0.02,
            "x0": 1.0,
            "T": 1.0,
            "dt": 0.004,
        },
        "training": {
            "z": 1.4,
            "gamma": 0.1,
            "episodes": 10000,
            "phi3": 1.0,
            "alpha": 20.0,
            "beta": 50.0,
            "c_theta1": 100.0,
            "c_theta2": 100.0,
            "b_scale": 100.0,
            "c1_scale": 10.0,
            "c2_scale": 10.0,
            "cw_scale": 10.0,
            "batch_size": 1,
            "multiplier_period": 1,
            "init": "default",
        },
        "online": {
            "rebalance_every": 21,
            "w_prev": 0.5,
            "w_curr": 1.0,
            "batch_size": 16,
            "multiplier_period": 10,
            "lr": 0.005,
            "lr_w": 0.05,
            "gamma": 0.1,
            "phi3": 1.0,
            "dt": 1.0 / 252.0,
            "z": 1.15,
            "pretrain_iterations": 20000,
            "risky_only": True,
        },
        "backtest": {
            "window_months": 120,
            "z": 1.15,
            "r": 0.0,
            "subset_size": 10,
            "test_start": None,
            "test_end": None,
            "strategies": [
                "ew", "mv", "min_v", "js", "lw", "bl", "ff", "rp", "drmv", "ctmv", "pmv",
                "market", "ctrl",
            ],
            "drmv_delta": None,
            "synthetic_assets": 30,
            "synthetic_years": 15,
            "synthetic_start": "2000-01-03",
            "shift_year": None,
            "shift_drift": -0.2,
        },
        "experiment": {
            "seed": 0,
            "replications": 100,
            "workers": 1,
            "out": "runs",
            "burn_in": 200,
            "grid_points": 9,
            "grid_min": 0.01,
            "grid_max": 100.0,
            "tradeoff_episodes": 2000,
            "lr_scale": 1.0,
            "gamma_scale": 1.0,
            "phi3_scale": 1.0,
            "lr_factors": [0.2, 0.5, 2.0, 5.0],
            "gamma_factors": [0.2, 0.5, 2.0, 5.0],
            "phi3_factors": [2.0, 5.0, 8.0],
        },
    }

    def __new__(cls) -> "SettingsManager":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self._settings: Dict[str, Dict[str, Any]] = {}
        self._config_dir = self._get_config_dir()
        self._config_file = self._config_dir / "settings.json"

        try:
            self._config_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.warning(f"Cannot create config directory {self._config_dir}: {e}")

        self.load()

        self._initialized = True
        logger.debug(f"Settings manager initialized with config at {self._config_file}")

    def _get_config_dir(self) -> Path:
        """Get the configuration directory path, respecting XDG_CONFIG_HOME."""
        xdg_config_home = os.environ.get("XDG_CONFIG_HOME")
        if xdg_config_home:
            config_base = Path(xdg_config_home)
        else:
            config_base = Path.home() / ".config"

        return config_base / "ctrlmv"

    @property
    def config_file(self) -> Path:
        return self._config_file

    def load(self) -> None:
        """Load user settings from the configuration file (defaults when absent)."""
        try:
            if self._config_file.exists():
                with open(self._config_file, "r", encoding="utf-8") as f:
                    loaded_settings = json.load(f)

                self._settings = self._merge_settings(
                    copy.deepcopy(self.DEFAULT_SETTINGS), loaded_settings
                )
                logger.debug("Settings loaded successfully")
            else:
                self._settings = copy.deepcopy(self.DEFAULT_SETTINGS)
                logger.debug("Using default settings (no config file found)")
        except json.JSONDecodeError as e:
            logger.error(f"Failed to parse settings file: {e}")
            self._settings = copy.deepcopy(self.DEFAULT_SETTINGS)
            logger.warning("Using default settings due to parse error")
        except Exception as e:
            logger.error(f"Error loading settings: {e}")
            self._settings = copy.deepcopy(self.DEFAULT_SETTINGS)
            logger.warning("Using default settings due to error")

    def _merge_settings(self, defaults: Dict, loaded: Dict) -> Dict:
        """Recursively merge loaded settings with defaults."""
        result = defaults.copy()

        for key, value in loaded.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._merge_settings(result[key], value)
            else:
                result[key] = value

        return result

    def save(self) -> bool:
        try:
            self._config_dir.mkdir(parents=True, exist_ok=True)
            with open(self._config_file, "w", encoding="utf-8") as f:
                json.dump(self._settings, f, indent=2, ensure_ascii=False)
            logger.info(f"Settings saved to {self._config_file}")
            return True
        except Exception as e:
            logger.error(f"Failed to save settings: {e}")
            return False

    def get(self, category: str, key: str, default: Any = None) -> Any:
        """
        Get a setting value.

        Args:
            category: The settings category (e.g., 'simulation', 'training', 'backtest')
            key: The setting key
            default: Default value if setting doesn't exist

        Returns:
            The setting value or default
        """
        return self._settings.get(category, {}).get(key, default)

    def set(self, category: str, key: str, value: Any, save_immediately: bool = True) -> bool:
        """
        Set a setting value.

        Args:
            category: The settings category
            key: The setting key
            value: The new value
            save_immediately: Whether to persist to the user settings file

        Returns:
            True if successful, False otherwise
        """
        self._settings.setdefault(category, {})[key] = value
        logger.debug(f"Setting {category}.{key} = {value}")
        if save_immediately:
            return self.save()
        return True

    def apply_flat(self, overrides: Mapping[str, Any]) -> None:
        """
        Apply run overrides without persisting them.

        Plain keys update every category that defines the key; ``category.key``
        targets a single category.

        Raises:
            ConfigError: if a key matches no known setting
        """
        for name, value in overrides.items():
            if "." in name:
                category, key = name.split(".", 1)
                if key not in self._settings.get(category, {}):
                    raise ConfigError(f"Unknown setting {name!r}")
                self.set(category, key, value, save_immediately=False)
                continue
            targets = [c for c, values in self._settings.items() if name in values]
            if not targets:
                raise ConfigError(f"Unknown setting {name!r}")
            for category in targets:
                self.set(category, name, value, save_immediately=False)

    def get_all(self, category: Optional[str] = None) -> Dict[str, Any]:
        if category:
            return copy.deepcopy(self._settings.get(category, {}))
        return copy.deepcopy(self._settings)

    def reset(self, category: Optional[str] = None, key: Optional[str] = None) -> bool:
        """
        Reset settings to defaults (in memory; call save() to persist).

        Args:
            category: Optional category to reset (None = reset all)
            key: Optional specific key to reset

        Returns:
            True if something was reset
        """
        if category and key:
            if category in self.DEFAULT_SETTINGS and key in self.DEFAULT_SETTINGS[category]:
                default_value = copy.deepcopy(self.DEFAULT_SETTINGS[category][key])
                self.set(category, key, default_value, save_immediately=False)
                return True
            return False
        if category:
            if category in self.DEFAULT_SETTINGS:
                self._settings[category] = copy.deepcopy(self.DEFAULT_SETTINGS[category])
                return True
            return False
        self._settings = copy.deepcopy(self.DEFAULT_SETTINGS)
        return True

    def export_settings(self, file_path: str) -> bool:
        try:
            export_path = Path(file_path).expanduser()
            with open(export_path, "w", encoding="utf-8") as f:
                json.dump(self._settings, f, indent=2, ensure_ascii=False)
            logger.info(f"Settings exported to {export_path}")
            return True
        except Exception as e:
            logger.error(f"Error exporting settings: {e}")
            return False

    def import_settings(self, file_path: str) -> None:
        """
        Apply a run configuration file.

        Nested files (category -> key -> value) are merged like the user settings;
        flat files go through apply_flat.

        Raises:
            ConfigError: unreadable file or unknown keys
        """
        import_path = Path(file_path).expanduser()
        try:
            with open(import_path, "r", encoding="utf-8") as f:
                imported = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {import_path}: {e}") from e
        if not isinstance(imported, dict):
            raise ConfigError(f"Config file {import_path} must hold a JSON object")

        nested = {k: v for k, v in imported.items() if isinstance(v, dict) and k in self._settings}
        flat = {k: v for k, v in imported.items() if k not in nested}
        self._settings = self._merge_settings(self._settings, nested)
        self.apply_flat(flat)
        logger.info(f"Config imported from {import_path}")


def get_settings_manager() -> SettingsManager:
    """Get the SettingsManager singleton instance."""
    return SettingsManager()
