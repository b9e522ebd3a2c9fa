import numpy as np
import pytest

from ctrlmv.models.market import MarketModel
from ctrlmv.utils.settings import SettingsManager


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Fresh settings singleton backed by a throwaway config directory."""
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "config"))
    SettingsManager._instance = None
    SettingsManager._initialized = False
    yield
    SettingsManager._instance = None
    SettingsManager._initialized = False


@pytest.fixture
def two_stock():
    return MarketModel.two_stock()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
