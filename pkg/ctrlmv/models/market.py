"""Market, simulation and return-data containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from ctrlmv.utils.errors import (
    DimensionMismatchError,
    InvalidParameterError,
    InvalidStateError,
)
from ctrlmv.utils.numeric import check_spd, symmetrize


class ReturnSource(Protocol):
    """Anything that can produce per-step asset log-returns for training episodes."""

    r: float

    @property
    def d(self) -> int: ...

    def draw(
        self, n_steps: int, dt: float, rng: np.random.Generator, size: Optional[int] = None
    ) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class MarketModel:
    """d-asset Black-Scholes market with annualized drift ``mu`` and loadings ``sigma``."""

    mu: np.ndarray
    sigma: np.ndarray
    r: float = 0.0
    Sigma: np.ndarray = field(init=False, repr=False)
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if mu.ndim != 1:
            raise DimensionMismatchError(f"mu must be a vector, got shape {mu.shape}")
        if sigma.shape[0] != mu.shape[0]:
            raise DimensionMismatchError(
                f"sigma has {sigma.shape[0]} rows but mu has {mu.shape[0]} assets"
            )
        if sigma.shape[1] < sigma.shape[0]:
            raise InvalidParameterError("sigma needs at least as many drivers as assets")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and np.isfinite(self.r)):
            raise InvalidParameterError("market parameters must be finite")
        Sigma = check_spd(symmetrize(sigma @ sigma.T), "Sigma")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "chol", np.linalg.cholesky(Sigma))

    @classmethod
    def from_vols(
        cls, mu: Sequence[float], vols: Sequence[float], corr, r: float = 0.0
    ) -> "MarketModel":
        """Build from volatilities and a correlation (scalar for a common value, or a matrix)."""
        vols = np.asarray(vols, dtype=float)
        d = vols.shape[0]
        if np.isscalar(corr):
            corr_m = np.full((d, d), float(corr))
            np.fill_diagonal(corr_m, 1.0)
        else:
            corr_m = np.asarray(corr, dtype=float)
        Sigma = check_spd(symmetrize(np.outer(vols, vols) * corr_m), "covariance")
        return cls(mu=np.asarray(mu, dtype=float), sigma=np.linalg.cholesky(Sigma), r=r)

    @classmethod
    def two_stock(cls) -> "MarketModel":
        """Two-stock market of the simulation study."""
        return cls.from_vols(mu=[0.2, 0.3], vols=[0.3, 0.4], corr=0.1, r=0.02)

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def m(self) -> int:
        return self.sigma.shape[1]

    @property
    def excess(self) -> np.ndarray:
        return self.mu - self.r

    def draw(
        self, n_steps: int, dt: float, rng: np.random.Generator, size: Optional[int] = None
    ) -> np.ndarray:
        """Exact log-normal per-step log-returns, shape ``(size, n_steps, d)`` or ``(n_steps, d)``."""
        shape = (n_steps, self.d) if size is None else (size, n_steps, self.d)
        shocks = rng.standard_normal(shape)
        drift = (self.mu - 0.5 * np.diag(self.Sigma)) * dt
        return drift + np.sqrt(dt) * shocks @ self.chol.T


@dataclass(frozen=True)
class SimConfig:
    x0: float = 1.0
    T: float = 1.0
    dt: float = 0.004
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.dt <= self.T):
            raise InvalidParameterError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        if self.x0 <= 0:
            raise InvalidParameterError(f"x0 must be positive, got {self.x0}")

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.T / self.dt + 1e-9))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass
class Trajectory:
    """One episode: ``wealth`` has one more entry than ``actions``."""

    times: np.ndarray
    wealth: np.ndarray
    actions: np.ndarray
    log_returns: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.wealth = np.asarray(self.wealth, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.actions.ndim == 1:
            self.actions = self.actions.reshape(-1, 1)
        if self.wealth.shape[0] != self.times.shape[0]:
            raise DimensionMismatchError("times and wealth lengths differ")
        if self.wealth.shape[0] != self.actions.shape[0] + 1:
            raise DimensionMismatchError("wealth must have one more entry than actions")

    @property
    def terminal(self) -> float:
        return float(self.wealth[-1])

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def absorbed_at(self) -> Optional[int]:
        """Index of the first non-positive wealth, or None."""
        hits = np.flatnonzero(self.wealth <= 0)
        return int(hits[0]) if hits.size else None


FACTOR_COLUMNS = ("MKT", "SMB", "HML", "MKTRF")
CAP_PREFIX = "CAP_"


@dataclass
class ReturnPanel:
    """Dated simple returns of traded assets with optional market, factor and cap columns."""

    returns: pd.DataFrame
    factors: Optional[pd.DataFrame] = None
    caps: Optional[pd.DataFrame] = None

    def __post_init__(self):
        if not isinstance(self.returns.index, pd.DatetimeIndex):
            raise InvalidStateError("panel index must be a DatetimeIndex")
        self.returns.index.name = "date"

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.returns.index

    @property
    def tickers(self) -> list[str]:
        return [str(c) for c in self.returns.columns]

    @property
    def d(self) -> int:
        return self.returns.shape[1]

    @property
    def market(self) -> Optional[pd.Series]:
        if self.factors is None or "MKT" not in self.factors:
            return None
        return self.factors["MKT"]

    @property
    def ff_factors(self) -> Optional[pd.DataFrame]:
        """Three-factor frame (market excess when available, SMB, HML)."""
        if self.factors is None:
            return None
        first = "MKTRF" if "MKTRF" in self.factors else "MKT"
        needed = [first, "SMB", "HML"]
        if not all(c in self.factors for c in needed):
            return None
        return self.factors[needed]

    def subset(self, tickers: Sequence[str]) -> "ReturnPanel":
        tickers = list(tickers)
        missing = [t for t in tickers if t not in self.returns.columns]
        if missing:
            raise InvalidParameterError(f"unknown tickers {missing}")
        caps = None if self.caps is None else self.caps[tickers]
        return ReturnPanel(returns=self.returns[tickers], factors=self.factors, caps=caps)

    def log_returns(self) -> np.ndarray:
        return np.log1p(self.returns.to_numpy(dtype=float))


@dataclass
class PathBatch:
    """Many episodes on a common time grid: wealth ``(P, K+1)``, actions ``(P, K, d)``."""

    times: np.ndarray
    wealth: np.ndarray
    actions: np.ndarray
    log_returns: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.wealth.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.wealth[:, -1]

    def active(self) -> np.ndarray:
        """Steps taken before absorption, shape ``(P, K)``."""
        return self.wealth[:, :-1] > 0

    def path(self, i: int) -> Trajectory:
        return Trajectory(
            times=self.times,
            wealth=self.wealth[i],
            actions=self.actions[i],
            log_returns=self.log_returns[i],
        )
