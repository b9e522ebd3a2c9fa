"""Baseline episodic actor-critic trainer with expanding projection sets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.optimize

from ctrlmv.core.actor_critic import td_terms
from ctrlmv.core.market_sim import simulate_linear_feedback
from ctrlmv.models.market import PathBatch, ReturnSource, SimConfig, Trajectory
from ctrlmv.models.params import PolicyParams, ValueParams
from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import (
    DimensionMismatchError,
    InvalidParameterError,
    InvalidScheduleError,
    InvalidStateError,
    NumericalOverflowError,
)
from ctrlmv.utils.logger import get_logger
from ctrlmv.utils.numeric import symmetrize

if TYPE_CHECKING:
    from ctrlmv.core.oracles import OracleSet

logger = get_logger("CtrlTrain")


def _loglog_power(n: int, power: float) -> float:
    """1 v (log log n)^power, equal to 1 while log log n <= 1."""
    if n <= math.e:
        return 1.0
    loglog = math.log(math.log(n))
    return max(1.0, loglog**power) if loglog > 0 else 1.0


@dataclass(frozen=True)
class Schedule:
    """Learning rates a_n = alpha/(n+beta) and expanding projection radii.

    The ``*_scale`` constants multiply the radii b_n, c_{1,n}, c_{2,n}, c_{w,n};
    ``lr_scale`` multiplies both learning rates.
    """

    alpha: float = 1.0
    beta: float = 1.0
    c_theta1: float = 100.0
    c_theta2: float = 100.0
    b_scale: float = 1.0
    c1_scale: float = 1.0
    c2_scale: float = 1.0
    cw_scale: float = 1.0
    lr_scale: float = 1.0

    def __post_init__(self):
        for name in ("c_theta1", "c_theta2", "b_scale", "c1_scale", "c2_scale", "cw_scale"):
            if not getattr(self, name) > 0:
                raise InvalidScheduleError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr_scale < 0:
            raise InvalidScheduleError(f"lr_scale must be non-negative, got {self.lr_scale}")
        if self.beta < 0 or self.alpha < 0:
            raise InvalidScheduleError("alpha and beta must be non-negative")

    def a(self, n: int) -> float:
        return self.lr_scale * self.alpha / (n + self.beta)

    def a_w(self, n: int) -> float:
        return self.lr_scale * self.alpha / (n + self.beta)

    def b(self, n: int) -> float:
        return self.b_scale * _loglog_power(n, 1 / 8)

    def floor(self, n: int) -> float:
        """Eigenvalue floor 1/b_n of the phi2 projection set."""
        return 1.0 / self.b(n)

    def c1(self, n: int) -> float:
        return self.c1_scale * _loglog_power(n, 1 / 8)

    def c2(self, n: int) -> float:
        return self.c2_scale * _loglog_power(n, 1 / 8)

    def cw(self, n: int) -> float:
        return self.cw_scale * _loglog_power(n, 1 / 16)

    @property
    def theta_caps(self) -> Tuple[float, float]:
        return (self.c_theta1, self.c_theta2)

    def satisfies_theorem(self) -> bool:
        return self.alpha > 0 and self.beta > 0 and self.lr_scale > 0


@dataclass(frozen=True)
class ConstantSchedule(Schedule):
    """Constant learning rates, ``lr`` for critic and actor and ``lr_w`` for the multiplier."""

    lr: float = 0.005
    lr_w: float = 0.05
    b_scale: float = 100.0
    c1_scale: float = 100.0
    c2_scale: float = 100.0
    cw_scale: float = 100.0

    def a(self, n: int) -> float:
        return self.lr_scale * self.lr

    def a_w(self, n: int) -> float:
        return self.lr_scale * self.lr_w

    def satisfies_theorem(self) -> bool:
        return False


@dataclass(frozen=True)
class TrainConfig:
    z: float = 1.4
    gamma: float = 0.1
    episodes: int = 1000
    dt: float = 0.004
    multiplier_update_period: int = 1
    batch_size: int = 1
    x0: float = 1.0
    T: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise InvalidParameterError(f"episodes must be >= 1, got {self.episodes}")
        if self.multiplier_update_period < 1:
            raise InvalidParameterError("multiplier_update_period must be >= 1")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.gamma < 0:
            raise InvalidParameterError("gamma must be non-negative")

    @property
    def sim_config(self) -> SimConfig:
        return SimConfig(x0=self.x0, T=self.T, dt=self.dt, seed=self.seed)


def project_box(v, radius: float):
    """Euclidean projection onto the ball of the given radius."""
    if not radius > 0:
        raise InvalidScheduleError(f"projection radius must be positive, got {radius}")
    arr = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm > radius:
        arr = arr * (radius / norm)
    return arr.item() if arr.ndim == 0 else arr


def clip_box(theta: np.ndarray, caps: Sequence[float]) -> np.ndarray:
    """Componentwise projection of (theta1, theta2) onto [-c1, c1] x [-c2, c2]."""
    caps = np.asarray(caps, dtype=float)
    return np.clip(np.asarray(theta, dtype=float), -caps, caps)


def project_psd_band(a: np.ndarray, floor: float, cap: float) -> np.ndarray:
    """Project onto {S symmetric : eigenvalues >= floor, Frobenius norm <= cap}.

    Eigenvalues are clamped at ``floor``; when the norm still exceeds ``cap`` they are
    shrunk toward the floor by the scalar s in [0, 1] that puts the norm on the cap.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = a.shape[0]
    if cap < floor * math.sqrt(d):
        raise InvalidScheduleError(
            f"empty projection set: cap {cap} < floor {floor} * sqrt({d})"
        )
    if not np.all(np.isfinite(a)):
        raise InvalidStateError("cannot project a non-finite matrix")
    eigvals, eigvecs = scipy.linalg.eigh(symmetrize(a))
    eigvals = np.maximum(eigvals, floor)
    if np.linalg.norm(eigvals) > cap:
        excess = eigvals - floor

        def overshoot(s: float) -> float:
            return float(np.linalg.norm(floor + s * excess)) - cap

        if overshoot(0.0) >= 0:
            s = 0.0
        else:
            s = scipy.optimize.bisect(overshoot, 0.0, 1.0, xtol=1e-15, maxiter=200)
        eigvals = floor + s * excess
    return symmetrize((eigvecs * eigvals) @ eigvecs.T)


def episode_increments(
    traj: Trajectory, v: ValueParams, p: PolicyParams, dt: float, z: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Discrete update sums of one episode: (g_theta, Z1, Z2, x(T) - z).

    Left-endpoint sums over the episode grid; steps after absorption contribute nothing.
    """
    if traj.actions.shape[1] != p.d:
        raise DimensionMismatchError(
            f"trajectory has {traj.actions.shape[1]} assets, policy has {p.d}"
        )
    t, x = traj.times, traj.wealth
    g_theta, g_phi1, g_phi2 = td_terms(t[:-1], x[:-1], traj.actions, t[1:], x[1:], v, p, dt)
    active = x[:-1] > 0
    return (
        g_theta[active].sum(axis=0),
        g_phi1[active].sum(axis=0),
        g_phi2[active].sum(axis=0),
        float(x[-1] - z),
    )


def batch_increments(
    batch: PathBatch, v: ValueParams, p: PolicyParams, dt: float, z: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-path episode increments of a PathBatch, shapes (P,2), (P,d), (P,d,d), (P,)."""
    t, x = batch.times, batch.wealth
    g_theta, g_phi1, g_phi2 = td_terms(
        t[:-1], x[:, :-1], batch.actions, t[1:], x[:, 1:], v, p, dt
    )
    mask = batch.active().astype(float)
    return (
        np.einsum("pk,pki->pi", mask, g_theta),
        np.einsum("pk,pki->pi", mask, g_phi1),
        np.einsum("pk,pkij->pij", mask, g_phi2),
        batch.terminal - z,
    )


@dataclass
class TrainHistory:
    """Parameter iterates (row 0 holds the initial values) and per-iteration terminal wealth."""

    theta: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    w: np.ndarray
    terminal_wealth: np.ndarray
    value_params: ValueParams
    policy_params: PolicyParams

    @property
    def n_iterations(self) -> int:
        return self.terminal_wealth.shape[0]

    def squared_errors(self, oracle: "OracleSet") -> dict:
        return {
            "mse_phi1": np.sum((self.phi1 - oracle.phi1_star) ** 2, axis=1),
            "mse_phi2": np.sum((self.phi2 - oracle.phi2_star) ** 2, axis=(1, 2)),
            "mse_w": (self.w - oracle.w_star) ** 2,
        }

    def to_frame(self, oracle: Optional["OracleSet"] = None) -> pd.DataFrame:
        d = self.phi1.shape[1]
        data = {
            "n": np.arange(self.theta.shape[0]),
            "theta1": self.theta[:, 0],
            "theta2": self.theta[:, 1],
        }
        for i in range(d):
            data[f"phi1_{i + 1}"] = self.phi1[:, i]
        for i in range(d):
            for j in range(d):
                data[f"phi2_{i + 1}{j + 1}"] = self.phi2[:, i, j]
        data["w"] = self.w
        if oracle is not None:
            data.update(self.squared_errors(oracle))
        else:
            for name in ("mse_phi1", "mse_phi2", "mse_w"):
                data[name] = np.nan
        return pd.DataFrame(data)

    def write_csv(self, path: Path, oracle: Optional["OracleSet"] = None) -> Path:
        path = Path(path)
        self.to_frame(oracle).to_csv(path, index=False)
        return path


def train_baseline(
    source: ReturnSource,
    cfg: TrainConfig,
    sched: Schedule,
    init: Tuple[ValueParams, PolicyParams],
) -> TrainHistory:
    """Run the baseline actor-critic recursion for ``cfg.episodes`` iterations.

    Each iteration simulates ``cfg.batch_size`` episodes under the current policy,
    averages their increments and applies the projected updates; the multiplier moves
    every ``cfg.multiplier_update_period`` iterations by the mean terminal gap.

    Raises:
        NumericalOverflowError: an iterate became non-finite
    """
    v, p = init
    p = p.replace(gamma=cfg.gamma, T=cfg.T)
    if not sched.satisfies_theorem():
        logger.warning(f"{type(sched).__name__} does not meet the convergence theorem conditions")
    sim = cfg.sim_config
    n_iter = cfg.episodes

    theta_hist = np.empty((n_iter + 1, 2))
    phi1_hist = np.empty((n_iter + 1, p.d))
    phi2_hist = np.empty((n_iter + 1, p.d, p.d))
    w_hist = np.empty(n_iter + 1)
    terminal = np.empty(n_iter)
    theta_hist[0], phi1_hist[0], phi2_hist[0], w_hist[0] = v.theta, p.phi1, p.phi2, p.w

    theta, phi1, phi2, w = v.theta, p.phi1, p.phi2, p.w
    gaps: list[float] = []
    for n in range(1, n_iter + 1):
        rng = rngs.stream(cfg.seed, rngs.EPISODE, n)
        try:
            batch = simulate_linear_feedback(source, sim, p, rng, cfg.batch_size)
        except InvalidStateError as e:
            raise NumericalOverflowError(f"wealth overflow at iteration {n}: {e}", iteration=n) from e
        g_theta, z1, z2, gap = batch_increments(batch, v, p, cfg.dt, cfg.z)

        a_n = sched.a(n)
        raw = (
            theta + a_n * g_theta.mean(axis=0),
            phi1 - a_n * z1.mean(axis=0),
            phi2 + a_n * z2.mean(axis=0),
        )
        if not all(np.all(np.isfinite(r)) for r in raw):
            raise NumericalOverflowError(f"non-finite iterate at iteration {n}", iteration=n)
        theta = clip_box(raw[0], sched.theta_caps)
        phi1 = project_box(raw[1], sched.c1(n))
        phi2 = project_psd_band(raw[2], sched.floor(n), sched.c2(n))
        gaps.append(float(gap.mean()))
        if n % cfg.multiplier_update_period == 0:
            w = project_box(w - sched.a_w(n) * float(np.mean(gaps)), sched.cw(n))
            gaps.clear()

        v = v.with_theta(theta)
        p = p.replace(phi1=phi1, phi2=phi2, w=w)
        theta_hist[n], phi1_hist[n], phi2_hist[n], w_hist[n] = theta, phi1, phi2, w
        terminal[n - 1] = float(batch.terminal.mean())

        if n % 1000 == 0:
            logger.debug(f"iteration {n}: phi1={np.round(phi1, 4)}, w={w:.4f}")

    return TrainHistory(
        theta=theta_hist,
        phi1=phi1_hist,
        phi2=phi2_hist,
        w=w_hist,
        terminal_wealth=terminal,
        value_params=v,
        policy_params=p,
    )
