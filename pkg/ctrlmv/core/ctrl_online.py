"""Online actor-critic learner.

Per-step updates from counterfactual mini-batches, deterministic (greedy) execution
with optional risky-only normalization and a rebalancing period, and the pre-training
phase that seeds the learner from historical or simulated episodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from ctrlmv.core.actor_critic import execute_deterministic, sample_action, td_terms
from ctrlmv.core.ctrl_train import (
    ConstantSchedule,
    Schedule,
    TrainConfig,
    TrainHistory,
    clip_box,
    project_box,
    project_psd_band,
    train_baseline,
)
from ctrlmv.core.market_sim import step_wealth
from ctrlmv.core.panel_store import PanelSampler
from ctrlmv.models.market import ReturnPanel, ReturnSource, Trajectory
from ctrlmv.models.params import PolicyParams, ValueParams
from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import (
    DegenerateActionError,
    DimensionMismatchError,
    InvalidParameterError,
    NumericalOverflowError,
)
from ctrlmv.utils.logger import get_logger

logger = get_logger("CtrlOnline")

Gradients = Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class OnlineConfig:
    """Knobs of the online learner.

    ``w_prev``/``w_curr`` weight the previous and current step gradients; the default
    (0.5, 1.0) corresponds to a decay of 0.5.
    """

    rebalance_every: int = 1
    w_prev: float = 0.5
    w_curr: float = 1.0
    batch_size: int = 16
    multiplier_period: int = 10
    z: float = 1.15
    dt: float = 1.0 / 252.0
    x0: float = 1.0
    T: float = 1.0
    seed: int = 0
    episodes: int = 1
    risky_only: bool = True
    stochastic_execution: bool = False
    pretrain: bool = False
    pretrain_iterations: int = 20000

    def __post_init__(self):
        if self.rebalance_every < 1:
            raise InvalidParameterError("rebalance_every must be >= 1")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.pretrain_iterations < 1:
            raise InvalidParameterError("pretrain_iterations must be >= 1")
        if self.multiplier_period < 1:
            raise InvalidParameterError("multiplier_period must be >= 1")
        if not (np.isfinite(self.w_prev) and np.isfinite(self.w_curr)):
            raise InvalidParameterError("blend weights must be finite")
        if self.w_prev < 0 or self.w_curr < 0:
            raise InvalidParameterError("blend weights must be non-negative")
        if not 0 < self.dt <= self.T:
            raise InvalidParameterError(f"need 0 < dt <= T, got dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.T / self.dt + 1e-9))

    @classmethod
    def with_decay(cls, lam: float, **kwargs) -> "OnlineConfig":
        if not 0 < lam < 1:
            raise InvalidParameterError(f"decay must lie in (0, 1), got {lam}")
        return cls(w_prev=lam, w_curr=1.0, **kwargs)


def step_gradients(
    t_k, x_k, u_k, x_next, v: ValueParams, p: PolicyParams, dt: float
) -> Gradients:
    """One-step terms (G_theta, G_phi1, G_phi2inv); broadcasts over a batch of actions."""
    u_k = np.asarray(u_k, dtype=float)
    if u_k.shape[-1] != p.d:
        raise DimensionMismatchError(f"action has {u_k.shape[-1]} assets, policy has {p.d}")
    return td_terms(t_k, x_k, u_k, np.asarray(t_k, dtype=float) + dt, x_next, v, p, dt)


def blend_update(prev, curr, cfg: OnlineConfig):
    """w_prev * prev + w_curr * curr; the first step of an episode passes prev=None."""
    if prev is None:
        return curr
    return cfg.w_prev * prev + cfg.w_curr * curr


def project_risky_only(u: np.ndarray, x: float) -> np.ndarray:
    """Rescale dollar amounts so that they sum to the wealth x."""
    u = np.asarray(u, dtype=float)
    total = float(np.sum(u))
    if abs(total) < 1e-10 * abs(x) or total == 0.0:
        raise DegenerateActionError(f"action sums to {total:.3e}; normalization undefined")
    return u / total * x


def risky_only_or_equal(u: np.ndarray, x: float) -> np.ndarray:
    try:
        return project_risky_only(u, x)
    except DegenerateActionError as e:
        logger.warning(f"{e}; falling back to equal weights")
        return np.full(np.shape(u)[-1], x / np.shape(u)[-1])


class OnlineLearner:
    """Stateful learner fed one realized asset log-return vector per step.

    Wealth is tracked per episode of ``cfg.n_steps`` steps starting from ``cfg.x0``; at
    the end of each episode the terminal wealth is recorded and every
    ``cfg.multiplier_period`` episodes the multiplier moves by the mean terminal gap.
    """

    def __init__(
        self,
        v: ValueParams,
        p: PolicyParams,
        cfg: OnlineConfig,
        sched: Schedule,
        r: float = 0.0,
    ):
        self.cfg = cfg
        self.sched = sched
        self.r = float(r)
        self.v = v
        self.p = p.replace(T=cfg.T)
        self._n = 1
        self._k = 0
        self._global_step = 0
        self._x = cfg.x0
        self._holding: Optional[np.ndarray] = None
        self._prev: Optional[Gradients] = None
        self._terminal: List[float] = []
        self._wealth_path = [cfg.x0]
        self._action_path: List[np.ndarray] = []
        self._return_path: List[np.ndarray] = []
        self.completed: List[Trajectory] = []
        self._snapshots = [self._snapshot()]

    def _snapshot(self):
        return (self.v.theta, self.p.phi1.copy(), self.p.phi2.copy(), self.p.w)

    @property
    def params(self) -> PolicyParams:
        return self.p

    @property
    def value_params(self) -> ValueParams:
        return self.v

    @property
    def wealth(self) -> float:
        return self._x

    @property
    def episode(self) -> int:
        return self._n

    @property
    def time(self) -> float:
        return self._k * self.cfg.dt

    def greedy_action(self) -> np.ndarray:
        u = execute_deterministic(self.time, self._x, self.p)
        if self.cfg.risky_only and self._x > 0:
            u = risky_only_or_equal(u, self._x)
        return u

    def target_weights(self) -> np.ndarray:
        """Fractions of wealth held in each asset under the risky-only greedy action."""
        d = self.p.d
        if self._x <= 0:
            return np.full(d, 1.0 / d)
        u = execute_deterministic(self.time, self._x, self.p)
        return risky_only_or_equal(u, self._x) / self._x

    def step(self, log_returns: np.ndarray) -> float:
        """Consume one step of realized log-returns; returns the executed wealth after it."""
        cfg, p = self.cfg, self.p
        log_returns = np.asarray(log_returns, dtype=float)
        if log_returns.shape != (p.d,):
            raise DimensionMismatchError(f"expected {p.d} returns, got shape {log_returns.shape}")
        t, x = self.time, self._x

        rng = rngs.stream(cfg.seed, rngs.BEHAVIOUR, self._global_step)
        behaviour = sample_action(t, x, p, rng, size=cfg.batch_size)
        if x <= 0:
            u_exec = np.zeros(p.d)
        elif cfg.stochastic_execution:
            u_exec = behaviour[0]
        elif self._k % cfg.rebalance_every == 0 or self._holding is None:
            u_exec = self.greedy_action()
        else:
            u_exec = self._holding
        x_next = max(step_wealth(x, u_exec, log_returns, cfg.dt, self.r), 0.0) if x > 0 else 0.0

        if x > 0:
            # counterfactual wealth of every behaviour action under the same returns
            cf_next = step_wealth(x, behaviour, log_returns, cfg.dt, self.r)
            grads = tuple(
                g.mean(axis=0) for g in step_gradients(t, x, behaviour, cf_next, self.v, p, cfg.dt)
            )
            prev = self._prev if self._k > 0 else None
            direction = tuple(
                blend_update(None if prev is None else prev[i], grads[i], cfg) for i in range(3)
            )
            self._apply(direction)
            self._prev = grads

        self._holding = u_exec * np.exp(log_returns - self.r * cfg.dt)
        self._wealth_path.append(x_next)
        self._action_path.append(np.asarray(u_exec, dtype=float))
        self._return_path.append(log_returns)
        self._x = x_next
        self._k += 1
        self._global_step += 1
        if self._k == cfg.n_steps:
            self._end_episode()
        return x_next

    def _apply(self, direction: Gradients) -> None:
        n, sched = self._n, self.sched
        a_n = sched.a(n)
        raw = (
            self.v.theta + a_n * direction[0],
            self.p.phi1 - a_n * direction[1],
            self.p.phi2 + a_n * direction[2],
        )
        if not all(np.all(np.isfinite(r)) for r in raw):
            raise NumericalOverflowError(
                f"non-finite iterate at episode {n}, step {self._k}", iteration=n
            )
        self.v = self.v.with_theta(clip_box(raw[0], sched.theta_caps))
        self.p = self.p.replace(
            phi1=project_box(raw[1], sched.c1(n)),
            phi2=project_psd_band(raw[2], sched.floor(n), sched.c2(n)),
        )

    def _end_episode(self) -> None:
        cfg = self.cfg
        self._terminal.append(self._x)
        self.completed.append(
            Trajectory(
                times=np.arange(cfg.n_steps + 1) * cfg.dt,
                wealth=np.asarray(self._wealth_path),
                actions=np.asarray(self._action_path),
                log_returns=np.asarray(self._return_path),
            )
        )
        if len(self._terminal) % cfg.multiplier_period == 0:
            gap = float(np.mean(self._terminal[-cfg.multiplier_period :])) - cfg.z
            w = project_box(self.p.w - self.sched.a_w(self._n) * gap, self.sched.cw(self._n))
            self.p = self.p.replace(w=w)
        logger.debug(f"episode {self._n} done: terminal wealth {self._x:.4f}, w={self.p.w:.4f}")
        self._snapshots.append(self._snapshot())
        self._n += 1
        self._k = 0
        self._x = cfg.x0
        self._holding = None
        self._prev = None
        self._wealth_path = [cfg.x0]
        self._action_path = []
        self._return_path = []

    def history(self) -> TrainHistory:
        theta, phi1, phi2, w = (np.asarray(a) for a in zip(*self._snapshots))
        return TrainHistory(
            theta=theta,
            phi1=phi1,
            phi2=phi2,
            w=w,
            terminal_wealth=np.asarray(self._terminal),
            value_params=self.v,
            policy_params=self.p,
        )


@dataclass
class OnlineResult:
    history: TrainHistory
    executed: List[Trajectory] = field(default_factory=list)

    @property
    def terminal_wealth(self) -> np.ndarray:
        return np.array([traj.terminal for traj in self.executed])


def run_online(
    source: Union[ReturnSource, ReturnPanel],
    v: ValueParams,
    p: PolicyParams,
    cfg: OnlineConfig,
    sched: Schedule,
) -> OnlineResult:
    """Run the online learner over simulated episodes or the rows of a return panel.

    With ``cfg.pretrain`` the starting parameters come from a constant-rate pre-training
    phase on the same source (random windows of a panel) that keeps the temperature and
    exploration decay of ``p``.
    """
    if cfg.pretrain:
        sampler = PanelSampler(source) if isinstance(source, ReturnPanel) else source
        v, p, _ = pretrain(
            sampler,
            cfg,
            gamma=p.gamma,
            phi3=p.phi3,
            iterations=cfg.pretrain_iterations,
            batch_size=cfg.batch_size,
            multiplier_period=cfg.multiplier_period,
        )
    if isinstance(source, ReturnPanel):
        learner = OnlineLearner(v, p, cfg, sched, r=0.0)
        for row in source.log_returns():
            learner.step(row)
    else:
        learner = OnlineLearner(v, p, cfg, sched, r=source.r)
        for episode in range(1, cfg.episodes + 1):
            rng = rngs.stream(cfg.seed, rngs.EPISODE, episode)
            for row in source.draw(cfg.n_steps, cfg.dt, rng):
                learner.step(row)
    logger.info(
        f"online run finished after {len(learner.completed)} episodes, w={learner.params.w:.4f}"
    )
    return OnlineResult(history=learner.history(), executed=learner.completed)


def pretrain(
    source: ReturnSource,
    cfg: OnlineConfig,
    gamma: float = 0.1,
    phi3: float = 1.0,
    iterations: int = 20000,
    batch_size: int = 16,
    multiplier_period: int = 10,
    lr: float = 0.005,
    lr_w: float = 0.05,
    lr_scale: float = 1.0,
) -> Tuple[ValueParams, PolicyParams, TrainHistory]:
    """Pre-training phase: constant-rate baseline training from all-ones parameters."""
    v = ValueParams(theta1=1.0, theta2=1.0, theta3=phi3)
    p = PolicyParams.initial(source.d, phi1=1.0, phi2=1.0, w=1.0, phi3=phi3, gamma=gamma, T=cfg.T)
    train_cfg = TrainConfig(
        z=cfg.z,
        gamma=gamma,
        episodes=iterations,
        dt=cfg.dt,
        multiplier_update_period=multiplier_period,
        batch_size=batch_size,
        x0=cfg.x0,
        T=cfg.T,
        seed=cfg.seed,
    )
    logger.info(f"pre-training for {iterations} iterations (batch {batch_size})")
    history = train_baseline(
        source, train_cfg, ConstantSchedule(lr=lr, lr_w=lr_w, lr_scale=lr_scale), (v, p)
    )
    return history.value_params, history.policy_params, history


def save_params(path: Path, v: ValueParams, p: PolicyParams) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"value": v.to_dict(), "policy": p.to_dict()}, f, indent=2)
    return path


def load_params(path: Path) -> Tuple[ValueParams, PolicyParams]:
    with open(Path(path), "r", encoding="utf-8") as f:
        data = json.load(f)
    return ValueParams.from_dict(data["value"]), PolicyParams.from_dict(data["policy"])
