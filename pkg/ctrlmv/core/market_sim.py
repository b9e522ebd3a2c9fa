"""Wealth simulation in the d-asset Black-Scholes market."""

from __future__ import annotations

from typing import Callable, Optional, Tuple

import numpy as np

from ctrlmv.models.market import MarketModel, PathBatch, ReturnSource, SimConfig, Trajectory
from ctrlmv.models.params import PolicyParams
from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import DegeneracyError, InvalidParameterError, InvalidStateError
from ctrlmv.utils.logger import get_logger
from ctrlmv.utils.numeric import expm1_ratio

logger = get_logger("MarketSim")

ActionRule = Callable[[float, float, np.random.Generator], np.ndarray]


def step_wealth(x, u, asset_log_returns, dt: float, r: float):
    """Discounted self-financing wealth after one step.

    Args:
        x: wealth before the step (scalar or batch)
        u: dollar amounts in each risky asset, trailing axis of length d
        asset_log_returns: realized log-returns over the step, same shape as ``u``
        dt: step length in years
        r: annualized risk-free rate

    Returns:
        x + sum_i u_i (e^{logret_i} - 1) - (sum_i u_i)(e^{r dt} - 1)
    """
    if dt <= 0:
        raise InvalidParameterError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    lr = np.asarray(asset_log_returns, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(lr))):
        raise InvalidStateError("non-finite wealth, action or return in wealth step")
    out = x + np.sum(u * np.expm1(lr), axis=-1) - np.sum(u, axis=-1) * np.expm1(r * dt)
    return out.item() if out.ndim == 0 else out


def draw_log_returns(
    source: ReturnSource, n_steps: int, dt: float, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    return source.draw(n_steps, dt, rng, size=size)


def roll_out(
    log_returns: np.ndarray,
    cfg: SimConfig,
    policy: ActionRule,
    rng: np.random.Generator,
    r: float,
) -> Trajectory:
    """Run an action rule along a pre-drawn return path, absorbing wealth at zero."""
    log_returns = np.asarray(log_returns, dtype=float)
    n_steps, d = log_returns.shape
    times = np.arange(n_steps + 1) * cfg.dt
    wealth = np.zeros(n_steps + 1)
    actions = np.zeros((n_steps, d))
    wealth[0] = cfg.x0
    for k in range(n_steps):
        if wealth[k] <= 0:
            # absorbed: wealth and holdings stay at zero
            continue
        u = np.asarray(policy(times[k], wealth[k], rng), dtype=float)
        actions[k] = u
        wealth[k + 1] = max(step_wealth(wealth[k], u, log_returns[k], cfg.dt, r), 0.0)
    return Trajectory(times=times, wealth=wealth, actions=actions, log_returns=log_returns)


def simulate_episode(
    model: ReturnSource,
    cfg: SimConfig,
    policy: ActionRule,
    rng: Optional[np.random.Generator] = None,
    episode: int = 0,
) -> Trajectory:
    """Simulate one episode of ``floor(T/dt)`` steps.

    Without an explicit generator the stream is derived from ``(cfg.seed, episode)``.
    """
    if rng is None:
        rng = rngs.stream(cfg.seed, rngs.EPISODE, episode)
    log_returns = model.draw(cfg.n_steps, cfg.dt, rng)
    return roll_out(log_returns, cfg, policy, rng, model.r)


def simulate_linear_feedback(
    source: ReturnSource,
    cfg: SimConfig,
    p: PolicyParams,
    rng: np.random.Generator,
    n_paths: int,
    stochastic: bool = True,
    cov_scale: float = 1.0,
    absorb: bool = True,
    log_returns: Optional[np.ndarray] = None,
) -> PathBatch:
    """Vectorized simulation of ``n_paths`` episodes under the linear-feedback policy.

    With ``stochastic`` the actions are drawn from N(-phi1 (x-w), cov_scale * phi2 e^{phi3 (T-t)}),
    otherwise the mean is executed. ``log_returns`` of shape ``(n_paths, K, d)`` replays a
    given return sample instead of drawing one.
    """
    n_steps = cfg.n_steps
    if log_returns is None:
        log_returns = source.draw(n_steps, cfg.dt, rng, size=n_paths)
    log_returns = np.asarray(log_returns, dtype=float)
    n_paths, n_steps, d = log_returns.shape
    if stochastic:
        if cov_scale < 0:
            raise InvalidParameterError(f"cov_scale must be non-negative, got {cov_scale}")
        chol = np.sqrt(cov_scale) * np.linalg.cholesky(p.phi2)
        shocks = rng.standard_normal((n_paths, n_steps, d))

    times = np.arange(n_steps + 1) * cfg.dt
    wealth = np.empty((n_paths, n_steps + 1))
    actions = np.zeros((n_paths, n_steps, d))
    wealth[:, 0] = cfg.x0
    alive = np.ones(n_paths, dtype=bool)
    for k in range(n_steps):
        t = times[k]
        x = wealth[:, k]
        u = -(x - p.w)[:, None] * p.phi1
        if stochastic:
            u = u + np.sqrt(np.exp(p.phi3 * (p.T - t))) * shocks[:, k] @ chol.T
        if absorb:
            u[~alive] = 0.0
        nxt = step_wealth(x, u, log_returns[:, k], cfg.dt, source.r)
        if absorb:
            nxt = np.where(alive, nxt, 0.0)
            hit = nxt <= 0
            nxt[hit] = 0.0
            alive &= ~hit
        wealth[:, k + 1] = nxt
        actions[:, k] = u
    return PathBatch(times=times, wealth=wealth, actions=actions, log_returns=log_returns)


def exploratory_moments(
    model: MarketModel,
    phi1: np.ndarray,
    phi2: np.ndarray,
    phi3: float,
    w: float,
    x0: float,
    t,
    T: float = 1.0,
) -> Tuple[float, float]:
    """E[x(t) - w] and E[(x(t) - w)^2] under the exploratory Gaussian policy.

    The second moment is (x0-w)^2 e^{Q0 t} + <Sigma, phi2> e^{phi3 (T-t)} (e^{Q t} - 1)/Q
    with A = (mu-r)'phi1, B = phi1' Sigma phi1, Q0 = B - 2A and Q = Q0 + phi3; the ratio is
    continued through Q = 0 by its series.
    """
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T + 1e-12):
        raise InvalidParameterError(f"t must lie in [0, T], got {t}")
    A = float(model.excess @ phi1)
    B = float(phi1 @ model.Sigma @ phi1)
    q0 = B - 2.0 * A
    q = q0 + phi3
    explore = float(np.sum(model.Sigma * phi2))
    mean = (x0 - w) * np.exp(-A * t)
    second = (x0 - w) ** 2 * np.exp(q0 * t) + explore * np.exp(phi3 * (T - t)) * expm1_ratio(q, t)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(second))):
        raise DegeneracyError("exploratory moments overflowed")
    if np.ndim(mean) == 0:
        return float(mean), float(second)
    return mean, second
