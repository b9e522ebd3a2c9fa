"""Critic, Gaussian actor, entropy and their analytic gradients.

All functions broadcast over leading axes of ``t`` and ``x`` (and ``u``, which carries
a trailing asset axis), so one call can evaluate a single step, a whole episode, or a
batch of episodes.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from ctrlmv.models.params import PolicyParams, ValueParams
from ctrlmv.utils.errors import InvalidParameterError
from ctrlmv.utils.numeric import spd_inverse, spd_logdet

LOG_2PI = np.log(2.0 * np.pi)


def value_J(t, x, params: ValueParams, w: float, z: float, T: float):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    out = (
        (x - w) ** 2 * np.exp(-params.theta3 * (T - t))
        + params.theta2 * (t**2 - T**2)
        + params.theta1 * (t - T)
        - (w - z) ** 2
    )
    return out.item() if out.ndim == 0 else out


def grad_J_theta(t, T: float) -> np.ndarray:
    """(dJ/dtheta1, dJ/dtheta2) = (t - T, t^2 - T^2), stacked on the last axis."""
    t = np.asarray(t, dtype=float)
    return np.stack([t - T, t**2 - T**2], axis=-1)


def _decay(t, p: PolicyParams):
    """e^{-phi3 (T - t)}, the inverse of the covariance inflation."""
    return np.exp(-p.phi3 * (p.T - np.asarray(t, dtype=float)))


def phi2_inverse(p: PolicyParams) -> np.ndarray:
    return spd_inverse(p.phi2)


def policy_mean(t, x, p: PolicyParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return -np.asarray(x - p.w)[..., None] * p.phi1


def policy_cov(t: float, p: PolicyParams) -> np.ndarray:
    return p.phi2 * np.exp(p.phi3 * (p.T - t))


def execute_deterministic(t, x, p: PolicyParams) -> np.ndarray:
    """Greedy action -phi1 (x - w)."""
    return policy_mean(t, x, p)


def sample_action(
    t: float, x, p: PolicyParams, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """Draw from the Gaussian policy at time ``t``.

    ``x`` may be a scalar (optionally with ``size`` independent draws) or an array of
    wealth levels, one draw per entry.
    """
    try:
        chol = np.linalg.cholesky(p.phi2)
    except np.linalg.LinAlgError as e:
        raise InvalidParameterError(f"phi2 is not positive definite: {e}") from e
    mean = policy_mean(t, x, p)
    if size is not None:
        if mean.ndim != 1:
            raise InvalidParameterError("size is only valid for a scalar wealth")
        shape = (size, p.d)
    else:
        shape = mean.shape
    shocks = rng.standard_normal(shape)
    return mean + np.sqrt(np.exp(p.phi3 * (p.T - t))) * shocks @ chol.T


def log_pi(u, t, x, p: PolicyParams):
    u = np.asarray(u, dtype=float)
    decay = _decay(t, p)
    v = u - policy_mean(t, x, p)
    quad = np.einsum("...i,ij,...j->...", v, phi2_inverse(p), v)
    logdet_cov = spd_logdet(p.phi2) + p.d * p.phi3 * (p.T - np.asarray(t, dtype=float))
    out = -0.5 * p.d * LOG_2PI - 0.5 * logdet_cov - 0.5 * decay * quad
    return out.item() if np.ndim(out) == 0 else out


def grad_log_pi_phi1(u, t, x, p: PolicyParams, phi2_inv: Optional[np.ndarray] = None) -> np.ndarray:
    """-e^{-phi3 (T-t)} [(x-w) phi2^{-1} u + (x-w)^2 phi2^{-1} phi1]."""
    if phi2_inv is None:
        phi2_inv = phi2_inverse(p)
    u = np.asarray(u, dtype=float)
    dev = np.asarray(np.asarray(x, dtype=float) - p.w)[..., None]
    decay = np.asarray(_decay(t, p))[..., None]
    return -decay * dev * ((u + dev * p.phi1) @ phi2_inv)


def grad_log_pi_phi2inv(u, t, x, p: PolicyParams) -> np.ndarray:
    """1/2 phi2 - 1/2 e^{-phi3 (T-t)} (u + phi1 (x-w)) (u + phi1 (x-w))^T."""
    u = np.asarray(u, dtype=float)
    v = u - policy_mean(t, x, p)
    decay = np.asarray(_decay(t, p))[..., None, None]
    return 0.5 * p.phi2 - 0.5 * decay * v[..., :, None] * v[..., None, :]


def entropy_hat(t, p: PolicyParams):
    """Expected log-density of the policy (negative differential entropy)."""
    t = np.asarray(t, dtype=float)
    out = (
        -0.5 * p.d * (LOG_2PI + 1.0)
        - 0.5 * spd_logdet(p.phi2)
        - 0.5 * p.d * p.phi3 * (p.T - t)
    )
    return out.item() if np.ndim(out) == 0 else out


def td_terms(
    t_k, x_k, u_k, t_next, x_next, v: ValueParams, p: PolicyParams, dt: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-step temporal-difference terms (G_theta, G_phi1, G_phi2inv).

    The multiplier term of J is constant in (t, x) and cancels in the increment.
    """
    dJ = value_J(t_next, x_next, v, p.w, p.w, p.T) - value_J(t_k, x_k, v, p.w, p.w, p.T)
    delta = np.asarray(dJ + p.gamma * entropy_hat(t_k, p) * dt)
    g_theta = grad_J_theta(t_k, p.T) * delta[..., None]
    g_phi1 = grad_log_pi_phi1(u_k, t_k, x_k, p) * delta[..., None]
    g_phi2 = (
        grad_log_pi_phi2inv(u_k, t_k, x_k, p) * delta[..., None, None]
        + 0.5 * p.gamma * p.phi2 * dt
    )
    return g_theta, g_phi1, g_phi2


class GaussianPolicy:
    """Action rule drawing from the exploratory policy."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, t: float, x: float, rng: np.random.Generator) -> np.ndarray:
        return sample_action(t, x, self.params, rng)


class DeterministicPolicy:
    """Action rule executing the policy mean."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, t: float, x: float, rng: np.random.Generator) -> np.ndarray:
        return execute_deterministic(t, x, self.params)
