"""Closed-form ground truth for the Black-Scholes mean-variance problem.

Optimal parameters, the mean update directions of the learning recursion, moment
formulas for the linear-feedback policy, and the Sharpe ratio of its terminal wealth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import scipy.integrate
import scipy.stats

from ctrlmv.models.market import MarketModel
from ctrlmv.utils.errors import DegeneracyError, InsufficientDataError, InvalidParameterError
from ctrlmv.utils.logger import get_logger
from ctrlmv.utils.numeric import expm1_ratio, expm1_ratio2, solve_spd, spd_inverse

logger = get_logger("Oracles")


@dataclass(frozen=True, eq=False)
class OracleSet:
    phi1_star: np.ndarray
    phi2_star: np.ndarray
    w_star: float
    k: float
    sr_star: float
    gamma: float
    z: float
    x0: float
    T: float
    logdet_sigma: float

    @property
    def degenerate(self) -> bool:
        """Zero excess return: the multiplier is undefined."""
        return not np.isfinite(self.w_star)

    @property
    def d(self) -> int:
        return self.phi1_star.shape[0]

    def optimal_value(self, t, x):
        """Optimal value function V*(t, x; w*)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        T, w, kappa, d, gamma = self.T, self.w_star, self.k / self.T, self.d, self.gamma
        out = (
            (x - w) ** 2 * np.exp(-kappa * (T - t))
            + gamma * d / 4.0 * kappa * (T**2 - t**2)
            - gamma * d / 2.0 * (kappa * T - (self.logdet_sigma - np.log(np.pi * gamma)) / d) * (T - t)
            - (w - self.z) ** 2
        )
        return out.item() if out.ndim == 0 else out

    def optimal_cov(self, t: float) -> np.ndarray:
        """Covariance of the optimal exploratory policy at time t."""
        return self.phi2_star * np.exp(self.k / self.T * (self.T - t))


def optimal_params(
    model: MarketModel, gamma: float, z: float, x0: float = 1.0, T: float = 1.0
) -> OracleSet:
    """Optimal actor parameters and multiplier of the known market.

    Raises:
        DegeneracyError: singular covariance
    """
    phi1 = solve_spd(model.Sigma, model.excess)
    kappa = float(model.excess @ phi1)
    k = kappa * T
    if k <= 1e-14:
        logger.warning("zero excess return: optimal multiplier is undefined")
        w_star = float("nan")
    else:
        growth = np.exp(k)
        w_star = float((z * growth - x0) / (growth - 1.0))
    sign, logdet = np.linalg.slogdet(model.Sigma)
    return OracleSet(
        phi1_star=phi1,
        phi2_star=0.5 * gamma * spd_inverse(model.Sigma),
        w_star=w_star,
        k=k,
        sr_star=float(np.sqrt(np.expm1(k))),
        gamma=float(gamma),
        z=float(z),
        x0=float(x0),
        T=float(T),
        logdet_sigma=float(logdet),
    )


def _a_b(phi1: np.ndarray, model: MarketModel) -> Tuple[float, float]:
    phi1 = np.asarray(phi1, dtype=float)
    return float(model.excess @ phi1), float(phi1 @ model.Sigma @ phi1)


def q_value(phi1: np.ndarray, model: MarketModel, phi3: float) -> float:
    """Q(phi1) = -2 (mu-r)'phi1 + <Sigma, phi1 phi1'> + phi3."""
    A, B = _a_b(phi1, model)
    return -2.0 * A + B + phi3


def r_value(
    phi1: np.ndarray, phi2: np.ndarray, w: float, model: MarketModel, phi3: float, x0: float, T: float
) -> float:
    q = q_value(phi1, model, phi3)
    explore = float(np.sum(model.Sigma * np.asarray(phi2, dtype=float)))
    return 2.0 * (
        (x0 - w) ** 2 * np.exp(-phi3 * T) * expm1_ratio(q, T) + explore * expm1_ratio2(q, T)
    )


def h1(
    phi1: np.ndarray, phi2: np.ndarray, w: float, model: MarketModel, phi3: float, x0: float, T: float
) -> np.ndarray:
    """Mean of the episode increment Z1: -R (mu - r - Sigma phi1)."""
    phi1 = np.asarray(phi1, dtype=float)
    return -r_value(phi1, phi2, w, model, phi3, x0, T) * (model.excess - model.Sigma @ phi1)


def h2(phi2: np.ndarray, model: MarketModel, gamma: float, T: float) -> np.ndarray:
    """Mean of the episode increment Z2: ((gamma/2) phi2 - phi2 Sigma phi2) T.

    Evaluated with theta3 = phi3; zero exactly at phi2 = (gamma/2) Sigma^{-1}.
    """
    phi2 = np.asarray(phi2, dtype=float)
    return (0.5 * gamma * phi2 - phi2 @ model.Sigma @ phi2) * T


def hw(phi1: np.ndarray, w: float, model: MarketModel, x0: float, z: float, T: float) -> float:
    """Mean terminal gap E[x(T)] - z = (1 - e^{-AT}) w + x0 e^{-AT} - z."""
    A, _ = _a_b(phi1, model)
    decay = np.exp(-A * T)
    return float((1.0 - decay) * w + x0 * decay - z)


def sharpe_closed_form(phi1: np.ndarray, model: MarketModel, T: float = 1.0) -> float:
    """Sharpe ratio (e^{AT} - 1)/sqrt(e^{BT} - 1) of deterministic terminal wealth.

    Valid for w > x0. phi1 = 0 returns 0.
    """
    phi1 = np.asarray(phi1, dtype=float)
    if not np.any(phi1):
        return 0.0
    A, B = _a_b(phi1, model)
    return float(np.expm1(A * T) / np.sqrt(np.expm1(B * T)))


def sharpe_path(phi1_history: np.ndarray, model: MarketModel, T: float = 1.0) -> np.ndarray:
    """sharpe_closed_form applied to each row of an iterate history."""
    phi1_history = np.atleast_2d(np.asarray(phi1_history, dtype=float))
    A = phi1_history @ model.excess
    B = np.einsum("ni,ij,nj->n", phi1_history, model.Sigma, phi1_history)
    out = np.zeros(phi1_history.shape[0])
    nonzero = B > 0
    out[nonzero] = np.expm1(A[nonzero] * T) / np.sqrt(np.expm1(B[nonzero] * T))
    return out


def cumulative_regret(
    phi1_history: np.ndarray, oracle: OracleSet, model: MarketModel, T: float = 1.0
) -> np.ndarray:
    """Running sum of SR(phi1*) - SR(phi1_n)."""
    return np.cumsum(oracle.sr_star - sharpe_path(phi1_history, model, T))


def fit_loglog_slope(n, values, burn_in: int = 0) -> Tuple[float, float]:
    """Least-squares line through (log n, log value) for n >= burn_in.

    Raises:
        InsufficientDataError: fewer than 10 points after burn-in
        InvalidParameterError: non-positive n or values after burn-in
    """
    n = np.asarray(n, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = n >= burn_in
    n, values = n[keep], values[keep]
    if n.shape[0] < 10:
        raise InsufficientDataError(f"need at least 10 points after burn-in, got {n.shape[0]}")
    if np.any(n <= 0) or np.any(values <= 0):
        raise InvalidParameterError("log-log fit needs positive indices and values")
    fit = scipy.stats.linregress(np.log(n), np.log(values))
    return float(fit.slope), float(fit.intercept)


def sample_sharpe(terminal_wealth: np.ndarray, x0: float = 1.0) -> float:
    """(E[x(T)/x0] - 1)/std(x(T)/x0) over a sample of terminal wealth."""
    ratio = np.asarray(terminal_wealth, dtype=float) / x0
    spread = ratio.std(ddof=1)
    if spread == 0:
        raise DegeneracyError("terminal wealth sample has zero dispersion")
    return float((ratio.mean() - 1.0) / spread)


def check_exploration_condition(model: MarketModel, phi3: float) -> bool:
    """Whether phi3 exceeds (mu-r)' Sigma^{-1} (mu-r)."""
    return phi3 > float(model.excess @ solve_spd(model.Sigma, model.excess))


def terminal_moments_ode(
    model: MarketModel,
    phi1: np.ndarray,
    w: float,
    x0: float,
    T: float,
    cov_fn: Callable[[float], np.ndarray],
) -> Tuple[float, float]:
    """Mean and variance of x(T) for exploration covariance path C(t).

    Integrates g' = -A g + A w and
    k' = (B - 2A) k + 2 w (A - B) g + w^2 B + <Sigma, C(t)> for g = E[x], k = E[x^2].
    """
    A, B = _a_b(phi1, model)

    def rhs(t, y):
        g, k = y
        explore = float(np.sum(model.Sigma * cov_fn(t)))
        return [-A * g + A * w, (B - 2.0 * A) * k + 2.0 * w * (A - B) * g + w**2 * B + explore]

    sol = scipy.integrate.solve_ivp(
        rhs, (0.0, T), [x0, x0**2], method="DOP853", rtol=1e-11, atol=1e-13
    )
    if not sol.success:
        raise DegeneracyError(f"moment ODE failed: {sol.message}")
    g, k = sol.y[:, -1]
    return float(g), float(k - g**2)
