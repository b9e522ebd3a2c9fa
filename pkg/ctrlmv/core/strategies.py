"""Classical allocation rules over a rolling window of monthly returns.

Each rule maps a window (and optional side data) to risky-asset weights that sum to one.
Shorting is allowed wherever a rule's closed form produces it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.optimize

from ctrlmv.core.ctrl_online import project_risky_only
from ctrlmv.utils.errors import (
    ConvergenceError,
    DegeneracyError,
    DegenerateActionError,
    DimensionMismatchError,
    InfeasibleProblemError,
    InsufficientDataError,
    InvalidParameterError,
    MissingSideDataError,
    UnknownStrategyError,
)
from ctrlmv.utils.logger import get_logger
from ctrlmv.utils.numeric import solve_spd, symmetrize

logger = get_logger("Strategies")

STRATEGY_IDS = ("ew", "mv", "min_v", "js", "lw", "bl", "ff", "rp", "drmv", "ctmv", "pmv")
MOMENTUM_MONTHS = 11


@dataclass(frozen=True, eq=False)
class MomentEstimate:
    mu_hat: np.ndarray
    Sigma_hat: np.ndarray
    M: int

    @property
    def d(self) -> int:
        return self.mu_hat.shape[0]


def _as_matrix(window) -> np.ndarray:
    if isinstance(window, (pd.DataFrame, pd.Series)):
        window = window.to_numpy(dtype=float)
    arr = np.asarray(window, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("return window contains non-finite values")
    return arr


def estimate_sample_moments(window) -> MomentEstimate:
    """Sample mean and unbiased covariance of a ``(M, d)`` window."""
    arr = _as_matrix(window)
    if arr.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {arr.shape[0]}")
    mu = arr.mean(axis=0)
    dev = arr - mu
    Sigma = dev.T @ dev / (arr.shape[0] - 1)
    return MomentEstimate(mu_hat=mu, Sigma_hat=symmetrize(Sigma), M=arr.shape[0])


def solve_mv(mu: np.ndarray, Sigma: np.ndarray, mu_star: float) -> np.ndarray:
    """Minimum-variance weights with target return ``mu_star`` and full investment.

    Raises:
        DegeneracyError: singular Sigma or mu proportional to the ones vector
    """
    mu = np.asarray(mu, dtype=float)
    ones = np.ones_like(mu)
    inv_mu = solve_spd(Sigma, mu)
    inv_one = solve_spd(Sigma, ones)
    a = float(ones @ inv_one)
    b = float(mu @ inv_one)
    c = float(mu @ inv_mu)
    den = a * c - b * b
    if den <= 1e-12 * max(abs(a * c), 1e-300):
        raise DegeneracyError("mean vector is (nearly) proportional to the ones vector")
    return (a * mu_star - b) / den * inv_mu + (c - b * mu_star) / den * inv_one


def solve_min_variance(Sigma: np.ndarray) -> np.ndarray:
    inv_one = solve_spd(Sigma, np.ones(np.shape(Sigma)[0]))
    return inv_one / inv_one.sum()


def js_intensity(moments: MomentEstimate) -> Tuple[float, np.ndarray]:
    """Shrinkage weight alpha and the common-mean target of the James-Stein estimator."""
    d, M = moments.d, moments.M
    if M <= d + 2:
        raise InsufficientDataError(f"James-Stein shrinkage needs M > d + 2 (M={M}, d={d})")
    inv_one = solve_spd(moments.Sigma_hat, np.ones(d))
    target = float(moments.mu_hat @ inv_one / inv_one.sum()) * np.ones(d)
    diff = moments.mu_hat - target
    distance = float(diff @ solve_spd(moments.Sigma_hat, diff))
    alpha = (d + 2) / (d + 2 + (M - d - 2) * distance)
    return alpha, target


def shrink_mean_js(moments: MomentEstimate) -> np.ndarray:
    alpha, target = js_intensity(moments)
    return (1.0 - alpha) * moments.mu_hat + alpha * target


def shrink_cov_lw(window, market_returns) -> np.ndarray:
    """Entrywise blend of the sample covariance with the single-index target.

    Blend weight for entry (i, j) is clamp((p_ij - r_ij)/c_ij / M, 0, 1) with the
    asymptotic variance p, covariance-with-target r and squared target bias c.
    """
    X = _as_matrix(window)
    m = np.asarray(market_returns, dtype=float).ravel()
    M, d = X.shape
    if M < 3:
        raise InsufficientDataError(f"need at least 3 observations, got {M}")
    if m.shape[0] != M:
        raise DimensionMismatchError(f"market series has {m.shape[0]} rows, window has {M}")
    y = X - X.mean(axis=0)
    y0 = m - m.mean()
    S = symmetrize(y.T @ y / (M - 1))
    s00 = float(y0 @ y0 / (M - 1))
    if s00 <= 0:
        raise DegeneracyError("market return has zero variance over the window")
    s_im = y.T @ y0 / (M - 1)
    beta = s_im / s00
    resid = y - np.outer(y0, beta)
    F = np.outer(beta, beta) * s00 + np.diag((resid**2).sum(axis=0) / (M - 1))

    cross = y[:, :, None] * y[:, None, :]
    P = np.mean((cross - S) ** 2, axis=0)
    lead = (
        s_im[None, None, :] * s00 * y[:, :, None]
        + s_im[None, :, None] * s00 * y[:, None, :]
        - np.outer(s_im, s_im)[None] * y0[:, None, None]
    ) / s00**2
    R = np.mean(lead * y0[:, None, None] * cross, axis=0) - F * S
    np.fill_diagonal(R, np.diag(P))
    C = (F - S) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(C > 0, (P - R) / C, 0.0)
    weight = np.clip(kappa / M, 0.0, 1.0)
    return symmetrize(weight * F + (1.0 - weight) * S)


def infer_mu_bl(
    Sigma_all: np.ndarray, cap_weights: np.ndarray, market_mean: float, market_var: float
) -> np.ndarray:
    """Market-implied means gamma_hat * Sigma * w_cap with gamma_hat = market mean / variance."""
    if not market_var > 0:
        raise DegeneracyError("market return has zero variance")
    caps = np.asarray(cap_weights, dtype=float)
    if caps.sum() <= 0:
        raise InvalidParameterError("market caps must have a positive total")
    caps = caps / caps.sum()
    return (market_mean / market_var) * (np.asarray(Sigma_all, dtype=float) @ caps)


def fit_ff_moments(window, factors) -> Tuple[np.ndarray, np.ndarray]:
    """Three-factor moments: intercepts and B Sigma_F B' + diag(residual variances)."""
    X = _as_matrix(window)
    Fm = _as_matrix(factors)
    M = X.shape[0]
    if Fm.shape[0] != M:
        raise DimensionMismatchError(f"factor series has {Fm.shape[0]} rows, window has {M}")
    if M <= 4:
        raise InsufficientDataError(f"factor regression needs more than 4 observations, got {M}")
    centered = Fm - Fm.mean(axis=0)
    if np.linalg.matrix_rank(centered) < Fm.shape[1]:
        raise DegeneracyError("factor series are collinear over the window")
    design = np.column_stack([np.ones(M), centered])
    coef, *_ = np.linalg.lstsq(design, X, rcond=None)
    alpha = coef[0]
    loadings = coef[1:].T
    resid = X - design @ coef
    Sigma_F = centered.T @ centered / (M - 1)
    Sigma = loadings @ Sigma_F @ loadings.T + np.diag((resid**2).sum(axis=0) / (M - 1))
    return alpha, symmetrize(Sigma)


def risk_contributions(w: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """Fraction of portfolio variance contributed by each asset."""
    w = np.asarray(w, dtype=float)
    marginal = np.asarray(Sigma, dtype=float) @ w
    return w * marginal / float(w @ marginal)


def solve_risk_parity(Sigma: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Equal-risk-contribution weights.

    Cyclic fixed-point sweeps of y_i (Sigma y)_i = 1/d, each coordinate solved from its
    quadratic; weights are y normalized to sum to one.

    Raises:
        ConvergenceError: contributions not equal to ``tol`` within ``max_iter`` sweeps
    """
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[0]
    diag = np.diag(Sigma)
    if np.any(diag <= 0):
        raise DegeneracyError("risk parity needs positive variances")
    budget = 1.0 / d
    y = 1.0 / np.sqrt(diag)
    for sweep in range(1, max_iter + 1):
        for i in range(d):
            c = float(Sigma[i] @ y) - Sigma[i, i] * y[i]
            y[i] = (-c + np.sqrt(c * c + 4.0 * Sigma[i, i] * budget)) / (2.0 * Sigma[i, i])
        rc = risk_contributions(y, Sigma)
        if rc.max() - rc.min() < tol:
            logger.debug(f"risk parity converged after {sweep} sweeps")
            return y / y.sum()
    raise ConvergenceError(f"risk parity did not converge in {max_iter} sweeps")


def drmv_default_delta(Sigma: np.ndarray, M: int) -> float:
    Sigma = np.asarray(Sigma, dtype=float)
    return float(np.trace(Sigma) / (Sigma.shape[0] * M))


def solve_drmv(mu_hat: np.ndarray, Sigma_hat: np.ndarray, mu_star: float, delta: float) -> np.ndarray:
    """Regularized mean-variance weights (2-norm penalty of radius sqrt(delta)).

    Minimizes sqrt(w' Sigma w) + sqrt(delta) |w| subject to
    mu' w - sqrt(delta) |w| >= mu_star and full investment, by SLSQP.

    Raises:
        InfeasibleProblemError: no full-investment portfolio reaches the return floor
    """
    if delta < 0:
        raise InvalidParameterError(f"delta must be non-negative, got {delta}")
    mu = np.asarray(mu_hat, dtype=float)
    Sigma = np.asarray(Sigma_hat, dtype=float)
    d = mu.shape[0]
    radius = float(np.sqrt(delta))

    def objective(w):
        return float(np.sqrt(w @ Sigma @ w) + radius * np.linalg.norm(w))

    def objective_grad(w):
        return Sigma @ w / np.sqrt(w @ Sigma @ w) + radius * w / np.linalg.norm(w)

    def return_floor(w):
        return float(mu @ w - radius * np.linalg.norm(w) - mu_star)

    def return_floor_grad(w):
        return mu - radius * w / np.linalg.norm(w)

    try:
        start = solve_mv(mu, Sigma, mu_star)
    except DegeneracyError:
        start = np.full(d, 1.0 / d)
    result = scipy.optimize.minimize(
        objective,
        start,
        jac=objective_grad,
        method="SLSQP",
        constraints=[
            {"type": "eq", "fun": lambda w: float(w.sum() - 1.0), "jac": lambda w: np.ones(d)},
            {"type": "ineq", "fun": return_floor, "jac": return_floor_grad},
        ],
        options={"ftol": 1e-15, "maxiter": 2000},
    )
    w = result.x
    if not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-8 or return_floor(w) < -1e-8:
        raise InfeasibleProblemError(f"robust mean-variance problem infeasible: {result.message}")
    return w


def ctmv_weights(
    mu_hat: np.ndarray,
    Sigma_hat: np.ndarray,
    r: float,
    x: float,
    x0: float,
    z: float,
    T: float,
    periods_per_year: int = 12,
) -> np.ndarray:
    """Plug-in continuous-time mean-variance allocation, normalized to full risky investment.

    Window moments are annualized by ``periods_per_year``; ``r`` is annual.

    Raises:
        DegenerateActionError: x equals the plug-in multiplier (zero action)
    """
    mu_a = np.asarray(mu_hat, dtype=float) * periods_per_year
    Sigma_a = np.asarray(Sigma_hat, dtype=float) * periods_per_year
    excess = mu_a - r
    direction = solve_spd(Sigma_a, excess)
    k = float(excess @ direction) * T
    if k <= 1e-14:
        raise DegenerateActionError("zero estimated excess return: multiplier undefined")
    growth = np.exp(k)
    w_star = (z * growth - x0) / (growth - 1.0)
    u = -direction * (x - w_star)
    return project_risky_only(u, x) / x


def pmv_features(returns) -> Tuple[np.ndarray, np.ndarray]:
    """Reversal (the month's return) and momentum (compound return of the prior 11 months).

    Momentum rows without 11 prior months are NaN.
    """
    R = _as_matrix(returns)
    mom = np.full_like(R, np.nan)
    growth = np.log1p(R)
    csum = np.vstack([np.zeros(R.shape[1]), np.cumsum(growth, axis=0)])
    for t in range(MOMENTUM_MONTHS, R.shape[0]):
        mom[t] = np.expm1(csum[t] - csum[t - MOMENTUM_MONTHS])
    return R.copy(), mom


def pmv_fit(window) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-asset regression of next-month return on reversal and momentum, with sign clamps.

    Returns (alpha, beta_rev, beta_mom) with beta_rev <= 0 and beta_mom >= 0. A window of
    13 months yields a single (features, next return) pair per asset; windows with fewer pairs
    than coefficients take the minimum-norm least-squares fit.
    """
    R = _as_matrix(window)
    M, d = R.shape
    if M < MOMENTUM_MONTHS + 2:
        raise InsufficientDataError(
            f"predictive regression needs at least {MOMENTUM_MONTHS + 2} months, got {M}"
        )
    rev, mom = pmv_features(R)
    rows = np.arange(MOMENTUM_MONTHS, M - 1)
    alpha, beta_rev, beta_mom = np.empty(d), np.empty(d), np.empty(d)
    for i in range(d):
        design = np.column_stack([np.ones(rows.size), rev[rows, i], mom[rows, i]])
        coef, *_ = np.linalg.lstsq(design, R[rows + 1, i], rcond=None)
        alpha[i], beta_rev[i], beta_mom[i] = coef
    return alpha, np.minimum(beta_rev, 0.0), np.maximum(beta_mom, 0.0)


def pmv_predict(window, rev: Optional[np.ndarray] = None, mom: Optional[np.ndarray] = None) -> np.ndarray:
    """Predicted next-month returns; current factors default to the window's last month."""
    R = _as_matrix(window)
    alpha, beta_rev, beta_mom = pmv_fit(R)
    if rev is None or mom is None:
        cur_rev, cur_mom = pmv_features(R)
        rev = cur_rev[-1] if rev is None else rev
        mom = cur_mom[-1] if mom is None else mom
    return alpha + beta_rev * np.asarray(rev, dtype=float) + beta_mom * np.asarray(mom, dtype=float)


@dataclass
class StrategyRequest:
    """Inputs of one allocation decision; ``window`` holds monthly simple returns."""

    strategy: str
    window: np.ndarray
    mu_star: Optional[float] = None
    z: float = 1.15
    factors: Optional[np.ndarray] = None
    market_returns: Optional[np.ndarray] = None
    cap_weights: Optional[np.ndarray] = None
    delta: Optional[float] = None
    r: float = 0.0
    x: float = 1.0
    x0: float = 1.0
    T: float = 1.0
    periods_per_year: int = 12

    @property
    def target_return(self) -> float:
        """Per-period return target, by default the geometric share of z."""
        if self.mu_star is not None:
            return float(self.mu_star)
        return float(self.z ** (1.0 / self.periods_per_year) - 1.0)


def _require(req: StrategyRequest, *names: str) -> None:
    missing = [n for n in names if getattr(req, n) is None]
    if missing:
        raise MissingSideDataError(f"strategy {req.strategy!r} needs {', '.join(missing)}")


def _ew(req: StrategyRequest) -> np.ndarray:
    d = _as_matrix(req.window).shape[1]
    return np.full(d, 1.0 / d)


def _mv(req: StrategyRequest) -> np.ndarray:
    est = estimate_sample_moments(req.window)
    return solve_mv(est.mu_hat, est.Sigma_hat, req.target_return)


def _min_v(req: StrategyRequest) -> np.ndarray:
    return solve_min_variance(estimate_sample_moments(req.window).Sigma_hat)


def _js(req: StrategyRequest) -> np.ndarray:
    est = estimate_sample_moments(req.window)
    return solve_mv(shrink_mean_js(est), est.Sigma_hat, req.target_return)


def _lw(req: StrategyRequest) -> np.ndarray:
    _require(req, "market_returns")
    est = estimate_sample_moments(req.window)
    Sigma = shrink_cov_lw(req.window, req.market_returns)
    return solve_mv(est.mu_hat, Sigma, req.target_return)


def _bl(req: StrategyRequest) -> np.ndarray:
    _require(req, "market_returns", "cap_weights")
    est = estimate_sample_moments(req.window)
    market = np.asarray(req.market_returns, dtype=float)
    mu = infer_mu_bl(est.Sigma_hat, req.cap_weights, market.mean(), market.var(ddof=1))
    return solve_mv(mu, est.Sigma_hat, req.target_return)


def _ff(req: StrategyRequest) -> np.ndarray:
    _require(req, "factors")
    mu, Sigma = fit_ff_moments(req.window, req.factors)
    return solve_mv(mu, Sigma, req.target_return)


def _rp(req: StrategyRequest) -> np.ndarray:
    return solve_risk_parity(estimate_sample_moments(req.window).Sigma_hat)


def _drmv(req: StrategyRequest) -> np.ndarray:
    est = estimate_sample_moments(req.window)
    delta = req.delta if req.delta is not None else drmv_default_delta(est.Sigma_hat, est.M)
    return solve_drmv(est.mu_hat, est.Sigma_hat, req.target_return, delta)


def _ctmv(req: StrategyRequest) -> np.ndarray:
    est = estimate_sample_moments(req.window)
    try:
        return ctmv_weights(
            est.mu_hat, est.Sigma_hat, req.r, req.x, req.x0, req.z, req.T, req.periods_per_year
        )
    except DegenerateActionError as e:
        logger.warning(f"ctmv: {e}; falling back to equal weights")
        return np.full(est.d, 1.0 / est.d)


def _pmv(req: StrategyRequest) -> np.ndarray:
    est = estimate_sample_moments(req.window)
    return solve_mv(pmv_predict(req.window), est.Sigma_hat, req.target_return)


_RULES: Dict[str, Callable[[StrategyRequest], np.ndarray]] = {
    "ew": _ew,
    "mv": _mv,
    "min_v": _min_v,
    "js": _js,
    "lw": _lw,
    "bl": _bl,
    "ff": _ff,
    "rp": _rp,
    "drmv": _drmv,
    "ctmv": _ctmv,
    "pmv": _pmv,
}


def allocate(req: StrategyRequest) -> np.ndarray:
    """Dispatch a request to its allocation rule; the result sums to one.

    Raises:
        UnknownStrategyError: unknown strategy id
        MissingSideDataError: side data required by the rule is absent
    """
    rule = _RULES.get(req.strategy)
    if rule is None:
        raise UnknownStrategyError(f"unknown strategy {req.strategy!r}; choose from {STRATEGY_IDS}")
    weights = np.asarray(rule(req), dtype=float)
    total = float(weights.sum())
    if not np.all(np.isfinite(weights)) or abs(total) < 1e-12:
        raise DegeneracyError(f"strategy {req.strategy!r} produced unusable weights")
    return weights / total
