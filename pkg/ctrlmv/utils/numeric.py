"""Small linear-algebra and series helpers shared by the core modules."""

import numpy as np
import scipy.linalg

from ctrlmv.utils.errors import DegeneracyError, InvalidParameterError

SERIES_THRESHOLD = 1e-8
MAX_CONDITION = 1e12


def expm1_ratio(q, t):
    """(e^{qt} - 1)/q, continuous through q = 0."""
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    small = np.abs(q) < SERIES_THRESHOLD
    safe_q = np.where(small, 1.0, q)
    exact = np.expm1(safe_q * t) / safe_q
    series = t + q * t**2 / 2.0 + q**2 * t**3 / 6.0
    out = np.where(small, series, exact)
    return out.item() if out.ndim == 0 else out


def expm1_ratio2(q, t):
    """(e^{qt} - 1 - qt)/q^2, continuous through q = 0."""
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    small = np.abs(q) < SERIES_THRESHOLD
    safe_q = np.where(small, 1.0, q)
    exact = (np.expm1(safe_q * t) - safe_q * t) / safe_q**2
    series = t**2 / 2.0 + q * t**3 / 6.0 + q**2 * t**4 / 24.0
    out = np.where(small, series, exact)
    return out.item() if out.ndim == 0 else out


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_spd(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a float array after checking symmetry and positive eigenvalues."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise InvalidParameterError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameterError(f"{name} has non-finite entries")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise InvalidParameterError(f"{name} must be symmetric")
    smallest = scipy.linalg.eigvalsh(a)[0]
    if smallest <= 0:
        raise InvalidParameterError(f"{name} must be positive definite (min eigenvalue {smallest:.3e})")
    return a


def spd_inverse(a: np.ndarray, max_condition: float = MAX_CONDITION) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via its eigendecomposition."""
    eigvals, eigvecs = scipy.linalg.eigh(symmetrize(a))
    if eigvals[0] <= 0:
        raise DegeneracyError(f"matrix is not positive definite (min eigenvalue {eigvals[0]:.3e})")
    condition = eigvals[-1] / eigvals[0]
    if condition > max_condition:
        raise DegeneracyError(f"matrix is ill-conditioned (condition number {condition:.3e})")
    return (eigvecs / eigvals) @ eigvecs.T


def spd_logdet(a: np.ndarray) -> float:
    c, lower = scipy.linalg.cho_factor(symmetrize(a), lower=True)
    return float(2.0 * np.sum(np.log(np.diag(c))))


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for a covariance-like ``a``; singular input raises DegeneracyError."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    try:
        condition = np.linalg.cond(a)
    except np.linalg.LinAlgError as e:
        raise DegeneracyError(f"singular matrix: {e}") from e
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise DegeneracyError(f"singular or ill-conditioned matrix (condition number {condition:.3e})")
    return np.linalg.solve(a, b)
