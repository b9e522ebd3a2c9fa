"""Critic and actor parameters."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from ctrlmv.utils.errors import DimensionMismatchError, InvalidParameterError
from ctrlmv.utils.numeric import check_spd


@dataclass(frozen=True)
class ValueParams:
    """Critic J(t, x; w) = (x-w)^2 e^{-theta3 (T-t)} + theta2 (t^2-T^2) + theta1 (t-T) - (w-z)^2."""

    theta1: float = 0.0
    theta2: float = 0.0
    theta3: float = 1.0

    def __post_init__(self):
        if not self.theta3 > 0:
            raise InvalidParameterError(f"theta3 must be positive, got {self.theta3}")
        if not (np.isfinite(self.theta1) and np.isfinite(self.theta2)):
            raise InvalidParameterError("theta1 and theta2 must be finite")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])

    def with_theta(self, theta: np.ndarray) -> "ValueParams":
        return dataclasses.replace(self, theta1=float(theta[0]), theta2=float(theta[1]))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ValueParams":
        return cls(**{k: float(data[k]) for k in ("theta1", "theta2", "theta3") if k in data})


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Gaussian policy N(-phi1 (x-w), phi2 e^{phi3 (T-t)}) with multiplier w and temperature gamma."""

    phi1: np.ndarray
    phi2: np.ndarray
    phi3: float = 1.0
    w: float = 1.0
    gamma: float = 0.1
    T: float = 1.0

    def __post_init__(self):
        phi1 = np.atleast_1d(np.asarray(self.phi1, dtype=float))
        phi2 = np.atleast_2d(np.asarray(self.phi2, dtype=float))
        if phi1.ndim != 1:
            raise DimensionMismatchError(f"phi1 must be a vector, got shape {phi1.shape}")
        if phi2.shape != (phi1.shape[0], phi1.shape[0]):
            raise DimensionMismatchError(
                f"phi2 shape {phi2.shape} does not match phi1 length {phi1.shape[0]}"
            )
        if not np.all(np.isfinite(phi1)) or not np.isfinite(self.w):
            raise InvalidParameterError("phi1 and w must be finite")
        check_spd(phi2, "phi2")
        if self.gamma < 0:
            raise InvalidParameterError(f"gamma must be non-negative, got {self.gamma}")
        if self.T <= 0:
            raise InvalidParameterError(f"T must be positive, got {self.T}")
        object.__setattr__(self, "phi1", phi1)
        object.__setattr__(self, "phi2", phi2)
        object.__setattr__(self, "phi3", float(self.phi3))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return self.phi1.shape[0]

    def replace(self, **changes) -> "PolicyParams":
        return dataclasses.replace(self, **changes)

    @classmethod
    def initial(
        cls,
        d: int,
        phi1: float = 0.0,
        phi2: float = 1.0,
        w: float = 1.0,
        phi3: float = 1.0,
        gamma: float = 0.1,
        T: float = 1.0,
    ) -> "PolicyParams":
        """Constant phi1 entries and phi2 = phi2 * identity."""
        return cls(
            phi1=np.full(d, float(phi1)), phi2=float(phi2) * np.eye(d), phi3=phi3, w=w, gamma=gamma, T=T
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "phi1": self.phi1.tolist(),
            "phi2": self.phi2.tolist(),
            "phi3": self.phi3,
            "w": self.w,
            "gamma": self.gamma,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PolicyParams":
        return cls(
            phi1=np.asarray(data["phi1"], dtype=float),
            phi2=np.asarray(data["phi2"], dtype=float),
            phi3=float(data.get("phi3", 1.0)),
            w=float(data.get("w", 1.0)),
            gamma=float(data.get("gamma", 0.1)),
            T=float(data.get("T", 1.0)),
        )
