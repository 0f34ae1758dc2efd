"""Proximal operators for the regulariser on theta and the indicator of {gamma >= gamma0}."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REG_KINDS = ("none", "l1", "l2sq")


@dataclass(frozen=True)
class RegularizerSpec:
    """``r(theta) = weight * ||theta||_1`` (l1) or ``weight * ||theta||_2^2`` (l2sq)."""

    kind: str = "none"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REG_KINDS}")
        if not self.weight >= 0:
            raise ValueError("regularizer weight must be >= 0")

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        if self.kind == "l1":
            return self.weight * float(np.abs(theta).sum())
        if self.kind == "l2sq":
            return self.weight * float(theta @ theta)
        return 0.0


@dataclass(frozen=True)
class AugmentedParams:
    """Model weights together with the scalar dual variable gamma."""

    theta: np.ndarray
    gamma: float


def soft_threshold(v, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def prox_theta(reg: RegularizerSpec, v, alpha: float) -> np.ndarray:
    if not alpha > 0:
        raise ValueError("prox step alpha must be > 0")
    v = np.asarray(v, dtype=np.float64)
    if reg.kind == "l1":
        return soft_threshold(v, alpha * reg.weight)
    if reg.kind == "l2sq":
        return v / (1.0 + 2.0 * alpha * reg.weight)
    return v.copy()


def project_gamma(gamma: float, gamma0: float) -> float:
    return max(float(gamma), float(gamma0))


def prox_step(reg: RegularizerSpec, theta_v, gamma_v: float, alpha: float, gamma0: float) -> AugmentedParams:
    """Joint prox of ``alpha * r(theta) + h(gamma)`` at ``(theta_v, gamma_v)``.

    The theta block is the regulariser's prox; the gamma block is the
    projection onto ``[gamma0, inf)``.
    """
    return AugmentedParams(prox_theta(reg, theta_v, alpha), project_gamma(gamma_v, gamma0))


def prox_objective(reg: RegularizerSpec, u, v, alpha: float) -> float:
    """``alpha * r(u) + 0.5 * ||u - v||^2``, the function the theta prox minimises."""
    d = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return alpha * reg.value(u) + 0.5 * float(d @ d)
