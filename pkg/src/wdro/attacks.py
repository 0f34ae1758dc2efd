"""White-box test-time attacks: FGSM, iterated FGSM, l-inf PGD and the Wasserstein (WRM) attack.

All attacks work on a batch ``(x, y)`` and differentiate the evaluated
model's own loss. Labels are never modified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Datum, ModelSpec, misclassification_rate
from .prox import AugmentedParams
from .robust import RobustConfig, inner_max_oracle_batch

ATTACK_KINDS = ("fgsm", "ifgsm", "pgd", "wrm")
LO, HI = -1.0, 1.0


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    eps_adv: float = 0.1
    steps: int = 10
    step_size: float = 1.0
    wrm_gamma: float = 1.0
    # ifgsm: per-step budget eps/steps (True) or full eps per step kept
    # inside the eps-ball (False)
    split_budget: bool = True
    wrm_step: float = 0.1
    wrm_eps: float = 1e-4
    wrm_max_iters: int = 500

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not self.eps_adv >= 0:
            raise ValueError("eps_adv must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "wrm" and not self.wrm_gamma > 0:
            raise ValueError("wrm_gamma must be > 0")


def _input_grad(spec: ModelSpec, params, x, y) -> np.ndarray:
    return spec.evaluate(params, x, y, want_params=False)[2]


def fgsm_batch(spec: ModelSpec, params, x, y, atk: AttackSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = _input_grad(spec, params, x, y)
    return np.clip(x + atk.eps_adv * np.sign(g), LO, HI)


def ifgsm_batch(spec: ModelSpec, params, x, y, atk: AttackSpec) -> np.ndarray:
    x0 = np.asarray(x, dtype=np.float64)
    step = atk.eps_adv / atk.steps if atk.split_budget else atk.eps_adv
    xa = x0.copy()
    for _ in range(atk.steps):
        xa = xa + step * np.sign(_input_grad(spec, params, xa, y))
        if not atk.split_budget:
            xa = np.clip(xa, x0 - atk.eps_adv, x0 + atk.eps_adv)
        xa = np.clip(xa, LO, HI)
    return xa


def pgd_batch(spec: ModelSpec, params, x, y, atk: AttackSpec) -> np.ndarray:
    """Signed-gradient steps projected onto the l-inf ball around the *original* x, then clipped to [-1, 1]."""
    x0 = np.asarray(x, dtype=np.float64)
    lo, hi = x0 - atk.eps_adv, x0 + atk.eps_adv
    xa = x0.copy()
    for _ in range(atk.steps):
        xa = np.clip(xa + atk.step_size * np.sign(_input_grad(spec, params, xa, y)), lo, hi)
    return np.clip(xa, LO, HI)


def wrm_batch(spec: ModelSpec, params, x, y, atk: AttackSpec, rho: float = 25.0) -> np.ndarray:
    """Maximise ``loss(zeta) - wrm_gamma * ||zeta - x||^2`` over the [-1, 1] box with the certified oracle."""
    cfg = RobustConfig(rho=rho, gamma0=atk.wrm_gamma, eta=atk.wrm_step, oracle_eps=atk.wrm_eps,
                       oracle_max_iters=atk.wrm_max_iters, box=True)
    aug = AugmentedParams(np.asarray(params, dtype=np.float64), atk.wrm_gamma)
    return inner_max_oracle_batch(spec, aug, x, y, cfg).zeta


def attack_batch(spec: ModelSpec, params, x, y, atk: AttackSpec, rho: float = 25.0) -> np.ndarray:
    if atk.kind == "fgsm":
        return fgsm_batch(spec, params, x, y, atk)
    if atk.kind == "ifgsm":
        return ifgsm_batch(spec, params, x, y, atk)
    if atk.kind == "pgd":
        return pgd_batch(spec, params, x, y, atk)
    return wrm_batch(spec, params, x, y, atk, rho)


def _single(fn, spec, params, z: Datum, atk, *extra) -> Datum:
    x = np.asarray(z.x, dtype=np.float64)[None, :]
    return Datum(fn(spec, params, x, np.array([z.y]), atk, *extra)[0], z.y)


def fgsm(spec: ModelSpec, params, z: Datum, atk: AttackSpec) -> Datum:
    return _single(fgsm_batch, spec, params, z, atk)


def ifgsm(spec: ModelSpec, params, z: Datum, atk: AttackSpec) -> Datum:
    return _single(ifgsm_batch, spec, params, z, atk)


def pgd(spec: ModelSpec, params, z: Datum, atk: AttackSpec) -> Datum:
    return _single(pgd_batch, spec, params, z, atk)


def wrm_attack(spec: ModelSpec, params, z: Datum, atk: AttackSpec, rho: float = 25.0) -> Datum:
    return _single(wrm_batch, spec, params, z, atk, rho)


def evaluate_under_attack(spec: ModelSpec, params, x, y, atk: AttackSpec, rho: float = 25.0) -> float:
    """Misclassification rate on white-box adversarial versions of ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty test set")
    return misclassification_rate(spec, params, attack_batch(spec, params, x, y, atk, rho), y)
