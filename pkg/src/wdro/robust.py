"""Wasserstein-dual surrogate loss and its inner maximisation.

For a datum ``z = (x, y)`` and perturbed features ``zeta`` the perturbed loss is

    psi(theta, gamma, zeta; z) = loss(theta; (zeta, y)) + gamma * (rho - ||x - zeta||^2)

The robust objective takes ``sup`` over ``zeta`` per sample. Two inner
solvers are provided: a certified gradient-ascent oracle, and the single
ascent step from ``zeta = x`` used by the descent-ascent trainers. Both are
vectorised over a batch; the single-datum functions wrap them.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .models import Datum, ModelSpec
from .prox import AugmentedParams
from .tensor import DimensionError, SeededRng

BOX_LO, BOX_HI = -1.0, 1.0


@dataclass(frozen=True)
class RobustConfig:
    rho: float = 25.0
    gamma0: float = 1.0
    eta: float = 0.02
    oracle_eps: float = 1e-6
    oracle_max_iters: int = 1000
    # ascent step used by the oracle; defaults to eta
    oracle_step: float | None = None
    # user estimate of the input-curvature constant of the loss
    lzz_estimate: float = 0.0
    # project perturbations onto [-1, 1]^d
    box: bool = False

    def __post_init__(self):
        for name in ("rho", "gamma0", "oracle_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if self.oracle_max_iters < 1:
            raise ValueError("oracle_max_iters must be >= 1")
        if self.oracle_step is not None and not self.oracle_step > 0:
            raise ValueError("oracle_step must be > 0")
        if not self.lzz_estimate >= 0:
            raise ValueError("lzz_estimate must be >= 0")

    @property
    def strong_concavity(self) -> float:
        """Lower bound on the concavity modulus of psi in zeta over gamma >= gamma0."""
        return 2.0 * self.gamma0 - self.lzz_estimate

    @property
    def ascent_step(self) -> float:
        return self.eta if self.oracle_step is None else self.oracle_step


@dataclass(frozen=True)
class GradientPair:
    d_theta: np.ndarray
    d_gamma: float


@dataclass(frozen=True)
class PerturbedDatum:
    zeta: np.ndarray
    base: Datum
    psi_value: float
    certificate: float


@dataclass
class PerturbedBatch:
    zeta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    certificate: np.ndarray
    iterations: np.ndarray

    def datum(self, i: int) -> PerturbedDatum:
        return PerturbedDatum(self.zeta[i], Datum(self.x[i], self.y[i]), float(self.psi[i]), float(self.certificate[i]))


class OracleError(RuntimeError):
    """The inner ascent did not reach the requested accuracy."""

    def __init__(self, residual: float, index: int, iterations: int):
        super().__init__(
            f"inner maximisation not certified after {iterations} iterations "
            f"(sample {index}: certificate {residual:.3e})"
        )
        self.residual = residual
        self.index = index
        self.iterations = iterations


def transport_cost(z, zeta) -> float:
    z, zeta = np.asarray(z, dtype=np.float64), np.asarray(zeta, dtype=np.float64)
    if z.shape != zeta.shape:
        raise DimensionError(f"shape mismatch {z.shape} vs {zeta.shape}")
    d = z - zeta
    return float(d @ d)


def transport_costs(x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    if x.shape != zeta.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {zeta.shape}")
    d = x - zeta
    return np.einsum("ij,ij->i", d, d)


def _psi_grad(spec: ModelSpec, theta, gamma, zeta, x, y, rho):
    """psi per sample and its gradient in zeta."""
    losses, _, gx = spec.evaluate(theta, zeta, y, want_params=False)
    diff = zeta - x
    psi = losses + gamma * (rho - np.einsum("ij,ij->i", diff, diff))
    return psi, gx - 2.0 * gamma * diff


def psi_batch(spec: ModelSpec, aug: AugmentedParams, zeta, x, y, cfg: RobustConfig) -> np.ndarray:
    zeta, x = np.asarray(zeta, dtype=np.float64), np.asarray(x, dtype=np.float64)
    return spec.losses(aug.theta, zeta, y) + aug.gamma * (cfg.rho - transport_costs(x, zeta))


def psi(spec: ModelSpec, aug: AugmentedParams, zeta, z: Datum, cfg: RobustConfig) -> float:
    zeta = np.asarray(zeta, dtype=np.float64)[None, :]
    x = np.asarray(z.x, dtype=np.float64)[None, :]
    return float(psi_batch(spec, aug, zeta, x, np.array([z.y]), cfg)[0])


def suboptimality_bound(grad: np.ndarray, zeta: np.ndarray, lam: float, box: bool) -> np.ndarray:
    """Upper bound on ``max psi - psi(zeta)`` from lam-strong concavity.

    Strong concavity gives ``psi(u) <= psi(zeta) + <g, u - zeta> - lam/2 ||u - zeta||^2``;
    maximising the right side over the feasible set is separable per
    coordinate. Without the box this is ``||g||^2 / (2 lam)``.
    """
    if not box:
        return np.einsum("ij,ij->i", grad, grad) / (2.0 * lam)
    step = np.clip(grad / lam, BOX_LO - zeta, BOX_HI - zeta)
    return np.sum(grad * step - 0.5 * lam * step * step, axis=1)


def inner_max_oracle_batch(spec: ModelSpec, aug: AugmentedParams, x, y, cfg: RobustConfig,
                           trace: list | None = None) -> PerturbedBatch:
    """Certified gradient ascent on psi, one independent problem per row of ``x``.

    Each row starts at ``zeta = x`` and takes constant steps of size
    ``cfg.ascent_step`` until its certificate drops to ``cfg.oracle_eps``.
    Rows that converge are frozen. If ``trace`` is given, the psi vector after
    every sweep is appended to it.
    """
    lam = cfg.strong_concavity
    if not lam > 0:
        raise ValueError(
            f"gamma0={cfg.gamma0} is too small for lzz_estimate={cfg.lzz_estimate}: "
            "the inner problem is not certifiably strongly concave"
        )
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    zeta = x.copy()
    if cfg.box:
        zeta = np.clip(zeta, BOX_LO, BOX_HI)
    step = cfg.ascent_step
    val, grad = _psi_grad(spec, aug.theta, aug.gamma, zeta, x, y, cfg.rho)
    cert = suboptimality_bound(grad, zeta, lam, cfg.box)
    iters = np.zeros(x.shape[0], dtype=np.int64)
    if trace is not None:
        trace.append(val.copy())
    for _ in range(cfg.oracle_max_iters):
        active = np.flatnonzero(cert > cfg.oracle_eps)
        if active.size == 0:
            break
        za = zeta[active] + step * grad[active]
        if cfg.box:
            za = np.clip(za, BOX_LO, BOX_HI)
        zeta[active] = za
        va, ga = _psi_grad(spec, aug.theta, aug.gamma, za, x[active], y[active], cfg.rho)
        val[active], grad[active] = va, ga
        cert[active] = suboptimality_bound(ga, za, lam, cfg.box)
        iters[active] += 1
        if trace is not None:
            trace.append(val.copy())
    bad = np.flatnonzero(cert > cfg.oracle_eps)
    if bad.size:
        worst = bad[np.argmax(cert[bad])]
        raise OracleError(float(cert[worst]), int(worst), int(iters[worst]))
    return PerturbedBatch(zeta, x, y, val, cert, iters)


def inner_max_oracle(spec: ModelSpec, aug: AugmentedParams, z: Datum, cfg: RobustConfig) -> PerturbedDatum:
    x = np.asarray(z.x, dtype=np.float64)[None, :]
    return inner_max_oracle_batch(spec, aug, x, np.array([z.y]), cfg).datum(0)


def inner_single_ascent_batch(spec: ModelSpec, aug: AugmentedParams, x, y, cfg: RobustConfig) -> PerturbedBatch:
    """One ascent step of size ``cfg.eta`` on psi from ``zeta = x``.

    The transport-cost gradient vanishes at ``zeta = x``, so this is
    ``x + eta * grad_x loss``. No certificate is produced (``inf``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    _, grad = _psi_grad(spec, aug.theta, aug.gamma, x, x, y, cfg.rho)
    zeta = x + cfg.eta * grad
    if cfg.box:
        zeta = np.clip(zeta, BOX_LO, BOX_HI)
    vals = psi_batch(spec, aug, zeta, x, y, cfg)
    n = x.shape[0]
    return PerturbedBatch(zeta, x, y, vals, np.full(n, np.inf), np.ones(n, dtype=np.int64))


def inner_single_ascent(spec: ModelSpec, aug: AugmentedParams, z: Datum, cfg: RobustConfig) -> PerturbedDatum:
    x = np.asarray(z.x, dtype=np.float64)[None, :]
    return inner_single_ascent_batch(spec, aug, x, np.array([z.y]), cfg).datum(0)


def danskin_gradient_batch(spec: ModelSpec, aug: AugmentedParams, pert: PerturbedBatch,
                           cfg: RobustConfig) -> GradientPair:
    """Batch-mean gradient of psi in (theta, gamma) with zeta held fixed."""
    _, g_theta, _ = spec.evaluate(aug.theta, pert.zeta, pert.y, want_input=False)
    d_gamma = cfg.rho - float(np.mean(transport_costs(pert.x, pert.zeta)))
    return GradientPair(g_theta, d_gamma)


def danskin_gradient(spec: ModelSpec, aug: AugmentedParams, pert: PerturbedDatum, cfg: RobustConfig) -> GradientPair:
    batch = PerturbedBatch(
        pert.zeta[None, :], np.asarray(pert.base.x, dtype=np.float64)[None, :], np.array([pert.base.y]),
        np.array([pert.psi_value]), np.array([pert.certificate]), np.ones(1, dtype=np.int64),
    )
    return danskin_gradient_batch(spec, aug, batch, cfg)


def robust_gradient(spec: ModelSpec, aug: AugmentedParams, x, y, cfg: RobustConfig,
                    inner: str = "single") -> tuple[GradientPair, PerturbedBatch]:
    if inner == "single":
        pert = inner_single_ascent_batch(spec, aug, x, y, cfg)
    elif inner == "oracle":
        pert = inner_max_oracle_batch(spec, aug, x, y, cfg)
    else:
        raise ValueError(f"unknown inner solver {inner!r}")
    return danskin_gradient_batch(spec, aug, pert, cfg), pert


def estimate_lzz(spec: ModelSpec, theta, x, y, *, n_dirs: int = 8, h: float = 1e-4, seed: int = 0) -> float:
    """Largest sampled input curvature ``|d^T H_x d|`` over random unit directions.

    Uses central differences of the input gradient, so it is a lower
    estimate of the true constant; treat it as a sanity check.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = SeededRng(seed)
    best = 0.0
    for _ in range(n_dirs):
        d = rng.normal(x.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        gp = spec.evaluate(theta, x + h * d, y, want_params=False)[2]
        gm = spec.evaluate(theta, x - h * d, y, want_params=False)[2]
        curv = np.abs(np.einsum("ij,ij->i", gp - gm, d)) / (2.0 * h)
        best = max(best, float(curv.max()))
    return best


def check_gamma0(cfg: RobustConfig, lzz: float) -> bool:
    """Warn and return False when ``gamma0`` looks too small for curvature ``lzz``."""
    if 2.0 * cfg.gamma0 <= lzz:
        warnings.warn(
            f"gamma0={cfg.gamma0} may be too small: estimated input curvature {lzz:.3g} "
            f"needs gamma0 > {lzz / 2:.3g} for a strongly concave inner problem",
            RuntimeWarning,
            stacklevel=2,
        )
        return False
    return True


def with_gamma0(cfg: RobustConfig, gamma0: float) -> RobustConfig:
    return replace(cfg, gamma0=gamma0)
