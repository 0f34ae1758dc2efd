"""Outer training loops: robust SPGD/SPGDA and the ERM baselines."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .models import ModelSpec, misclassification_rate
from .prox import AugmentedParams, RegularizerSpec, prox_step, prox_theta
from .robust import OracleError, RobustConfig, inner_max_oracle_batch, robust_gradient, danskin_gradient_batch
from .tensor import STREAM_BATCH, STREAM_PROBE, SeededRng

ALGORITHMS = ("spgd-oracle", "spgda", "erm-sgd", "erm-adam")


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "spgda"
    alpha: float = 1e-3
    iterations: int = 1000
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 100
    # samples used for the gradient-mapping diagnostic: None = whole
    # training set, 0 = diagnostic off
    probe_size: int | None = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class MetricRecord:
    iteration: int
    train_loss: float
    objective: float
    error: float
    attacked_error: float
    grad_map_norm: float
    oracle_iters: float
    gamma: float
    wall_ms: float


CSV_COLUMNS = [f.name for f in fields(MetricRecord) if f.name != "wall_ms"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class RunMetrics:
    records: list[MetricRecord] = field(default_factory=list)
    # per-iteration batch values, for trend checks
    loss_trace: list[float] = field(default_factory=list)
    objective_trace: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self, path, *, include_wall: bool = False) -> None:
        """One row per record. Wall time is left out by default so reruns are byte-identical."""
        cols = CSV_COLUMNS + (["wall_ms"] if include_wall else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([_fmt(getattr(r, c)) for c in cols])

    def to_json(self, path) -> None:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        payload = {
            "records": [{k: clean(v) for k, v in asdict(r).items()} for r in self.records],
            "loss_trace": [clean(v) for v in self.loss_trace],
            "objective_trace": [clean(v) for v in self.objective_trace],
        }
        Path(path).write_text(json.dumps(payload, indent=1))


def gradient_mapping(reg: RegularizerSpec, aug: AugmentedParams, d_theta, d_gamma: float,
                     alpha: float, gamma0: float) -> np.ndarray:
    """``(theta_bar - prox(theta_bar - alpha * g)) / alpha`` as one vector."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    nxt = prox_step(reg, aug.theta - alpha * d_theta, aug.gamma - alpha * d_gamma, alpha, gamma0)
    return np.concatenate([(aug.theta - nxt.theta) / alpha, [(aug.gamma - nxt.gamma) / alpha]])


def gradient_mapping_norm(spec: ModelSpec, reg: RegularizerSpec, robust_cfg: RobustConfig,
                          aug: AugmentedParams, x, y, alpha: float) -> float:
    """Stationarity diagnostic with the gradient taken at oracle-solved perturbations."""
    pert = inner_max_oracle_batch(spec, aug, x, y, robust_cfg)
    g = danskin_gradient_batch(spec, aug, pert, robust_cfg)
    return float(np.linalg.norm(gradient_mapping(reg, aug, g.d_theta, g.d_gamma, alpha, robust_cfg.gamma0)))


def erm_gradient_mapping_norm(spec: ModelSpec, reg: RegularizerSpec, theta, x, y, alpha: float) -> float:
    g = spec.evaluate(theta, x, y, want_input=False)[1]
    return float(np.linalg.norm((theta - prox_theta(reg, theta - alpha * g, alpha)) / alpha))


class _Recorder:
    def __init__(self, spec, reg, tcfg: TrainConfig, x, y, eval_set):
        self.spec, self.reg, self.tcfg = spec, reg, tcfg
        self.eval_set = eval_set
        self.metrics = RunMetrics()
        self.t0 = time.perf_counter()
        if tcfg.probe_size == 0:
            self.probe = None
        elif tcfg.probe_size is None or tcfg.probe_size >= x.shape[0]:
            self.probe = (x, y)
        else:
            idx = np.sort(SeededRng(tcfg.seed, STREAM_PROBE).batch_indices(x.shape[0], tcfg.probe_size))
            self.probe = (x[idx], y[idx])
        self._loss_acc, self._obj_acc, self._orc_acc = [], [], []

    def step(self, loss: float, objective: float, oracle_iters: float = math.nan):
        self.metrics.loss_trace.append(loss)
        self.metrics.objective_trace.append(objective)
        self._loss_acc.append(loss)
        self._obj_acc.append(objective)
        self._orc_acc.append(oracle_iters)

    def due(self, t: int) -> bool:
        return t % self.tcfg.eval_every == 0 or t == self.tcfg.iterations

    def record(self, t: int, theta, gamma: float, grad_map: Callable[[tuple], float]):
        err = math.nan
        if self.eval_set is not None:
            ex, ey = self.eval_set
            if self.spec.is_classifier:
                err = misclassification_rate(self.spec, theta, ex, ey)
            else:
                err = float(np.mean(self.spec.losses(theta, ex, ey)))
        gm = grad_map(self.probe) if self.probe is not None else math.nan
        mean = lambda v: float(np.mean(v)) if v else math.nan  # noqa: E731
        self.metrics.records.append(MetricRecord(
            iteration=t,
            train_loss=mean(self._loss_acc),
            objective=mean(self._obj_acc),
            error=err,
            attacked_error=math.nan,
            grad_map_norm=gm,
            oracle_iters=mean(self._orc_acc),
            gamma=float(gamma),
            wall_ms=(time.perf_counter() - self.t0) * 1e3,
        ))
        self._loss_acc, self._obj_acc, self._orc_acc = [], [], []


def _as_arrays(data):
    if hasattr(data, "x") and hasattr(data, "y"):
        return np.asarray(data.x, dtype=np.float64), np.asarray(data.y)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def _check_finite(t: int, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite gradient at iteration {t}")


def init_augmented(spec: ModelSpec, robust_cfg: RobustConfig, seed: int) -> AugmentedParams:
    # gamma starts strictly inside {gamma >= gamma0}
    return AugmentedParams(spec.init_params(seed), 2.0 * robust_cfg.gamma0)


def robust_step(spec: ModelSpec, reg: RegularizerSpec, robust_cfg: RobustConfig, aug: AugmentedParams,
                x, y, alpha: float, inner: str):
    """One prox-gradient step on theta_bar from the batch ``(x, y)``."""
    g, pert = robust_gradient(spec, aug, x, y, robust_cfg, inner)
    nxt = prox_step(reg, aug.theta - alpha * g.d_theta, aug.gamma - alpha * g.d_gamma, alpha, robust_cfg.gamma0)
    return nxt, g, pert


def _start(spec, robust_cfg, seed, init) -> AugmentedParams:
    if init is None:
        return init_augmented(spec, robust_cfg, seed)
    if isinstance(init, AugmentedParams):
        theta, gamma = init.theta, init.gamma
    else:
        theta, gamma = init, 2.0 * robust_cfg.gamma0
    theta = np.array(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"initial parameters must have shape ({spec.n_params},)")
    if not gamma >= robust_cfg.gamma0:
        raise ValueError(f"initial gamma {gamma} is below gamma0 = {robust_cfg.gamma0}")
    return AugmentedParams(theta, float(gamma))


def _train_robust(spec, reg, robust_cfg, train_cfg, data, eval_data, inner, callback, init):
    x, y = _as_arrays(data)
    if x.shape[0] == 0:
        raise ValueError("training data is empty")
    eval_set = _as_arrays(eval_data) if eval_data is not None else None
    aug = _start(spec, robust_cfg, train_cfg.seed, init)
    rng = SeededRng(train_cfg.seed, STREAM_BATCH)
    rec = _Recorder(spec, reg, train_cfg, x, y, eval_set)
    alpha = train_cfg.alpha

    def gmap(probe):
        return gradient_mapping_norm(spec, reg, robust_cfg, aug, probe[0], probe[1], alpha)

    rec.record(0, aug.theta, aug.gamma, gmap)
    for t in range(1, train_cfg.iterations + 1):
        idx = rng.batch_indices(x.shape[0], train_cfg.batch_size)
        try:
            nxt, g, pert = robust_step(spec, reg, robust_cfg, aug, x[idx], y[idx], alpha, inner)
        except OracleError as err:
            err.iteration = t
            err.args = (f"iteration {t}: {err.args[0]}",)
            raise
        _check_finite(t, g.d_theta, g.d_gamma)
        mean_psi = float(np.mean(pert.psi))
        # mean psi = mean loss(zeta) + gamma * d_gamma
        rec.step(mean_psi - aug.gamma * g.d_gamma, mean_psi + reg.value(aug.theta),
                 float(np.mean(pert.iterations)) if inner == "oracle" else math.nan)
        aug = nxt
        if callback is not None:
            callback(t, aug)
        if rec.due(t):
            rec.record(t, aug.theta, aug.gamma, gmap)
    return aug, rec.metrics


def train_spgd_oracle(spec: ModelSpec, reg: RegularizerSpec, robust_cfg: RobustConfig, train_cfg: TrainConfig,
                      data, eval_data=None, callback=None, init=None) -> tuple[AugmentedParams, RunMetrics]:
    """Stochastic prox-gradient descent with the certified inner oracle.

    ``init`` (parameters or AugmentedParams) replaces the seeded initialisation.
    """
    return _train_robust(spec, reg, robust_cfg, train_cfg, data, eval_data, "oracle", callback, init)


def train_spgda(spec: ModelSpec, reg: RegularizerSpec, robust_cfg: RobustConfig, train_cfg: TrainConfig,
                data, eval_data=None, callback=None, init=None) -> tuple[AugmentedParams, RunMetrics]:
    """Stochastic prox-gradient descent-ascent: one inner ascent step per sample."""
    return _train_robust(spec, reg, robust_cfg, train_cfg, data, eval_data, "single", callback, init)


def train_erm(spec: ModelSpec, reg: RegularizerSpec, train_cfg: TrainConfig, data, eval_data=None,
              callback=None, init=None) -> tuple[np.ndarray, RunMetrics]:
    """Empirical risk minimisation by prox-SGD (``erm-sgd``) or Adam followed by the prox (``erm-adam``)."""
    x, y = _as_arrays(data)
    if x.shape[0] == 0:
        raise ValueError("training data is empty")
    eval_set = _as_arrays(eval_data) if eval_data is not None else None
    theta = spec.init_params(train_cfg.seed) if init is None else np.array(init, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"initial parameters must have shape ({spec.n_params},)")
    rng = SeededRng(train_cfg.seed, STREAM_BATCH)
    rec = _Recorder(spec, reg, train_cfg, x, y, eval_set)
    alpha = train_cfg.alpha
    adam = train_cfg.algorithm == "erm-adam"
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = train_cfg.adam_beta1, train_cfg.adam_beta2

    def gmap(probe):
        return erm_gradient_mapping_norm(spec, reg, theta, probe[0], probe[1], alpha)

    rec.record(0, theta, math.nan, gmap)
    for t in range(1, train_cfg.iterations + 1):
        idx = rng.batch_indices(x.shape[0], train_cfg.batch_size)
        losses, g, _ = spec.evaluate(theta, x[idx], y[idx], want_input=False)
        _check_finite(t, g)
        if adam:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            direction = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + train_cfg.adam_eps)
        else:
            direction = g
        loss = float(np.mean(losses))
        rec.step(loss, loss + reg.value(theta))
        theta = prox_theta(reg, theta - alpha * direction, alpha)
        if callback is not None:
            callback(t, theta)
        if rec.due(t):
            rec.record(t, theta, math.nan, gmap)
    return theta, rec.metrics


def train(spec: ModelSpec, reg: RegularizerSpec, robust_cfg: RobustConfig, train_cfg: TrainConfig,
          data, eval_data=None, callback=None, init=None) -> tuple[AugmentedParams, RunMetrics]:
    """Dispatch on ``train_cfg.algorithm``; ERM results come back with ``gamma = nan``."""
    if train_cfg.algorithm == "spgd-oracle":
        return train_spgd_oracle(spec, reg, robust_cfg, train_cfg, data, eval_data, callback, init)
    if train_cfg.algorithm == "spgda":
        return train_spgda(spec, reg, robust_cfg, train_cfg, data, eval_data, callback, init)
    if isinstance(init, AugmentedParams):
        init = init.theta
    theta, metrics = train_erm(spec, reg, train_cfg, data, eval_data, callback, init)
    return AugmentedParams(theta, math.nan), metrics
