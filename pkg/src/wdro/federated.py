"""In-process simulation of distributionally robust federated learning (DRFL) and FedAvg.

A round is: the server broadcasts ``theta_bar``; every worker draws a local
minibatch, perturbs it with one ascent step and returns the minibatch-mean
gradient of psi; the server averages the K gradients with equal weights
(reduced in worker-id order) and takes a prox-gradient step.

Messages are plain values with a fixed little-endian binary form, so the
simulation is deterministic and a socket transport could carry the same
bytes. Wire layout of every message (36-byte header, then a float64 array):

    offset  type  field
    0       u8    message type (1 broadcast, 2 gradient, 3 model)
    1       u8    format version (1)
    2       u16   reserved, 0
    4       u64   round
    12      u32   worker id (0xFFFFFFFF for broadcasts)
    16      u32   batch size used / local sample count (0 for broadcasts)
    20      u64   vector length d
    28      f64   gamma (broadcast), d_gamma (gradient) or NaN (model)
    36      d*f64 theta (broadcast, model) or d_theta (gradient)
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, evaluate_under_attack
from .data import Dataset
from .models import ModelSpec, misclassification_rate
from .optim import MetricRecord, RunMetrics, init_augmented
from .prox import AugmentedParams, RegularizerSpec, prox_step, prox_theta
from .robust import GradientPair, RobustConfig, robust_gradient
from .tensor import STREAM_BATCH, STREAM_PARTITION, SeededRng

WIRE_VERSION = 1
_HEADER = struct.Struct("<BBHQIIQd")
MSG_BROADCAST, MSG_GRADIENT, MSG_MODEL = 1, 2, 3
NO_WORKER = 0xFFFFFFFF


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    num_workers: int = 10
    rounds: int = 50
    local_batch: int = 64
    partition: str = "iid"
    participation: float = 1.0
    algorithm: str = "drfl"
    alpha: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    # FedAvg: local SGD epochs per round
    local_epochs: int = 1
    threads: int = 1
    robust: RobustConfig = field(default_factory=RobustConfig)
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.local_batch < 1:
            raise ValueError("local_batch must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.partition not in ("iid", "single-class"):
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.participation != 1.0:
            raise ValueError("only full participation (1.0) is supported")
        if self.algorithm not in ("drfl", "fedavg"):
            raise ValueError(f"unknown federated algorithm {self.algorithm!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.local_epochs < 1 or self.eval_every < 1 or self.threads < 1:
            raise ValueError("local_epochs, eval_every and threads must be >= 1")


# -- messages ----------------------------------------------------------------------


def _pack(kind, rnd, worker, count, scalar, vec) -> bytes:
    vec = np.ascontiguousarray(vec, dtype="<f8")
    return _HEADER.pack(kind, WIRE_VERSION, 0, rnd, worker, count, vec.size, scalar) + vec.tobytes()


def _unpack(raw: bytes, expect: int):
    if len(raw) < _HEADER.size:
        raise ProtocolError("truncated message header")
    kind, version, _, rnd, worker, count, d, scalar = _HEADER.unpack_from(raw)
    if kind != expect or version != WIRE_VERSION:
        raise ProtocolError(f"unexpected message type {kind} (version {version})")
    if len(raw) != _HEADER.size + 8 * d:
        raise ProtocolError("message length does not match its vector length")
    vec = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return rnd, worker, count, scalar, vec


@dataclass(frozen=True)
class BroadcastMsg:
    round: int
    aug: AugmentedParams

    def to_bytes(self) -> bytes:
        return _pack(MSG_BROADCAST, self.round, NO_WORKER, 0, self.aug.gamma, self.aug.theta)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BroadcastMsg":
        rnd, _, _, gamma, theta = _unpack(raw, MSG_BROADCAST)
        return cls(rnd, AugmentedParams(theta, gamma))


@dataclass(frozen=True)
class GradientMsg:
    round: int
    worker_id: int
    grad: GradientPair
    batch_size_used: int

    def to_bytes(self) -> bytes:
        return _pack(MSG_GRADIENT, self.round, self.worker_id, self.batch_size_used,
                     self.grad.d_gamma, self.grad.d_theta)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GradientMsg":
        rnd, worker, count, d_gamma, d_theta = _unpack(raw, MSG_GRADIENT)
        return cls(rnd, worker, GradientPair(d_theta, d_gamma), count)


@dataclass(frozen=True)
class ModelMsg:
    """FedAvg upload: locally trained weights."""

    round: int
    worker_id: int
    theta: np.ndarray
    num_samples: int

    def to_bytes(self) -> bytes:
        return _pack(MSG_MODEL, self.round, self.worker_id, self.num_samples, math.nan, self.theta)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelMsg":
        rnd, worker, count, _, theta = _unpack(raw, MSG_MODEL)
        return cls(rnd, worker, theta, count)


# -- partitioning ------------------------------------------------------------------


def partition(data: Dataset, num_workers: int, mode: str = "iid", seed: int = 0) -> list[Dataset]:
    """Split ``data`` into disjoint shards that cover it.

    ``iid``: seeded shuffle, then near-equal contiguous split; each shard keeps
    the original relative order, so one worker gets the dataset unchanged.
    ``single-class``: class ``c`` goes to worker ``c mod K``. With fewer
    classes than workers, classes are reused round-robin and a class's
    samples are split between the workers sharing it.
    """
    n = len(data)
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    if mode == "iid":
        if n < num_workers:
            raise ValueError(f"{n} samples cannot fill {num_workers} shards")
        perm = SeededRng(seed, STREAM_PARTITION).permutation(n)
        chunks = [np.sort(c) for c in np.array_split(perm, num_workers)]
    elif mode == "single-class":
        classes = data.num_classes
        labels = data.y.astype(np.int64)
        if classes >= num_workers:
            chunks = [np.flatnonzero(labels % num_workers == k) for k in range(num_workers)]
        else:
            chunks = []
            for k in range(num_workers):
                c = k % classes
                sharers = list(range(c, num_workers, classes))
                idx = np.flatnonzero(labels == c)
                chunks.append(np.array_split(idx, len(sharers))[sharers.index(k)])
        for k, c in enumerate(chunks):
            if c.size == 0:
                raise ValueError(f"worker {k} would receive no samples: its class is empty")
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [data.take(c, f"{data.provenance}|shard{k}/{num_workers}") for k, c in enumerate(chunks)]


# -- workers and server --------------------------------------------------------------


@dataclass
class WorkerState:
    worker_id: int
    x: np.ndarray
    y: np.ndarray
    rng: SeededRng

    @classmethod
    def from_shard(cls, worker_id: int, shard: Dataset, global_seed: int) -> "WorkerState":
        return cls(worker_id, shard.x, shard.y, SeededRng(global_seed ^ worker_id, STREAM_BATCH))


def worker_round(state: WorkerState, msg: BroadcastMsg, spec: ModelSpec, cfg: FederationConfig,
                 expected_round: int | None = None) -> GradientMsg:
    """DRFL worker: single-ascent perturbation of a local minibatch, then the mean psi-gradient."""
    if expected_round is not None and msg.round != expected_round:
        raise ProtocolError(f"worker {state.worker_id} got round {msg.round}, expected {expected_round}")
    if state.x.shape[0] == 0:
        raise ValueError(f"worker {state.worker_id} has an empty shard")
    idx = state.rng.batch_indices(state.x.shape[0], cfg.local_batch)
    g, _ = robust_gradient(spec, msg.aug, state.x[idx], state.y[idx], cfg.robust, "single")
    return GradientMsg(msg.round, state.worker_id, g, int(idx.size))


def fedavg_worker_round(state: WorkerState, msg: BroadcastMsg, spec: ModelSpec,
                        cfg: FederationConfig) -> ModelMsg:
    """FedAvg worker: ``local_epochs`` passes of prox-SGD over the shuffled shard."""
    theta = msg.aug.theta.copy()
    n = state.x.shape[0]
    for _ in range(cfg.local_epochs):
        perm = state.rng.permutation(n)
        for s in range(0, n, cfg.local_batch):
            b = perm[s:s + cfg.local_batch]
            g = spec.evaluate(theta, state.x[b], state.y[b], want_input=False)[1]
            theta = prox_theta(cfg.reg, theta - cfg.alpha * g, cfg.alpha)
    return ModelMsg(msg.round, state.worker_id, theta, n)


def _ordered(msgs, num_workers: int, rnd: int | None):
    by_id = {}
    for m in msgs:
        if rnd is not None and m.round != rnd:
            raise ProtocolError(f"worker {m.worker_id} sent a message for round {m.round}, server is at {rnd}")
        if m.worker_id in by_id:
            raise ProtocolError(f"duplicate message from worker {m.worker_id}")
        if not 0 <= m.worker_id < num_workers:
            raise ProtocolError(f"message from unknown worker {m.worker_id}")
        by_id[m.worker_id] = m
    missing = [k for k in range(num_workers) if k not in by_id]
    if missing:
        raise ProtocolError(f"missing message from worker {missing[0]}")
    return [by_id[k] for k in range(num_workers)]


def server_round(aug: AugmentedParams, msgs, cfg: FederationConfig, rnd: int | None = None) -> AugmentedParams:
    """Uniformly average one gradient per worker (worker-id order) and take the prox step."""
    ordered = _ordered(msgs, cfg.num_workers, rnd)
    d_theta = ordered[0].grad.d_theta.copy()
    d_gamma = ordered[0].grad.d_gamma
    for m in ordered[1:]:
        d_theta += m.grad.d_theta
        d_gamma += m.grad.d_gamma
    k = float(cfg.num_workers)
    d_theta /= k
    d_gamma /= k
    if not (np.all(np.isfinite(d_theta)) and math.isfinite(d_gamma)):
        raise FloatingPointError(f"non-finite aggregated gradient in round {rnd}")
    a = cfg.alpha
    return prox_step(cfg.reg, aug.theta - a * d_theta, aug.gamma - a * d_gamma, a, cfg.robust.gamma0)


def fedavg_server_round(aug: AugmentedParams, msgs, cfg: FederationConfig, rnd: int | None = None) -> AugmentedParams:
    ordered = _ordered(msgs, cfg.num_workers, rnd)
    theta = ordered[0].theta.copy()
    for m in ordered[1:]:
        theta += m.theta
    return AugmentedParams(theta / float(cfg.num_workers), aug.gamma)


def run_federation(cfg: FederationConfig, data: Dataset, model_spec: ModelSpec, eval_data: Dataset | None = None,
                   attack: AttackSpec | None = None, callback=None) -> tuple[AugmentedParams, RunMetrics]:
    """Run ``cfg.rounds`` rounds; metrics (clean and optionally attacked error) every ``eval_every`` rounds."""
    shards = partition(data, cfg.num_workers, cfg.partition, cfg.seed)
    workers = [WorkerState.from_shard(k, s, cfg.seed) for k, s in enumerate(shards)]
    aug = init_augmented(model_spec, cfg.robust, cfg.seed)
    if cfg.algorithm == "fedavg":
        aug = AugmentedParams(aug.theta, math.nan)
        work, serve = fedavg_worker_round, fedavg_server_round
    else:
        work, serve = worker_round, server_round
    metrics = RunMetrics()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def record(rnd):
        err = att = math.nan
        if eval_data is not None:
            err = misclassification_rate(model_spec, aug.theta, eval_data.x, eval_data.y)
            if attack is not None:
                att = evaluate_under_attack(model_spec, aug.theta, eval_data.x, eval_data.y, attack, cfg.robust.rho)
        train_loss = float(np.mean(model_spec.losses(aug.theta, data.x, data.y)))
        metrics.records.append(MetricRecord(rnd, train_loss, math.nan, err, att, math.nan, math.nan,
                                            float(aug.gamma), math.nan))

    try:
        record(0)
        for rnd in range(1, cfg.rounds + 1):
            msg = BroadcastMsg(rnd, aug)
            if pool is None:
                replies = [work(w, msg, model_spec, cfg) for w in workers]
            else:
                replies = list(pool.map(lambda w: work(w, msg, model_spec, cfg), workers))
            aug = serve(aug, replies, cfg, rnd)
            if callback is not None:
                callback(rnd, aug)
            if rnd % cfg.eval_every == 0 or rnd == cfg.rounds:
                record(rnd)
    finally:
        if pool is not None:
            pool.shutdown()
    return aug, metrics
