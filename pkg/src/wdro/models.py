"""Differentiable predictive models with hand-written backpropagation.

Three kinds are supported: squared-error linear regression, multinomial
logistic regression and a fully connected MLP with a softmax/cross-entropy
head. Every model exposes its loss, the batch-mean parameter gradient and the
per-sample *input* gradient, the latter being what the inner maximisation and
the attacks differentiate through.

Parameters live in one flat float64 vector. Layout is layer-major; inside a
layer the weight matrix (``out x in``, row-major) comes before the bias
vector (``out``). Linear and logistic models are a single such layer.

The regulariser is deliberately absent here: it is applied only through the
proximal step in :mod:`wdro.prox`.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import STREAM_INIT, DimensionError, SeededRng

KINDS = ("linear-regression", "logistic", "mlp")
ACTIVATIONS = ("relu", "softplus", "tanh")
INIT_SCALE = 0.05


@dataclass(frozen=True)
class Datum:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 2
    hidden_dims: tuple[int, ...] = field(default_factory=tuple)
    activation: str = "softplus"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim <= 0 or self.num_classes <= 0 or any(h <= 0 for h in self.hidden_dims):
            raise ValueError("model dimensions must be positive")
        if self.kind == "linear-regression" and self.num_classes != 1:
            raise ValueError("linear-regression has a single real output; set num_classes=1")
        if self.kind == "logistic" and self.num_classes < 2:
            raise ValueError("logistic needs at least two classes")
        if self.kind != "mlp" and self.hidden_dims:
            raise ValueError("hidden_dims only apply to kind='mlp'")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    # -- parameters -------------------------------------------------------

    def unflatten(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        layers, k = [], 0
        for o, i in self.layer_dims:
            w = theta[k:k + o * i].reshape(o, i)
            k += o * i
            b = theta[k:k + o]
            k += o
            layers.append((w, b))
        return layers

    def init_params(self, seed: int) -> np.ndarray:
        rng = SeededRng(seed, STREAM_INIT)
        return rng.uniform(-INIT_SCALE, INIT_SCALE, self.n_params)

    # -- evaluation -------------------------------------------------------

    def _check_inputs(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"inputs must have shape (n, {self.input_dim}), got {x.shape}")
        return x

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "softplus":
            return np.logaddexp(0.0, z)
        return np.tanh(z)

    def _act_grad(self, z, a):
        if self.activation == "relu":
            return (z > 0).astype(np.float64)
        if self.activation == "softplus":
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        return 1.0 - a * a

    def _forward(self, theta, x):
        layers = self.unflatten(theta)
        acts, pre = [x], []
        a = x
        for li, (w, b) in enumerate(layers):
            z = a @ w.T + b
            pre.append(z)
            a = z if li == len(layers) - 1 else self._act(z)
            acts.append(a)
        return layers, pre, acts

    def scores(self, theta, x) -> np.ndarray:
        """Class logits (classifiers) or the real prediction, shape (n, outputs)."""
        x = self._check_inputs(x)
        return self._forward(theta, x)[2][-1]

    def evaluate(self, theta, x, y, *, want_params: bool = True, want_input: bool = True):
        """Per-sample losses plus the requested gradients.

        Returns ``(losses, grad_params, grad_input)`` where ``grad_params`` is
        the batch mean of the parameter gradient and ``grad_input`` has one row
        per sample. Gradients not requested come back as ``None``.
        """
        x = self._check_inputs(x)
        y = np.asarray(y)
        n = x.shape[0]
        if y.shape != (n,):
            raise DimensionError(f"expected {n} targets, got shape {y.shape}")
        layers, pre, acts = self._forward(theta, x)
        out = acts[-1]
        if self.is_classifier:
            labels = y.astype(np.intp)
            if np.any(labels < 0) or np.any(labels >= self.num_classes):
                raise ValueError("label out of range")
            m = out.max(axis=1, keepdims=True)
            e = np.exp(out - m)
            s = e.sum(axis=1, keepdims=True)
            logz = (m + np.log(s))[:, 0]
            rows = np.arange(n)
            losses = logz - out[rows, labels]
            delta = e / s
            delta[rows, labels] -= 1.0
        else:
            r = out[:, 0] - y.astype(np.float64)
            losses = r * r
            delta = (2.0 * r)[:, None]
        if not (want_params or want_input):
            return losses, None, None

        grads = [] if want_params else None
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            if want_params:
                grads.append(((delta.T @ acts[li]) / n, delta.sum(axis=0) / n))
            if li == 0 and not want_input:
                break
            back = delta @ w
            if li > 0:
                delta = back * self._act_grad(pre[li - 1], acts[li])
        grad_params = None
        if want_params:
            grad_params = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
        grad_input = back if want_input else None
        return losses, grad_params, grad_input

    def losses(self, theta, x, y) -> np.ndarray:
        return self.evaluate(theta, x, y, want_params=False, want_input=False)[0]

    def predict(self, theta, x) -> np.ndarray:
        s = self.scores(theta, x)
        if not self.is_classifier:
            return s[:, 0]
        # argmax returns the first maximal index: ties go to the lowest class
        return np.argmax(s, axis=1)


# -- single-datum / batch API ------------------------------------------------


def _stack(batch):
    xs = np.stack([np.asarray(z.x, dtype=np.float64) for z in batch])
    ys = np.array([z.y for z in batch])
    return xs, ys


def loss(spec: ModelSpec, params, z: Datum) -> float:
    return float(spec.losses(params, np.asarray(z.x, dtype=np.float64)[None, :], np.array([z.y]))[0])


def grad_params(spec: ModelSpec, params, batch) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("empty batch")
    x, y = _stack(batch)
    return spec.evaluate(params, x, y, want_input=False)[1]


def grad_input(spec: ModelSpec, params, z: Datum) -> np.ndarray:
    x = np.asarray(z.x, dtype=np.float64)[None, :]
    return spec.evaluate(params, x, np.array([z.y]), want_params=False)[2][0]


def predict(spec: ModelSpec, params, x):
    p = spec.predict(params, np.asarray(x, dtype=np.float64)[None, :])[0]
    return int(p) if spec.is_classifier else float(p)


def misclassification_rate(spec: ModelSpec, params, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("misclassification rate of an empty set is undefined")
    if not spec.is_classifier:
        raise ValueError("misclassification rate needs a classifier")
    return float(np.mean(spec.predict(params, x) != np.asarray(y)))


# -- checkpoints ---------------------------------------------------------------
#
# Little-endian layout:
#   0   8 bytes  magic b"WDROCKPT"
#   8   u32      format version (1)
#   12  u32      reserved, 0
#   16  32 bytes SHA-256 of the ModelSpec canonical JSON
#   48  u64      number of parameters d
#   56  f64      dual variable gamma (NaN when the model has none)
#   64  d * f64  parameters in canonical layout

CKPT_MAGIC = b"WDROCKPT"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sII32sQd")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, spec: ModelSpec, params, gamma: float = float("nan")) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    if params.shape != (spec.n_params,):
        raise DimensionError("parameter vector does not match the model spec")
    header = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, spec.digest(), params.size, gamma)
    Path(path).write_bytes(header + params.tobytes())


def load_checkpoint(path, spec: ModelSpec) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, _, digest, dim, gamma = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    if digest != spec.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different model spec")
    if dim != spec.n_params or len(raw) != _HEADER.size + 8 * dim:
        raise CheckpointError(f"{path}: expected {spec.n_params} parameters")
    params = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return params, gamma
