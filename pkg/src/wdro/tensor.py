"""Small dense-array kernel shared by the rest of the package.

Vectors and matrices are plain float64 numpy arrays. The helpers here add the
shape and finiteness checks the training code relies on, and pin the random
number generator so runs are reproducible across machines.
"""
from __future__ import annotations

import numpy as np

# numpy's PCG64 is a fixed, documented generator with a platform-independent
# stream for a given SeedSequence.
RNG_ALGORITHM = "PCG64"

# stream identifiers for SeededRng
STREAM_BATCH = 0
STREAM_INIT = 1
STREAM_PROBE = 2
STREAM_PARTITION = 3


class DimensionError(ValueError):
    """Operand shapes do not agree."""


def as_vector(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-d array, got shape {v.shape}")
    return v


def as_matrix(a, name: str = "A") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-d array, got shape {m.shape}")
    return m


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite entries in {what}")
    return x


def _same_length(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x, y) -> np.ndarray:
    x, y = as_vector(x, "x"), as_vector(y, "y")
    _same_length(x, y)
    return check_finite(a * x + y, "axpy result")


def matvec(a, x) -> np.ndarray:
    a, x = as_matrix(a), as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"matrix has {a.shape[1]} columns, vector has length {x.shape[0]}")
    return check_finite(a @ x, "matvec result")


def dot(x, y) -> float:
    x, y = as_vector(x, "x"), as_vector(y, "y")
    _same_length(x, y)
    return float(x @ y)


def norm2(x) -> float:
    return float(np.linalg.norm(as_vector(x)))


def clip_box(x, lo, hi) -> np.ndarray:
    """Elementwise clamp into [lo, hi]; bounds may be scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), x.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), x.shape)
    if np.any(lo > hi):
        raise ValueError("clip_box requires lo <= hi elementwise")
    return np.minimum(np.maximum(x, lo), hi)


def sign(x) -> np.ndarray:
    # np.sign already maps 0 to 0
    return np.sign(np.asarray(x, dtype=np.float64))


class SeededRng:
    """PCG64 generator keyed by ``(seed, stream)``.

    Two instances built from the same pair produce identical streams on every
    platform. Different streams of one seed are statistically independent,
    which lets parameter initialisation and batch sampling share a seed
    without sharing draws.
    """

    def __init__(self, seed: int, stream: int = STREAM_BATCH):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self.algorithm = RNG_ALGORITHM
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def batch_indices(self, n: int, m: int) -> np.ndarray:
        """Draw ``min(m, n)`` distinct indices out of ``range(n)``."""
        if n <= 0:
            raise ValueError("cannot sample from an empty set")
        return self._gen.choice(n, size=min(m, n), replace=False)
