"""Datasets: IDX and CSV ingestion, synthetic generators, normalisation.

Every ingestion path leaves features in ``[-1, 1]``: IDX pixels through the
fixed map ``2 * p / 255 - 1``, everything else through per-column min-max
scaling (constant columns become 0).
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Datum
from .tensor import SeededRng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {x.shape}")
        y = np.asarray(self.y)
        if y.shape != (x.shape[0],):
            raise ValueError("one label per row required")
        if x.size and (x.min() < -1.0 or x.max() > 1.0):
            raise ValueError("features must lie in [-1, 1]")
        if self.num_classes > 0 and y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label out of range")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    @property
    def items(self) -> list[Datum]:
        return [Datum(self.x[i], self.y[i]) for i in range(len(self))]

    def take(self, idx, provenance: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.y[idx], self.num_classes,
                       self.provenance if provenance is None else provenance)


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "two-gaussians"
    n: int = 200
    dim: int = 2
    separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("two-gaussians", "separable-2pt"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.n < 2 or self.dim < 1:
            raise ValueError("synthetic data needs n >= 2 and dim >= 1")


def minmax_scale(x) -> np.ndarray:
    """Per-column affine map onto [-1, 1]; constant columns map to 0.

    Columns already spanning exactly [-1, 1] are left untouched, which makes
    the map idempotent bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    out = np.zeros_like(x)
    keep = (lo == -1.0) & (hi == 1.0)
    scale = (span > 0) & ~keep
    out[:, keep] = x[:, keep]
    out[:, scale] = np.clip(2.0 * (x[:, scale] - lo[scale]) / span[scale] - 1.0, -1.0, 1.0)
    return out


def normalize(ds: Dataset) -> Dataset:
    return Dataset(minmax_scale(ds.x), ds.y, ds.num_classes, ds.provenance)


# -- IDX -------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated header (file has {len(raw)} bytes, need {head} at offset 0)")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise DataFormatError(f"{path}: truncated data at offset {len(raw)}; expected {head + size} bytes")
    if len(raw) - head > size:
        raise DataFormatError(f"{path}: {len(raw) - head - size} trailing bytes after offset {head + size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a flat dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images.shape[0]} images (offset 4 of {images_path}) "
            f"vs {labels.shape[0]} labels (offset 4 of {labels_path})"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) * (2.0 / 255.0) - 1.0
    return Dataset(x, labels.astype(np.int64), num_classes, f"idx:{Path(images_path).name}")


def to_pixels(x) -> np.ndarray:
    """Inverse of the IDX normalisation, rounded to the nearest byte value."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_idx(ds: Dataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Export ``ds`` as an IDX pair. Features are quantised to bytes."""
    n, d = ds.x.shape
    if shape is None:
        side = int(round(d ** 0.5))
        shape = (side, side) if side * side == d else (1, d)
    if shape[0] * shape[1] != d:
        raise ValueError(f"image shape {shape} does not hold {d} features")
    if ds.y.size and (ds.y.min() < 0 or ds.y.max() > 255):
        raise ValueError("IDX labels must fit in one byte")
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *shape) + to_pixels(ds.x).tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.y.astype(np.uint8).tobytes())


# -- CSV -------------------------------------------------------------------------


def load_csv(path, label_column: str, num_classes: int | None = None) -> Dataset:
    """CSV with a header row; one integer class label column, the rest numeric features."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if label_column not in header:
        raise DataFormatError(f"{path}: no column named {label_column!r}")
    li = header.index(label_column)
    feats, labels = [], []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{r}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as e:
            raise DataFormatError(f"{path}:{r}: non-numeric cell ({e})") from None
        lab = vals.pop(li)
        if lab != int(lab) or lab < 0:
            raise DataFormatError(f"{path}:{r}: label {lab} is not a class index")
        feats.append(vals)
        labels.append(int(lab))
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    if y.max() >= k:
        raise DataFormatError(f"{path}: label {int(y.max())} out of range for {k} classes")
    return Dataset(minmax_scale(np.array(feats)), y, k, f"csv:{Path(path).name}")


# -- sampling --------------------------------------------------------------------


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded draw of ``n`` items without replacement."""
    if not 0 < n <= len(ds):
        raise ValueError(f"cannot draw {n} items from a dataset of {len(ds)}")
    idx = SeededRng(seed).permutation(len(ds))[:n]
    return ds.take(idx, f"{ds.provenance}|subsample({n},{seed})")


def train_test_split(ds: Dataset, n_train: int, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint seeded train/test draws."""
    if n_train + n_test > len(ds):
        raise ValueError(f"need {n_train + n_test} items, dataset has {len(ds)}")
    perm = SeededRng(seed).permutation(len(ds))
    return (ds.take(perm[:n_train], f"{ds.provenance}|train({n_train},{seed})"),
            ds.take(perm[n_train:n_train + n_test], f"{ds.provenance}|test({n_test},{seed})"))


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Two-class toy data.

    ``two-gaussians``: class 0 around ``-separation * e1``, class 1 around
    ``+separation * e1``, unit isotropic noise, then min-max scaled.
    ``separable-2pt``: alternating copies of ``-s * e1`` and ``+s * e1`` with
    ``s = min(separation, 1)``; no noise, no rescaling.
    """
    y = np.arange(spec.n) % 2
    sgn = 2.0 * y - 1.0
    if spec.kind == "separable-2pt":
        x = np.zeros((spec.n, spec.dim))
        x[:, 0] = sgn * min(spec.separation, 1.0)
        return Dataset(x, y, 2, f"synthetic:separable-2pt(n={spec.n},dim={spec.dim})")
    rng = SeededRng(spec.seed)
    x = rng.normal((spec.n, spec.dim))
    x[:, 0] += sgn * spec.separation
    return Dataset(minmax_scale(x), y, 2,
                   f"synthetic:two-gaussians(n={spec.n},dim={spec.dim},sep={spec.separation},seed={spec.seed})")
