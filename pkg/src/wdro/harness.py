"""Manifest-driven experiment runner.

A manifest is one TOML file describing one experiment: a dataset, a model,
shared robust/regulariser settings, a list of trainers, an attack grid and
an optional federation block. ``validate_manifest`` reports every problem
at once with a dotted field path; ``run_manifest`` executes the pipeline and
writes everything under the output directory:

    repro.json                      manifest hash, seeds, library versions
    checkpoints/<trainer>.ckpt      final parameters (models checkpoint format)
    metrics/<trainer>.csv|.json     training records
    curves/<attack>.csv             eps_adv,method,error
    federation/<algorithm>.csv|.json
    curves/federation-<metric>.csv  round,method,<metric>
    summary.json                    final clean/attacked errors

``WDRO_OUTPUT_DIR`` replaces the manifest's ``output_dir`` when set.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import json
import math
import os
import platform
import re
import struct
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .attacks import ATTACK_KINDS, AttackSpec, evaluate_under_attack
from .data import Dataset, SyntheticSpec, load_csv, load_idx, make_synthetic, train_test_split, write_idx
from .federated import FederationConfig, run_federation
from .models import ACTIVATIONS, ModelSpec, load_checkpoint, misclassification_rate, save_checkpoint
from .optim import ALGORITHMS, TrainConfig, train
from .prox import REG_KINDS, RegularizerSpec
from .robust import RobustConfig
from .tensor import RNG_ALGORITHM

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

OUTPUT_ENV = "WDRO_OUTPUT_DIR"
NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class ManifestError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(map(str, diagnostics)))


class PipelineError(RuntimeError):
    """A failure after validation, tagged with the pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")


# -- schema -------------------------------------------------------------------------
#
# Each field is (type tag, rule). Rules return an error message or None.


def _gt(lo):
    return lambda v: None if v > lo else f"must be > {lo}"


def _ge(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def _one_of(options):
    return lambda v: None if v in options else f"must be one of {list(options)}"


def _each(rule):
    def check(vs):
        for v in vs:
            msg = rule(v)
            if msg:
                return f"element {v!r} {msg}"
        return None
    return check


def _increasing(vs):
    return None if all(a < b for a, b in zip(vs, vs[1:])) else "must be strictly increasing"


def _all(*rules):
    def check(v):
        for r in rules:
            msg = r(v)
            if msg:
                return msg
        return None
    return check


def _name(v):
    return None if NAME_RE.match(v) else "must match [A-Za-z0-9][A-Za-z0-9_.-]*"


TOP = {
    "name": ("str", _name),
    "description": ("str", None),
    "output_dir": ("str", None),
}
DATASET = {
    "source": ("str", _one_of(("idx", "csv", "synthetic"))),
    "images": ("str", None),
    "labels": ("str", None),
    "path": ("str", None),
    "label_column": ("str", None),
    "num_classes": ("int", _ge(2)),
    "kind": ("str", _one_of(("two-gaussians", "separable-2pt"))),
    "n": ("int", _ge(2)),
    "dim": ("int", _ge(1)),
    "separation": ("float", _ge(0)),
    "train": ("int", _ge(1)),
    "test": ("int", _ge(0)),
    "seed": ("int", _ge(0)),
    "export_idx": ("bool", None),
}
MODEL = {
    "kind": ("str", _one_of(("logistic", "mlp"))),
    "hidden_dims": ("list[int]", _each(_ge(1))),
    "activation": ("str", _one_of(ACTIVATIONS)),
}
ROBUST = {
    "rho": ("float", _gt(0)),
    "gamma0": ("float", _gt(0)),
    "eta": ("float", _ge(0)),
    "oracle_eps": ("float", _gt(0)),
    "oracle_max_iters": ("int", _ge(1)),
    "oracle_step": ("float", _gt(0)),
    "lzz_estimate": ("float", _ge(0)),
    "box": ("bool", None),
}
REGULARIZER = {
    "kind": ("str", _one_of(REG_KINDS)),
    "weight": ("float", _ge(0)),
}
TRAINER = {
    "name": ("str", _name),
    "algorithm": ("str", _one_of(ALGORITHMS)),
    "alpha": ("float", _gt(0)),
    "iterations": ("int", _ge(0)),
    "batch_size": ("int", _ge(1)),
    "seed": ("int", _ge(0)),
    "eval_every": ("int", _ge(1)),
    "probe_size": ("int", _ge(0)),
    "robust": ("table", None),
    "regularizer": ("table", None),
}
ATTACKS = {
    "kinds": ("list[str]", _each(_one_of(ATTACK_KINDS))),
    "eps": ("list[float]", _all(_each(_ge(0)), _increasing)),
    "steps": ("int", _ge(1)),
    "step_size": ("float", _gt(0)),
    "split_budget": ("bool", None),
    "wrm_gamma": ("list[float]", _all(_each(_gt(0)), _increasing)),
    "wrm_step": ("float", _gt(0)),
    "wrm_max_iters": ("int", _ge(1)),
}
FEDERATION = {
    "algorithms": ("list[str]", _each(_one_of(("drfl", "fedavg")))),
    "num_workers": ("int", _ge(1)),
    "rounds": ("int", _ge(0)),
    "local_batch": ("int", _ge(1)),
    "partition": ("str", _one_of(("iid", "single-class"))),
    "participation": ("float", lambda v: None if v == 1.0 else "only full participation (1.0) is supported"),
    "alpha": ("float", _gt(0)),
    "seed": ("int", _ge(0)),
    "eval_every": ("int", _ge(1)),
    "local_epochs": ("int", _ge(1)),
    "threads": ("int", _ge(1)),
    "attack": ("table", None),
    "robust": ("table", None),
    "regularizer": ("table", None),
}
FED_ATTACK = {
    "kind": ("str", _one_of(ATTACK_KINDS)),
    "eps": ("float", _ge(0)),
    "steps": ("int", _ge(1)),
    "step_size": ("float", _gt(0)),
    "wrm_gamma": ("float", _gt(0)),
}
SECTIONS = {"dataset", "model", "robust", "regularizer", "trainer", "attacks", "federation"}


def _type_ok(tag: str, v) -> bool:
    if tag == "str":
        return isinstance(v, str)
    if tag == "bool":
        return isinstance(v, bool)
    if tag == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if tag == "float":
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if tag == "table":
        return isinstance(v, dict)
    if tag.startswith("list["):
        return isinstance(v, list) and all(_type_ok(tag[5:-1], e) for e in v)
    raise AssertionError(tag)


def _check_table(table: dict, schema: dict, prefix: str, out: list[Diagnostic], skip=()) -> None:
    for key, value in table.items():
        path = f"{prefix}{key}"
        if key in skip:
            continue
        if key not in schema:
            out.append(Diagnostic(path, "unknown key"))
            continue
        tag, rule = schema[key]
        if not _type_ok(tag, value):
            out.append(Diagnostic(path, f"expected {tag}, got {type(value).__name__}"))
            continue
        if isinstance(value, float) and not math.isfinite(value):
            out.append(Diagnostic(path, "must be finite"))
            continue
        if rule is not None:
            msg = rule(value)
            if msg:
                out.append(Diagnostic(path, msg))


def _require(table: dict, keys, prefix: str, out: list[Diagnostic]) -> None:
    for k in keys:
        if k not in table:
            out.append(Diagnostic(f"{prefix}{k}", "required"))


# -- typed manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSection:
    source: str
    train: int
    test: int = 0
    seed: int = 0
    images: Path | None = None
    labels: Path | None = None
    path: Path | None = None
    label_column: str = "label"
    num_classes: int | None = None
    synthetic: SyntheticSpec | None = None
    export_idx: bool = False


@dataclass(frozen=True)
class TrainerSection:
    name: str
    train: TrainConfig
    robust: RobustConfig
    reg: RegularizerSpec


@dataclass(frozen=True)
class AttackGrid:
    kinds: tuple[str, ...] = ()
    eps: tuple[float, ...] = ()
    steps: int = 10
    step_size: float = 1.0
    split_budget: bool = True
    wrm_gamma: tuple[float, ...] = (1.0,)
    wrm_step: float = 0.1
    wrm_max_iters: int = 500

    @property
    def requested(self) -> bool:
        return bool(self.kinds)

    def points(self, kind: str) -> tuple[float, ...]:
        """x-axis of the curve for ``kind``: eps_adv, or the WRM penalty."""
        return self.wrm_gamma if kind == "wrm" else self.eps

    def spec(self, kind: str, x: float) -> AttackSpec:
        if kind == "wrm":
            return AttackSpec("wrm", 0.0, self.steps, self.step_size, wrm_gamma=x, wrm_step=self.wrm_step,
                              wrm_max_iters=self.wrm_max_iters)
        return AttackSpec(kind, x, self.steps, self.step_size, split_budget=self.split_budget)


@dataclass(frozen=True)
class FederationSection:
    algorithms: tuple[str, ...]
    config: FederationConfig
    attack: AttackSpec | None


@dataclass(frozen=True)
class RunManifest:
    name: str
    source: Path
    sha256: str
    output_dir: Path
    dataset: DatasetSection
    model: dict
    robust: RobustConfig
    reg: RegularizerSpec
    trainers: tuple[TrainerSection, ...]
    attacks: AttackGrid
    federation: FederationSection | None
    description: str = ""

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(self.model.get("kind", "mlp"), input_dim, num_classes,
                         tuple(self.model.get("hidden_dims", ())), self.model.get("activation", "softplus"))


def _idx_count(path: Path) -> int | None:
    """Item count from an IDX header, or None if it cannot be read."""
    try:
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rb") as fh:
            head = fh.read(8)
        return struct.unpack(">I", head[4:8])[0] if len(head) == 8 else None
    except OSError:
        return None


def _robust_from(base: RobustConfig, table: dict) -> RobustConfig:
    return replace(base, **{k: (float(v) if ROBUST[k][0] == "float" else v) for k, v in table.items()})


def _check(raw: dict, base_dir: Path) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    _check_table({k: v for k, v in raw.items() if k not in SECTIONS}, TOP, "", out)
    _require(raw, ("name", "output_dir", "dataset", "model"), "", out)
    for sec in SECTIONS:
        if sec in raw and sec != "trainer" and not isinstance(raw[sec], dict):
            out.append(Diagnostic(sec, "expected a table"))

    ds = raw.get("dataset") if isinstance(raw.get("dataset"), dict) else {}
    _check_table(ds, DATASET, "dataset.", out)
    _require(ds, ("source", "train"), "dataset.", out)
    total = None
    src = ds.get("source")
    if src == "idx":
        _require(ds, ("images", "labels"), "dataset.", out)
        counts = []
        for key in ("images", "labels"):
            if isinstance(ds.get(key), str):
                p = base_dir / ds[key]
                if not p.is_file():
                    out.append(Diagnostic(f"dataset.{key}", f"file not found: {p}"))
                else:
                    counts.append(_idx_count(p))
        if len(counts) == 2 and None not in counts:
            if counts[0] != counts[1]:
                out.append(Diagnostic("dataset.labels", f"{counts[1]} labels for {counts[0]} images"))
            total = counts[0]
    elif src == "csv":
        _require(ds, ("path",), "dataset.", out)
        if isinstance(ds.get("path"), str) and not (base_dir / ds["path"]).is_file():
            out.append(Diagnostic("dataset.path", f"file not found: {base_dir / ds['path']}"))
    elif src == "synthetic":
        total = ds.get("n", SyntheticSpec.n)
    n_train, n_test = ds.get("train"), ds.get("test", 0)
    if isinstance(total, int) and isinstance(n_train, int) and isinstance(n_test, int) and n_train + n_test > total:
        out.append(Diagnostic("dataset.train", f"train + test = {n_train + n_test} exceeds the {total} available items"))

    model = raw.get("model") if isinstance(raw.get("model"), dict) else {}
    _check_table(model, MODEL, "model.", out)
    if model.get("kind") == "logistic" and model.get("hidden_dims"):
        out.append(Diagnostic("model.hidden_dims", "only valid for kind = 'mlp'"))

    for sec, schema in (("robust", ROBUST), ("regularizer", REGULARIZER)):
        if isinstance(raw.get(sec), dict):
            _check_table(raw[sec], schema, f"{sec}.", out)

    trainers = raw.get("trainer", [])
    if not isinstance(trainers, list) or not all(isinstance(t, dict) for t in trainers):
        out.append(Diagnostic("trainer", "expected an array of tables ([[trainer]])"))
        trainers = []
    names = []
    for i, t in enumerate(trainers):
        pre = f"trainer[{i}]."
        _check_table(t, TRAINER, pre, out)
        _require(t, ("algorithm",), pre, out)
        for sub, schema in (("robust", ROBUST), ("regularizer", REGULARIZER)):
            if isinstance(t.get(sub), dict):
                _check_table(t[sub], schema, f"{pre}{sub}.", out)
        name = t.get("name", t.get("algorithm"))
        if isinstance(name, str):
            if name in names:
                out.append(Diagnostic(f"{pre}name", f"duplicate trainer name {name!r}"))
            names.append(name)
        if isinstance(t.get("batch_size"), int) and isinstance(n_train, int) and t["batch_size"] > n_train:
            out.append(Diagnostic(f"{pre}batch_size", f"exceeds the training set size {n_train}"))

    atk = raw.get("attacks") if isinstance(raw.get("attacks"), dict) else {}
    _check_table(atk, ATTACKS, "attacks.", out)
    kinds = atk.get("kinds", [])
    if isinstance(kinds, list) and kinds:
        if len(set(kinds)) != len(kinds):
            out.append(Diagnostic("attacks.kinds", "duplicate attack kind"))
        if any(k != "wrm" for k in kinds if isinstance(k, str)) and not atk.get("eps"):
            out.append(Diagnostic("attacks.eps", "must be non-empty when attacks are requested"))
        if n_test == 0:
            out.append(Diagnostic("dataset.test", "must be > 0 when attacks are requested"))

    fed = raw.get("federation")
    if isinstance(fed, dict):
        _check_table(fed, FEDERATION, "federation.", out)
        _require(fed, ("algorithms",), "federation.", out)
        if isinstance(fed.get("algorithms"), list) and not fed["algorithms"]:
            out.append(Diagnostic("federation.algorithms", "must be non-empty"))
        for sub, schema in (("robust", ROBUST), ("regularizer", REGULARIZER), ("attack", FED_ATTACK)):
            if isinstance(fed.get(sub), dict):
                _check_table(fed[sub], schema, f"federation.{sub}.", out)
        if isinstance(fed.get("attack"), dict) and n_test == 0:
            out.append(Diagnostic("dataset.test", "must be > 0 when the federation attack is set"))
        k = fed.get("num_workers", FederationConfig.num_workers)
        if isinstance(k, int) and isinstance(n_train, int) and k > n_train:
            out.append(Diagnostic("federation.num_workers", f"more workers than training items ({n_train})"))

    # configs that pass the field rules can still clash; let the constructors speak
    if not out:
        try:
            built = _build(raw, base_dir, Path("."), "")
        except (ValueError, TypeError) as e:
            out.append(Diagnostic("manifest", str(e)))
            return out
        for i, t in enumerate(built.trainers):
            if t.train.algorithm == "spgd-oracle" and not t.robust.strong_concavity > 0:
                out.append(Diagnostic(f"trainer[{i}].robust.gamma0",
                                      f"must exceed lzz_estimate / 2 = {t.robust.lzz_estimate / 2} "
                                      "for the oracle to certify its answers"))
    return out


def _build(raw: dict, base_dir: Path, output_dir: Path, sha: str) -> RunManifest:
    ds = raw["dataset"]
    synthetic = None
    if ds["source"] == "synthetic":
        synthetic = SyntheticSpec(ds.get("kind", "two-gaussians"), ds.get("n", SyntheticSpec.n),
                                  ds.get("dim", SyntheticSpec.dim), float(ds.get("separation", 2.0)),
                                  ds.get("seed", 0))
    rel = lambda key: base_dir / ds[key] if key in ds else None  # noqa: E731
    dataset = DatasetSection(
        source=ds["source"], train=ds["train"], test=ds.get("test", 0), seed=ds.get("seed", 0),
        images=rel("images"), labels=rel("labels"), path=rel("path"),
        label_column=ds.get("label_column", "label"), num_classes=ds.get("num_classes"),
        synthetic=synthetic, export_idx=ds.get("export_idx", False),
    )
    robust = _robust_from(RobustConfig(), raw.get("robust", {}))
    reg = RegularizerSpec(**raw.get("regularizer", {}))
    trainers = []
    for t in raw.get("trainer", []):
        kw = {k: v for k, v in t.items() if k not in ("name", "robust", "regularizer")}
        if "alpha" in kw:
            kw["alpha"] = float(kw["alpha"])
        trainers.append(TrainerSection(
            name=t.get("name", t["algorithm"]),
            train=TrainConfig(**kw),
            robust=_robust_from(robust, t.get("robust", {})),
            reg=RegularizerSpec(**{**asdict(reg), **t.get("regularizer", {})}),
        ))
    a = raw.get("attacks", {})
    attacks = AttackGrid(
        kinds=tuple(a.get("kinds", ())), eps=tuple(float(e) for e in a.get("eps", ())),
        steps=a.get("steps", 10), step_size=float(a.get("step_size", 1.0)),
        split_budget=a.get("split_budget", True),
        wrm_gamma=tuple(float(g) for g in a.get("wrm_gamma", (1.0,))),
        wrm_step=float(a.get("wrm_step", 0.1)), wrm_max_iters=a.get("wrm_max_iters", 500),
    )
    federation = None
    if "federation" in raw:
        f = dict(raw["federation"])
        algos = tuple(f.pop("algorithms"))
        fa = f.pop("attack", None)
        f_robust = _robust_from(robust, f.pop("robust", {}))
        f_reg = RegularizerSpec(**{**asdict(reg), **f.pop("regularizer", {})})
        for key in ("alpha", "participation"):
            if key in f:
                f[key] = float(f[key])
        cfg = FederationConfig(**f, algorithm=algos[0], robust=f_robust, reg=f_reg)
        attack = None
        if fa is not None:
            attack = AttackSpec(fa.get("kind", "pgd"), float(fa.get("eps", 0.1)), fa.get("steps", 10),
                                float(fa.get("step_size", 1.0)), wrm_gamma=float(fa.get("wrm_gamma", 1.0)))
        federation = FederationSection(algos, cfg, attack)
    return RunManifest(
        name=raw["name"], source=base_dir, sha256=sha, output_dir=output_dir, dataset=dataset,
        model=dict(raw["model"]), robust=robust, reg=reg, trainers=tuple(trainers), attacks=attacks,
        federation=federation, description=raw.get("description", ""),
    )


def _read(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    try:
        return tomllib.loads(blob.decode("utf-8")), blob
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ManifestError([Diagnostic("manifest", f"cannot parse: {e}")]) from None


def validate_manifest(path) -> list[Diagnostic]:
    """All structural and range problems in the manifest at ``path``; empty when valid.

    Raises ``OSError`` if the file cannot be read.
    """
    try:
        raw, _ = _read(path)
    except ManifestError as e:
        return e.diagnostics
    return _check(raw, Path(path).resolve().parent)


def load_manifest(path, output_dir=None) -> RunManifest:
    """Parse and validate; raises ``ManifestError`` listing every diagnostic."""
    raw, blob = _read(path)
    base = Path(path).resolve().parent
    diags = _check(raw, base)
    if diags:
        raise ManifestError(diags)
    out = output_dir or os.environ.get(OUTPUT_ENV) or raw["output_dir"]
    return _build(raw, base, Path(out).resolve(), hashlib.sha256(blob).hexdigest())


# -- pipeline -----------------------------------------------------------------------


class _Outputs:
    """Writes files, refusing any path that would leave the output directory."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []

    def path(self, rel: str) -> Path:
        p = (self.root / rel).resolve()
        if self.root != p and self.root not in p.parents:
            raise ValueError(f"output path {rel!r} escapes {self.root}")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def json(self, rel: str, payload) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        return p

    def curve(self, rel: str, x_name: str, metric: str, rows: list[tuple[float, str, float]]) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([x_name, "method", metric])
            for x, method, v in rows:
                w.writerow([_num(x), method, _num(v)])
        return p


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _finite_or_none(v):
    return v if isinstance(v, float) and math.isfinite(v) else None


@dataclass
class RunResult:
    output_dir: Path
    files: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def load_dataset(m: RunManifest) -> tuple[Dataset, Dataset | None]:
    d = m.dataset
    if d.source == "idx":
        full = load_idx(d.images, d.labels, d.num_classes or 10)
    elif d.source == "csv":
        full = load_csv(d.path, d.label_column, d.num_classes)
    else:
        full = make_synthetic(d.synthetic)
    tr, te = train_test_split(full, d.train, d.test, d.seed)
    return tr, (te if d.test > 0 else None)


def _stage(name: str, fn: Callable[[], Any]):
    try:
        return fn()
    except PipelineError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage attached
        raise PipelineError(name, e) from e


def attack_curves(spec: ModelSpec, models: dict[str, np.ndarray], test: Dataset, grid: AttackGrid,
                  rho: float) -> dict[str, list[tuple[float, str, float]]]:
    """Misclassification rate for every (attack kind, x, method); rows grouped by method with x increasing."""
    curves = {}
    for kind in grid.kinds:
        rows = []
        for method, theta in models.items():
            for x in grid.points(kind):
                err = _stage(f"attack[{kind},{method},{x}]",
                             lambda: evaluate_under_attack(spec, theta, test.x, test.y, grid.spec(kind, x), rho))
                rows.append((x, method, err))
        curves[kind] = rows
    return curves


def repro_record(m: RunManifest) -> dict:
    return {
        "name": m.name,
        "manifest_sha256": m.sha256,
        "seeds": {
            "dataset": m.dataset.seed,
            "trainers": {t.name: t.train.seed for t in m.trainers},
            "federation": m.federation.config.seed if m.federation else None,
        },
        "rng": RNG_ALGORITHM,
        "versions": {
            "wdro": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def run_manifest(path, output_dir=None, log: Callable[[str], None] | None = None) -> RunResult:
    """Execute every pipeline in the manifest. Trainers with zero iterations are skipped."""
    log = log or (lambda s: None)
    m = load_manifest(path, output_dir)
    out = _Outputs(m.output_dir)
    result = RunResult(m.output_dir)
    out.json("repro.json", repro_record(m))

    active = [t for t in m.trainers if t.train.iterations > 0]
    need_data = active or m.attacks.requested or m.federation is not None
    if not need_data:
        result.files = out.written
        return result

    train_ds, test_ds = _stage("dataset", lambda: load_dataset(m))
    spec = _stage("model", lambda: m.model_spec(train_ds.feature_dim, train_ds.num_classes))
    log(f"dataset: {len(train_ds)} train / {0 if test_ds is None else len(test_ds)} test, model {spec.n_params} params")
    if m.dataset.export_idx:
        write_idx(train_ds, out.path("dataset/train-images-idx3-ubyte"), out.path("dataset/train-labels-idx1-ubyte"))
        if test_ds is not None:
            write_idx(test_ds, out.path("dataset/test-images-idx3-ubyte"), out.path("dataset/test-labels-idx1-ubyte"))

    models: dict[str, np.ndarray] = {}
    summary: dict[str, Any] = {"trainers": {}, "attacks": {}, "federation": {}}
    for t in active:
        log(f"train {t.name} ({t.train.algorithm}, {t.train.iterations} iterations)")
        aug, metrics = _stage(f"train[{t.name}]",
                              lambda: train(spec, t.reg, t.robust, t.train, train_ds, test_ds))
        save_checkpoint(out.path(f"checkpoints/{t.name}.ckpt"), spec, aug.theta, aug.gamma)
        metrics.to_csv(out.path(f"metrics/{t.name}.csv"))
        metrics.to_json(out.path(f"metrics/{t.name}.json"))
        models[t.name] = aug.theta
        summary["trainers"][t.name] = {
            "algorithm": t.train.algorithm,
            "gamma": _finite_or_none(float(aug.gamma)),
            "clean_error": (misclassification_rate(spec, aug.theta, test_ds.x, test_ds.y)
                            if test_ds is not None else None),
        }

    if m.attacks.requested and models:
        for kind, rows in attack_curves(spec, models, test_ds, m.attacks, m.robust.rho).items():
            x_name = "wrm_gamma" if kind == "wrm" else "eps_adv"
            out.curve(f"curves/{kind}.csv", x_name, "error", rows)
            summary["attacks"][kind] = [{"x": x, "method": meth, "error": e} for x, meth, e in rows]
            log(f"attack {kind}: {len(rows)} points")

    if m.federation is not None:
        fs = m.federation
        per_metric: dict[str, list] = {"error": [], "attacked_error": [], "train_loss": []}
        for algo in fs.algorithms:
            cfg = replace(fs.config, algorithm=algo)
            log(f"federation {algo} ({cfg.num_workers} workers, {cfg.rounds} rounds)")
            aug, metrics = _stage(f"federation[{algo}]",
                                  lambda: run_federation(cfg, train_ds, spec, test_ds, fs.attack))
            metrics.to_csv(out.path(f"federation/{algo}.csv"))
            metrics.to_json(out.path(f"federation/{algo}.json"))
            save_checkpoint(out.path(f"checkpoints/federation-{algo}.ckpt"), spec, aug.theta, aug.gamma)
            for metric, rows in per_metric.items():
                rows.extend((r.iteration, algo, getattr(r, metric)) for r in metrics.records)
            last = metrics.records[-1]
            summary["federation"][algo] = {"rounds": last.iteration, "error": _finite_or_none(last.error),
                                           "attacked_error": _finite_or_none(last.attacked_error)}
        for metric, rows in per_metric.items():
            if rows and not all(math.isnan(v) for _, _, v in rows):
                out.curve(f"curves/federation-{metric}.csv", "round", metric, rows)

    out.json("summary.json", summary)
    result.files = out.written
    result.summary = summary
    return result


def attack_eval(checkpoint, path, output_dir=None) -> RunResult:
    """Evaluate a saved checkpoint on the manifest's test split across its attack grid."""
    m = load_manifest(path, output_dir)
    if not m.attacks.requested:
        raise ManifestError([Diagnostic("attacks.kinds", "attack-eval needs at least one attack kind")])
    if m.dataset.test == 0:
        raise ManifestError([Diagnostic("dataset.test", "attack-eval needs a test split")])

    train_ds, test_ds = _stage("dataset", lambda: load_dataset(m))
    spec = m.model_spec(train_ds.feature_dim, train_ds.num_classes)
    theta, _ = _stage("checkpoint", lambda: load_checkpoint(checkpoint, spec))
    method = Path(checkpoint).stem
    out = _Outputs(m.output_dir)
    curves = attack_curves(spec, {method: theta}, test_ds, m.attacks, m.robust.rho)
    summary = {}
    for kind, rows in curves.items():
        x_name = "wrm_gamma" if kind == "wrm" else "eps_adv"
        out.curve(f"attack-eval/{method}/{kind}.csv", x_name, "error", rows)
        summary[kind] = [{"x": x, "error": e} for x, _, e in rows]
    out.json(f"attack-eval/{method}/summary.json", summary)
    return RunResult(m.output_dir, out.written, summary)
