import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from wdro.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from wdro.harness import (
    OUTPUT_ENV, ManifestError, PipelineError, attack_eval, load_manifest, run_manifest, validate_manifest,
)
from wdro.models import ModelSpec, load_checkpoint

MANIFESTS = Path(__file__).resolve().parents[1] / "manifests"

SMALL = """
name = "small"
output_dir = "out"

[dataset]
source = "synthetic"
kind = "two-gaussians"
n = 300
dim = 3
separation = 1.5
train = 200
test = 100
seed = 1

[model]
kind = "logistic"

[robust]
rho = 5.0
gamma0 = 1.0
eta = 0.5
oracle_step = 0.2
lzz_estimate = 0.5

[[trainer]]
name = "erm"
algorithm = "erm-sgd"
alpha = 0.1
iterations = 30
batch_size = 32
eval_every = 10
probe_size = 50

[[trainer]]
algorithm = "spgd-oracle"
alpha = 0.1
iterations = 30
batch_size = 32
eval_every = 10
probe_size = 50

[attacks]
kinds = ["fgsm", "pgd", "wrm"]
eps = [0.0, 0.1, 0.2]
steps = 5
wrm_gamma = [1.0, 4.0]
wrm_step = 0.2
"""

FED = """
[federation]
algorithms = ["drfl", "fedavg"]
num_workers = 4
rounds = 3
local_batch = 16
alpha = 0.05

[federation.attack]
kind = "fgsm"
eps = 0.1
"""


def write(tmp_path, text, name="m.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def paths(diags):
    return [d.path for d in diags]


@pytest.mark.parametrize("name", ["paper-defaults", "noop", "federated"])
def test_bundled_manifests_validate(name):
    assert validate_manifest(MANIFESTS / f"{name}.toml") == []


class TestValidate:
    def test_alpha_zero_names_the_field(self, tmp_path):
        bad = SMALL.replace("alpha = 0.1\niterations = 30\nbatch_size = 32\neval_every = 10\nprobe_size = 50\n\n[[trainer]]",
                            "alpha = 0.0\niterations = 30\nbatch_size = 32\neval_every = 10\nprobe_size = 50\n\n[[trainer]]")
        assert paths(validate_manifest(write(tmp_path, bad))) == ["trainer[0].alpha"]

    def test_gamma0_nonpositive(self, tmp_path):
        for v in ("0.0", "-1.0"):
            diags = validate_manifest(write(tmp_path, SMALL.replace("gamma0 = 1.0", f"gamma0 = {v}")))
            assert paths(diags) == ["robust.gamma0"]

    def test_reports_every_problem_at_once(self, tmp_path):
        bad = (SMALL.replace("gamma0 = 1.0", "gamma0 = 0.0")
               .replace('kind = "logistic"', 'kind = "cnn"')
               .replace("eps = [0.0, 0.1, 0.2]", "eps = [0.2, 0.1]")
               .replace("steps = 5", "steps = 5\ncolour = 3"))
        got = set(paths(validate_manifest(write(tmp_path, bad))))
        assert {"robust.gamma0", "model.kind", "attacks.eps", "attacks.colour"} <= got

    def test_missing_files_and_counts(self, tmp_path):
        text = SMALL.replace('source = "synthetic"', 'source = "idx"\nimages = "nope.gz"\nlabels = "nope2.gz"')
        got = paths(validate_manifest(write(tmp_path, text)))
        assert "dataset.images" in got and "dataset.labels" in got

    def test_split_larger_than_data(self, tmp_path):
        assert "dataset.train" in paths(validate_manifest(write(tmp_path, SMALL.replace("train = 200", "train = 250"))))

    def test_attacks_need_eps_and_test_split(self, tmp_path):
        text = SMALL.replace("eps = [0.0, 0.1, 0.2]", "eps = []").replace("test = 100", "test = 0")
        got = paths(validate_manifest(write(tmp_path, text)))
        assert "attacks.eps" in got and "dataset.test" in got

    def test_required_and_type_errors(self, tmp_path):
        got = validate_manifest(write(tmp_path, 'name = 3\n[dataset]\nsource = "synthetic"\n'))
        assert {"name", "output_dir", "model", "dataset.train"} <= set(paths(got))

    def test_duplicate_trainer_names(self, tmp_path):
        text = SMALL.replace('algorithm = "spgd-oracle"', 'name = "erm"\nalgorithm = "spgd-oracle"')
        assert "trainer[1].name" in paths(validate_manifest(write(tmp_path, text)))

    def test_unparseable(self, tmp_path):
        assert paths(validate_manifest(write(tmp_path, "name = [unclosed"))) == ["manifest"]

    def test_load_raises_with_all_diagnostics(self, tmp_path):
        with pytest.raises(ManifestError) as info:
            load_manifest(write(tmp_path, SMALL.replace("gamma0 = 1.0", "gamma0 = 0.0")))
        assert paths(info.value.diagnostics) == ["robust.gamma0"]


class TestOutputDir:
    def test_precedence(self, tmp_path, monkeypatch):
        p = write(tmp_path, SMALL)
        monkeypatch.chdir(tmp_path)
        monkeypatch.delenv(OUTPUT_ENV, raising=False)
        assert load_manifest(p).output_dir == (tmp_path / "out").resolve()
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert load_manifest(p).output_dir == tmp_path / "env"
        assert load_manifest(p, tmp_path / "arg").output_dir == tmp_path / "arg"


def test_noop_writes_only_repro(tmp_path):
    res = run_manifest(MANIFESTS / "noop.toml", tmp_path / "o")
    files = sorted(p.relative_to(tmp_path / "o").as_posix() for p in (tmp_path / "o").rglob("*") if p.is_file())
    assert files == ["repro.json"]
    rec = json.loads((tmp_path / "o" / "repro.json").read_text())
    assert rec["name"] == "noop" and len(rec["manifest_sha256"]) == 64 and "PCG64" in rec["rng"]
    assert res.files == [tmp_path / "o" / "repro.json"]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    p = write(d, SMALL + FED)
    return p, run_manifest(p, d / "out")


class TestRun:
    def test_layout(self, small_run):
        _, res = small_run
        root = res.output_dir
        for rel in ("repro.json", "summary.json", "checkpoints/erm.ckpt", "checkpoints/spgd-oracle.ckpt",
                    "metrics/erm.csv", "metrics/spgd-oracle.json", "curves/fgsm.csv", "curves/pgd.csv",
                    "curves/wrm.csv", "federation/drfl.csv", "federation/fedavg.json",
                    "curves/federation-attacked_error.csv", "checkpoints/federation-drfl.ckpt"):
            assert (root / rel).is_file(), rel
        for f in res.files:
            assert root in f.resolve().parents

    def test_curves_increase_along_x(self, small_run):
        _, res = small_run
        for name, x_col in (("fgsm", "eps_adv"), ("pgd", "eps_adv"), ("wrm", "wrm_gamma")):
            rows = list(csv.DictReader(open(res.output_dir / "curves" / f"{name}.csv")))
            assert set(rows[0]) == {x_col, "method", "error"}
            for method in ("erm", "spgd-oracle"):
                xs = [float(r[x_col]) for r in rows if r["method"] == method]
                assert xs and all(a < b for a, b in zip(xs, xs[1:]))

    def test_zero_eps_equals_clean_error(self, small_run):
        _, res = small_run
        rows = list(csv.DictReader(open(res.output_dir / "curves" / "pgd.csv")))
        for method, info in res.summary["trainers"].items():
            at0 = [float(r["error"]) for r in rows if r["method"] == method and float(r["eps_adv"]) == 0.0]
            assert at0 == [info["clean_error"]]

    def test_checkpoint_loads(self, small_run):
        _, res = small_run
        theta, gamma = load_checkpoint(res.output_dir / "checkpoints" / "spgd-oracle.ckpt", ModelSpec("logistic", 3, 2))
        assert theta.shape == (8,) and gamma >= 1.0

    def test_rerun_is_byte_identical(self, small_run, tmp_path):
        p, res = small_run
        again = run_manifest(p, tmp_path / "again")
        for f in res.output_dir.rglob("*.csv"):
            assert f.read_bytes() == (again.output_dir / f.relative_to(res.output_dir)).read_bytes(), f

    def test_attack_eval(self, small_run, tmp_path):
        p, res = small_run
        out = attack_eval(res.output_dir / "checkpoints" / "erm.ckpt", p, tmp_path / "ae")
        assert (tmp_path / "ae" / "attack-eval" / "erm" / "pgd.csv").is_file()
        want = [r["error"] for r in res.summary["attacks"]["pgd"] if r["method"] == "erm"]
        assert [r["error"] for r in out.summary["pgd"]] == want

    def test_export_idx(self, tmp_path):
        p = write(tmp_path, SMALL.replace("seed = 1", "seed = 1\nexport_idx = true").replace("iterations = 30", "iterations = 0"))
        run_manifest(p, tmp_path / "o")
        assert (tmp_path / "o" / "dataset" / "train-images-idx3-ubyte").is_file()


ORACLE_STARVED = SMALL.replace("lzz_estimate = 0.5", "lzz_estimate = 0.5\noracle_max_iters = 1\noracle_eps = 1e-15")


def test_uncertifiable_oracle_is_a_validation_error(tmp_path):
    # a curvature estimate of 2 * gamma0 leaves no certified concavity
    text = SMALL.replace("lzz_estimate = 0.5", "lzz_estimate = 2.0")
    assert paths(validate_manifest(write(tmp_path, text))) == ["trainer[1].robust.gamma0"]


def test_pipeline_error_names_stage(tmp_path):
    text = ORACLE_STARVED
    with pytest.raises(PipelineError) as info:
        run_manifest(write(tmp_path, text), tmp_path / "o")
    assert info.value.stage == "train[spgd-oracle]"


class TestCli:
    def test_validate_ok(self, capsys):
        assert main(["validate", str(MANIFESTS / "noop.toml")]) == EXIT_OK
        assert capsys.readouterr().out.strip().endswith(": ok")

    def test_validate_invalid(self, tmp_path, capsys):
        assert main(["validate", str(write(tmp_path, SMALL.replace("gamma0 = 1.0", "gamma0 = 0.0")))]) == EXIT_INVALID
        assert "robust.gamma0" in capsys.readouterr().out

    def test_missing_file(self, tmp_path):
        assert main(["validate", str(tmp_path / "absent.toml")]) == EXIT_INVALID
        assert main(["run", str(tmp_path / "absent.toml")]) == EXIT_INVALID

    def test_run_invalid_and_failed(self, tmp_path):
        assert main(["run", "-q", str(write(tmp_path, SMALL.replace("gamma0 = 1.0", "gamma0 = 0.0")))]) == EXIT_INVALID
        bad = write(tmp_path, ORACLE_STARVED, "f.toml")
        assert main(["run", "-q", str(bad), "-o", str(tmp_path / "o")]) == EXIT_FAILED

    def test_run_env_override_via_subprocess(self, tmp_path):
        env_out = tmp_path / "from-env"
        env = {**os.environ, OUTPUT_ENV: str(env_out)}
        proc = subprocess.run([sys.executable, "-m", "wdro", "run", "-q", str(MANIFESTS / "noop.toml")],
                              env=env, cwd=tmp_path, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (env_out / "repro.json").is_file()
        assert not (tmp_path / "runs").exists()

    def test_attack_eval_verb(self, small_run, tmp_path, capsys):
        p, res = small_run
        code = main(["attack-eval", str(res.output_dir / "checkpoints" / "erm.ckpt"), str(p), "-o", str(tmp_path)])
        assert code == EXIT_OK
        assert set(json.loads(capsys.readouterr().out)) == {"fgsm", "pgd", "wrm"}

    def test_attack_eval_wrong_checkpoint(self, small_run, tmp_path):
        p, _ = small_run
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"not a checkpoint")
        assert main(["attack-eval", str(junk), str(p), "-o", str(tmp_path)]) == EXIT_FAILED


def test_summary_matches_metrics(small_run):
    _, res = small_run
    fed = res.summary["federation"]
    assert set(fed) == {"drfl", "fedavg"} and all(v["rounds"] == 3 for v in fed.values())
    assert np.isfinite(fed["drfl"]["attacked_error"])
