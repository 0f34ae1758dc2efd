import csv
import json
import math

import numpy as np
import pytest

from conftest import QuadraticModel
from wdro.data import SyntheticSpec, make_synthetic, train_test_split
from wdro.experiments import load_mnist, moving_average, window_mean
from wdro.models import ModelSpec, misclassification_rate
from wdro.optim import (
    CSV_COLUMNS, RunMetrics, TrainConfig, gradient_mapping, gradient_mapping_norm, train, train_erm,
    train_spgd_oracle, train_spgda,
)
from wdro.prox import AugmentedParams, RegularizerSpec
from wdro.robust import OracleError, RobustConfig

LOGISTIC = ModelSpec("logistic", 2, 2)
NONE = RegularizerSpec()


@pytest.fixture(scope="module")
def gauss():
    return train_test_split(make_synthetic(SyntheticSpec("two-gaussians", 600, 2, 1.0, 3)), 400, 200, 0)


@pytest.fixture(scope="module")
def mnist_small():
    return train_test_split(load_mnist(), 1000, 200, 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(algorithm="sgd"), dict(alpha=0.0), dict(iterations=-1),
                                    dict(batch_size=0), dict(eval_every=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


@pytest.mark.parametrize("algo", ["spgd-oracle", "spgda", "erm-sgd", "erm-adam"])
def test_zero_iterations_returns_initial_point(gauss, algo):
    rcfg = RobustConfig(gamma0=2.0)
    out, metrics = train(LOGISTIC, NONE, rcfg, TrainConfig(algo, iterations=0), gauss[0])
    assert np.array_equal(out.theta, LOGISTIC.init_params(0))
    if algo.startswith("erm"):
        assert math.isnan(out.gamma)
    else:
        assert out.gamma == 4.0
    assert [r.iteration for r in metrics.records] == [0]


def test_eta_zero_reduces_to_erm_sgd(gauss):
    rho, alpha, g0 = 25.0, 0.01, 1.0
    cfg = TrainConfig("spgda", alpha=alpha, iterations=60, batch_size=32, seed=5, probe_size=0)
    thetas, gammas = [], []
    train_spgda(LOGISTIC, NONE, RobustConfig(rho=rho, gamma0=g0, eta=0.0), cfg, gauss[0],
                callback=lambda t, a: (thetas.append(a.theta), gammas.append(a.gamma)))
    erm = []
    train_erm(LOGISTIC, NONE, TrainConfig("erm-sgd", alpha=alpha, iterations=60, batch_size=32, seed=5,
                                          probe_size=0), gauss[0], callback=lambda t, th: erm.append(th))
    for a, b in zip(thetas, erm):
        assert np.array_equal(a, b)
    # zeta = x, so the cost is 0 and the gamma partial is rho: a descent step
    # moves gamma down by alpha * rho until the projection holds it at gamma0
    g = 2 * g0
    for got in gammas:
        g = max(g - alpha * rho, g0)
        assert got == pytest.approx(g, abs=1e-12)
    assert gammas[-1] == g0


def test_zero_gradient_start_is_a_fixed_point():
    x = np.array([[0.4, -0.2], [0.4, -0.2]])
    y = np.array([0, 1])
    theta0 = np.zeros(LOGISTIC.n_params)
    th, _ = train_erm(LOGISTIC, NONE, TrainConfig("erm-sgd", alpha=0.5, iterations=1, batch_size=2), (x, y),
                      init=theta0)
    assert np.array_equal(th, theta0)


def test_separable_pair_reaches_zero_training_error():
    ds = make_synthetic(SyntheticSpec("separable-2pt", 2, 2, 1.0))
    th, _ = train_erm(LOGISTIC, NONE, TrainConfig("erm-sgd", alpha=0.5, iterations=200, batch_size=2), ds)
    assert misclassification_rate(LOGISTIC, th, ds.x, ds.y) == 0.0


def test_init_validation(gauss):
    rcfg = RobustConfig(gamma0=1.0)
    with pytest.raises(ValueError):
        train_spgda(LOGISTIC, NONE, rcfg, TrainConfig(iterations=1), gauss[0], init=AugmentedParams(
            np.zeros(LOGISTIC.n_params), 0.5))
    with pytest.raises(ValueError):
        train_erm(LOGISTIC, NONE, TrainConfig("erm-sgd", iterations=1), gauss[0], init=np.zeros(3))


class TestGradientMapping:
    def test_zero_at_joint_stationary_point(self):
        # loss = 0.5|theta - a|^2 + s . zeta; inner maximiser zeta = z + s / (2 gamma),
        # so cost = |s|^2 / (4 gamma^2) equals rho at gamma = |s| / (2 sqrt(rho)) = 2
        a = np.array([0.3, -1.0])
        s = np.array([12.0, 16.0])
        model = QuadraticModel(a, s)
        rcfg = RobustConfig(rho=25.0, gamma0=1.0, oracle_step=0.25, oracle_eps=1e-12)
        x = np.random.default_rng(0).normal(size=(5, 2))
        y = np.zeros(5, dtype=int)
        assert gradient_mapping_norm(model, NONE, rcfg, AugmentedParams(a, 2.0), x, y, 0.1) < 1e-6
        # away from it the map is clearly nonzero
        assert gradient_mapping_norm(model, NONE, rcfg, AugmentedParams(a + 1, 2.0), x, y, 0.1) > 0.5

    def test_zero_on_the_gamma_boundary_when_projection_binds(self):
        a = np.zeros(2)
        model = QuadraticModel(a, np.array([0.6, 0.8]))
        rcfg = RobustConfig(rho=25.0, gamma0=1.0, oracle_step=0.5, oracle_eps=1e-12)
        x = np.zeros((3, 2))
        y = np.zeros(3, dtype=int)
        # cost = 1/4 < rho pushes gamma below gamma0, which the projection undoes
        assert gradient_mapping_norm(model, NONE, rcfg, AugmentedParams(a, 1.0), x, y, 0.1) == pytest.approx(0, abs=1e-9)

    def test_linear_in_the_gradient_without_regulariser(self, rng):
        aug = AugmentedParams(rng.normal(size=4), 10.0)
        g, dg = rng.normal(size=4), 0.7
        one = gradient_mapping(NONE, aug, g, dg, 0.1, 1.0)
        two = gradient_mapping(NONE, aug, 2 * g, 2 * dg, 0.1, 1.0)
        assert np.allclose(two, 2 * one)
        assert np.allclose(one, np.concatenate([g, [dg]]))

    def test_nonnegative_norm_on_a_trajectory(self, gauss):
        rcfg = RobustConfig(gamma0=1.0, eta=0.5, oracle_step=0.2, lzz_estimate=0.5)
        _, m = train_spgda(LOGISTIC, RegularizerSpec("l1", 0.01), rcfg,
                           TrainConfig(alpha=0.05, iterations=50, eval_every=10, probe_size=100), gauss[0])
        assert np.all(m.column("grad_map_norm") >= 0)


def test_oracle_stationarity_improves_on_convex_instance(gauss):
    rcfg = RobustConfig(rho=1.0, gamma0=1.0, oracle_step=0.2, lzz_estimate=0.5)
    _, m = train_spgd_oracle(LOGISTIC, RegularizerSpec("l2sq", 0.01), rcfg,
                             TrainConfig("spgd-oracle", alpha=0.05, iterations=600, batch_size=64, eval_every=1,
                                         probe_size=200), gauss[0])
    it, gm = m.column("iteration"), m.column("grad_map_norm")
    assert window_mean(it, gm, 600) < window_mean(it, gm, 10)


def test_objective_descends_on_convex_instance(gauss):
    # full batches: on the plateau minibatch noise alone flips about half the
    # window comparisons, which says nothing about descent
    n = len(gauss[0])
    rcfg = RobustConfig(rho=1.0, gamma0=1.0, oracle_step=0.2, lzz_estimate=0.5)
    _, m = train_spgd_oracle(LOGISTIC, RegularizerSpec("l2sq", 0.01), rcfg,
                             TrainConfig("spgd-oracle", alpha=0.05, iterations=2000, batch_size=n, probe_size=0),
                             gauss[0])
    windows = moving_average(m.objective_trace, 100)[::100]
    increases = np.sum(np.diff(windows) > 0)
    assert increases <= 0.05 * (windows.size - 1)
    assert windows[-1] < windows[0]


def test_vanishing_radius_matches_erm(gauss):
    tr, te = gauss
    cfg = dict(alpha=0.1, iterations=500, batch_size=32, seed=1, probe_size=0)
    # a huge multiplier pins zeta to x and the robust step to the ERM step
    rcfg = RobustConfig(rho=1e-4, gamma0=1e4, oracle_step=2e-5)
    rob, _ = train_spgd_oracle(LOGISTIC, NONE, rcfg, TrainConfig("spgd-oracle", **cfg), tr)
    erm, _ = train_erm(LOGISTIC, NONE, TrainConfig("erm-sgd", **cfg), tr)
    e_rob = misclassification_rate(LOGISTIC, rob.theta, te.x, te.y)
    e_erm = misclassification_rate(LOGISTIC, erm, te.x, te.y)
    assert abs(e_rob - e_erm) <= 0.02


@pytest.mark.parametrize("algo", ["spgd-oracle", "spgda", "erm-adam"])
def test_same_seed_same_run(gauss, algo):
    rcfg = RobustConfig(gamma0=1.0, eta=0.5, oracle_step=0.2, lzz_estimate=0.5)
    tc = TrainConfig(algo, alpha=0.05, iterations=40, batch_size=16, seed=9, eval_every=10, probe_size=50)
    a, ma = train(LOGISTIC, RegularizerSpec("l1", 0.01), rcfg, tc, gauss[0], gauss[1])
    b, mb = train(LOGISTIC, RegularizerSpec("l1", 0.01), rcfg, tc, gauss[0], gauss[1])
    assert np.array_equal(a.theta, b.theta)
    strip = lambda m: [{c: getattr(r, c) for c in CSV_COLUMNS} for r in m.records]  # noqa: E731
    assert str(strip(ma)) == str(strip(mb))
    c, _ = train(LOGISTIC, RegularizerSpec("l1", 0.01), rcfg, TrainConfig(algo, alpha=0.05, iterations=40,
                 batch_size=16, seed=10, probe_size=0), gauss[0])
    assert not np.array_equal(a.theta, c.theta)


@pytest.mark.parametrize("algo", ["spgd-oracle", "spgda"])
def test_gamma_stays_feasible(gauss, algo):
    rcfg = RobustConfig(rho=0.5, gamma0=1.5, eta=0.5, oracle_step=0.2, lzz_estimate=0.5)
    seen = []
    _, m = train(LOGISTIC, NONE, rcfg, TrainConfig(algo, alpha=0.2, iterations=100, eval_every=5, probe_size=0),
                 gauss[0], callback=lambda t, a: seen.append(a.gamma))
    assert min(seen) >= 1.5 and np.all(m.column("gamma") >= 1.5)


def test_oracle_failure_reports_iteration(gauss):
    rcfg = RobustConfig(gamma0=1.0, oracle_step=1e-6, oracle_eps=1e-14, oracle_max_iters=2)
    with pytest.raises(OracleError) as info:
        train_spgd_oracle(LOGISTIC, NONE, rcfg, TrainConfig("spgd-oracle", iterations=5, probe_size=0), gauss[0])
    assert info.value.iteration == 1
    assert "iteration 1" in str(info.value)


def test_divergence_aborts():
    spec = ModelSpec("linear-regression", 1, 1)
    x = np.ones((8, 1))
    y = np.full(8, 3.0)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError, match="iteration"):
        train_erm(spec, NONE, TrainConfig("erm-sgd", alpha=1e3, iterations=5000, batch_size=8, probe_size=0),
                  (x, y))


def test_empty_data_rejected():
    with pytest.raises(ValueError):
        train_erm(LOGISTIC, NONE, TrainConfig("erm-sgd"), (np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_metrics_outputs(tmp_path, gauss):
    tr, te = gauss
    _, m = train_spgda(LOGISTIC, NONE, RobustConfig(), TrainConfig(alpha=0.05, iterations=30, eval_every=10),
                       tr, te)
    assert [r.iteration for r in m.records] == [0, 10, 20, 30]
    assert len(m.loss_trace) == len(m.objective_trace) == 30
    m.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == CSV_COLUMNS and "wall_ms" not in rows[0]
    assert rows[1][CSV_COLUMNS.index("attacked_error")] == "nan"
    assert len(rows) == 5
    m.to_json(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["records"][0]["attacked_error"] is None
    assert doc["records"][-1]["iteration"] == 30
    # records are the means of the batch values since the previous record
    assert m.records[1].train_loss == pytest.approx(np.mean(m.loss_trace[:10]))
    assert isinstance(RunMetrics().column("gamma"), np.ndarray)


def test_paper_default_spgda_decreases_loss(mnist_small):
    spec = ModelSpec("mlp", 784, 10, (64,), "softplus")
    _, m = train_spgda(spec, NONE, RobustConfig(rho=25.0, gamma0=1.0, eta=0.02),
                       TrainConfig(alpha=1e-3, iterations=200, batch_size=128, probe_size=0), mnist_small[0])
    trace = np.asarray(m.loss_trace)
    assert trace[-20:].mean() < trace[:20].mean()


def test_adam_stays_finite(mnist_small):
    spec = ModelSpec("mlp", 784, 10, (64,), "softplus")
    th, m = train_erm(spec, NONE, TrainConfig("erm-adam", alpha=1e-3, iterations=500, batch_size=128,
                                              probe_size=0), mnist_small[0], mnist_small[1])
    assert np.all(np.isfinite(th)) and np.all(np.isfinite(m.loss_trace))
    assert np.mean(m.loss_trace[-50:]) < np.mean(m.loss_trace[:50])
