import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ConstantField, LinearField
from conicflow.datasets import sample, two_moons
from conicflow.exceptions import ConfigError
from conicflow.metrics import (GmmFit, MetricsReport, curvature, curvature_from_trajectory,
                               evaluate, fit_gmm, gmm_kl, ivd, ivd_from_trajectory,
                               kl_between_samples, recon_error, topk_curvature_indices,
                               velocity_deltas)
from conicflow.nn import VelocityField
from conicflow.ode import SolverConfig, integrate

E = math.e
CURVATURE_EXACT = (E - 1) ** 2 - 2 * (E - 1) ** 2 + (E ** 2 - 1) / 2
IVD_EXACT = (E - 2) ** 2


def test_closed_form_constants():
    assert CURVATURE_EXACT == pytest.approx(0.2420, abs=1e-4)
    assert IVD_EXACT == pytest.approx(0.5159, abs=1e-3)


def test_curvature_linear_field_oracle():
    est = curvature(LinearField(), np.array([[1.0]]), n_time_nodes=200)
    assert est == pytest.approx(CURVATURE_EXACT, rel=0.01)


def test_curvature_rk45_nodes_also_close():
    traj = integrate(LinearField(), np.array([[1.0]]), SolverConfig("rk45", rtol=1e-9, atol=1e-9))
    # adaptive grids are coarse, so this only checks the ballpark
    assert curvature_from_trajectory(traj) == pytest.approx(CURVATURE_EXACT, rel=0.2)


def test_ivd_linear_field_oracle():
    est = ivd(LinearField(), np.array([[1.0]]), n_time_nodes=1001)
    assert est == pytest.approx(IVD_EXACT, rel=0.01)


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_constant_field_is_straight(c):
    z0 = np.random.default_rng(0).standard_normal((20, 2))
    field = ConstantField(c)
    scale = 1e-28 * (1 + sum(v * v for v in c))
    assert 0.0 <= curvature(field, z0) < scale
    assert 0.0 <= ivd(field, z0) < scale
    assert 0.0 <= ivd(field, z0, t0=0.37) < scale


def test_constant_field_exactly_zero_on_dyadic_grid():
    # power-of-two step counts and dyadic values make every Euler sum exact
    z0 = np.array([[0.5, -1.25], [2.0, 0.75]])
    field = ConstantField([1.5, -0.25])
    assert curvature(field, z0, n_time_nodes=129) == 0.0
    assert ivd(field, z0, n_time_nodes=129) == 0.0


def test_curvature_needs_two_nodes():
    with pytest.raises(ConfigError):
        curvature(LinearField(), np.ones((1, 1)), n_time_nodes=1)
    with pytest.raises(ConfigError):
        ivd(LinearField(), np.ones((1, 1)), t0=1.5)


def test_trapezoid_of_ivd_reproduces_curvature(small_field, rng):
    z0 = rng.standard_normal((64, 2))
    traj = integrate(small_field, z0, SolverConfig("euler", 50))
    per_node = [ivd_from_trajectory(small_field, traj, t) for t in traj.times]
    w = np.full(len(per_node), 1.0 / 50)
    w[[0, -1]] /= 2
    assert abs(float(np.dot(w, per_node)) - curvature_from_trajectory(traj)) < 1e-12
    np.testing.assert_allclose(per_node, velocity_deltas(traj), rtol=1e-13, atol=0)


def test_topk_ties_and_permutation(small_field, rng):
    z0 = rng.standard_normal((10, 2))
    assert topk_curvature_indices(ConstantField([1.0, 0.0]), z0, 20, 5) == [0, 1, 2, 3, 4]
    full = topk_curvature_indices(small_field, z0, 12, 12)
    assert sorted(full) == list(range(12))
    with pytest.raises(ConfigError):
        topk_curvature_indices(small_field, z0, 5, 6)


def test_topk_descending(small_field, rng):
    z0 = rng.standard_normal((30, 2))
    idx = topk_curvature_indices(small_field, z0, 40, 40)
    vals = velocity_deltas(integrate(small_field, z0, SolverConfig("euler", 40)))[:40]
    assert np.all(np.diff(vals[idx]) <= 0)


def test_recon_zero_field():
    zero = VelocityField.zeros(2, (4,), 2)
    x = np.random.default_rng(0).standard_normal((200_000, 2))
    assert recon_error(zero, x) == 0.0
    e1 = recon_error(zero, x, eps=0.05, seed=3)
    assert e1 == pytest.approx(0.05 * math.sqrt(math.pi / 2), rel=0.01)
    assert recon_error(zero, x, eps=0.1, seed=3) == pytest.approx(2 * e1, rel=1e-12)


def test_recon_eps_zero_equals_plain(small_field, rng):
    x = rng.standard_normal((50, 2))
    assert recon_error(small_field, x, eps=0.0, seed=4) == recon_error(small_field, x)
    with pytest.raises(ConfigError):
        recon_error(small_field, x, eps=-1.0)
    with pytest.raises(ConfigError):
        recon_error(small_field, np.zeros((0, 2)))


def test_recon_constant_field_exact_with_euler(rng):
    x = rng.standard_normal((50, 2))
    assert recon_error(ConstantField([0.3, 0.1]), x) < 1e-15


# --------------------------------------------------------------------------
# mixtures


def test_em_monotone_on_moons():
    x = sample(two_moons(), 2000, 0)
    fit = fit_gmm(x, 8, 100, seed=0, n_init=2)
    h = np.array(fit.ll_history)
    assert not fit.regularized
    assert np.all(np.diff(h) >= -1e-10)
    np.testing.assert_allclose(fit.weights.sum(), 1.0, rtol=1e-12)
    np.linalg.cholesky(fit.covariances)


def test_single_gaussian_mean_clt():
    n = 5000
    mu = np.array([1.0, -2.0])
    x = mu + np.random.default_rng(5).standard_normal((n, 2))
    fit = fit_gmm(x, 1, 50, seed=0, n_init=1)
    assert np.all(np.abs(fit.means[0] - mu) < 4 / math.sqrt(n))


def test_more_components_fit_moons_better():
    x = sample(two_moons(), 2000, 1)
    assert fit_gmm(x, 8, 100, n_init=2).log_likelihood > fit_gmm(x, 1, 100, n_init=1).log_likelihood


def test_gmm_needs_enough_samples():
    with pytest.raises(ConfigError):
        fit_gmm(np.zeros((79, 2)), 8)


def _gauss(mean):
    return GmmFit(np.array([1.0]), np.array([[mean]]), np.array([[[1.0]]]), 0.0)


def test_kl_closed_form():
    assert gmm_kl(_gauss(0.0), _gauss(1.0), 100_000, seed=0) == pytest.approx(0.5, rel=0.05)


def test_kl_identical_within_noise():
    x = sample(two_moons(), 2000, 2)
    p = fit_gmm(x, 4, 50, n_init=1)
    est, se = gmm_kl(p, p, 20_000, seed=1, return_stderr=True)
    assert abs(est) <= 3 * se + 1e-15


def test_kl_between_samples_clamped():
    x = sample(two_moons(), 1000, 3)
    assert kl_between_samples(x, x, 4, 30, 5000, n_init=1) >= 0.0


# --------------------------------------------------------------------------
# reports


def _report(**kw):
    base = dict(curvature=0.1, ivd=0.2, recon_real=0.3, recon_fake=0.25, precon_real=0.4,
                precon_fake=0.35, eps=0.05, kl_to_target=0.01, nfe_mean=100.0,
                sample_count=10, solver_used="euler(100)")
    base.update(kw)
    return MetricsReport(**base)


@pytest.mark.parametrize("bad", [dict(curvature=-1.0), dict(ivd=float("nan")),
                                 dict(sample_count=0), dict(kl_to_target=float("inf"))])
def test_report_validation(bad):
    with pytest.raises(ConfigError):
        _report(**bad)


def test_report_row_and_text():
    r = _report()
    assert r.recon_gap == pytest.approx(0.05)
    row = r.csv_row()
    assert len(row) == len(MetricsReport.FIELDS) and row[0] == 1
    assert "curvature" in r.to_text()


def test_evaluate_deterministic(small_field):
    kw = dict(n_samples=300, gmm_components=2, gmm_iter=20, gmm_restarts=1, n_mc=2000)
    a = evaluate(small_field, two_moons(), seed=3, **kw)[0]
    b = evaluate(small_field, two_moons(), seed=3, **kw)[0]
    assert a.csv_row() == b.csv_row()
    assert a.sample_count == 300 and a.nfe_mean == 100
