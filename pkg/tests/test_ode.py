import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ConstantField, LinearField
from conicflow.exceptions import ConfigError, IntegrationError
from conicflow.nn import VelocityField
from conicflow.ode import (SolverConfig, dump_trajectory_csv, integrate, one_step_generate,
                           reconstruct, transport)

E = np.e


def endpoint_error(method, n_steps):
    traj = integrate(LinearField(), np.array([1.0]), SolverConfig(method, n_steps))
    return abs(traj.end[0] - E)


@pytest.mark.parametrize("method,order", [("euler", 1.0), ("heun", 2.0)])
def test_convergence_order(method, order):
    ns = np.array([10, 20, 40, 80, 160])
    errs = [endpoint_error(method, n) for n in ns]
    slope = np.polyfit(np.log(1.0 / ns), np.log(errs), 1)[0]
    assert abs(slope - order) <= 0.2


def test_euler_100_on_linear_problem():
    assert endpoint_error("euler", 100) < 2e-2


def test_rk45_meets_tolerance():
    traj = integrate(LinearField(), np.array([1.0]), SolverConfig("rk45", rtol=1e-5, atol=1e-5))
    assert abs(traj.end[0] - E) < 1e-5
    assert traj.nfe >= traj.n_accepted


def test_rk45_error_nonincreasing_when_tolerance_halves():
    errs = []
    tol = 1e-4
    for _ in range(6):
        traj = integrate(LinearField(), np.array([1.0]), SolverConfig("rk45", rtol=tol, atol=tol))
        errs.append(abs(traj.end[0] - E))
        tol /= 2
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_rk45_counts_rejected_evaluations():
    # a large first step on a fast field forces rejections
    f = LinearField()
    cfg = SolverConfig("rk45", rtol=1e-9, atol=1e-9, first_step=0.5)
    traj = integrate(lambda x, t: 30 * f(x, t), np.array([1.0]), cfg)
    assert traj.n_rejected > 0
    assert traj.nfe == 1 + 6 * (traj.n_accepted + traj.n_rejected)
    assert f.calls == traj.nfe


@pytest.mark.parametrize("method,per_step", [("euler", 1), ("heun", 2)])
def test_zero_field_endpoint_and_nfe(method, per_step):
    z = np.array([[0.5, -1.0], [2.0, 3.0]])
    traj = integrate(ConstantField([0.0, 0.0]), z, SolverConfig(method, 7))
    np.testing.assert_array_equal(traj.end, z)
    assert traj.nfe == per_step * 7


@given(st.integers(1, 50), st.floats(-3, 3), st.floats(-3, 3))
def test_constant_field_is_exact_for_euler(n, c1, c2):
    z = np.array([0.25, -0.5])
    end = transport(ConstantField([c1, c2]), z, SolverConfig("euler", n))
    np.testing.assert_allclose(end, z + np.array([c1, c2]), atol=1e-12)


def test_inverse_direction_runs_backwards():
    traj = integrate(LinearField(), np.array([E]), SolverConfig("rk45", direction="inverse"))
    assert traj.times[0] == 1.0 and traj.times[-1] == 0.0
    assert abs(traj.end[0] - 1.0) < 1e-5


def test_trajectory_invariants():
    traj = integrate(LinearField(), np.array([[1.0], [2.0]]), SolverConfig("heun", 5))
    assert np.all(np.diff(traj.times) > 0)
    assert traj.times[0] == 0 and traj.times[-1] == 1
    assert len(traj.times) == len(traj.states) == len(traj.velocities) == 6
    np.testing.assert_allclose(traj.velocities[-1], traj.states[-1])


def test_rk45_round_trip_on_trained_like_field():
    field = VelocityField.init(2, (16, 16), 3, seed=2)
    z = np.random.default_rng(0).standard_normal((20, 2))
    tight = SolverConfig("rk45", rtol=1e-8, atol=1e-8)
    back = transport(field, transport(field, z, tight.forward), tight.inverse)
    assert np.max(np.abs(back - z)) < 1e-5


def test_one_step_generate_equals_single_euler_step(small_field):
    z0 = np.random.default_rng(3).standard_normal((6, 2))
    np.testing.assert_array_equal(one_step_generate(small_field, z0),
                                  transport(small_field, z0, SolverConfig("euler", 1)))


def test_one_step_generate_constant_field():
    z0 = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(one_step_generate(ConstantField([0.5, -1.0]), z0),
                                  [[1.5, 1.0]])
    np.testing.assert_array_equal(one_step_generate(ConstantField([0.0, 0.0]), z0), z0)


def test_reconstruct_zero_field_keeps_perturbation():
    x = np.array([[1.0, 2.0]])
    z = np.array([[0.3, -0.4]])
    out = reconstruct(ConstantField([0, 0]), x, perturbation=(0.5, z))
    np.testing.assert_allclose(out, x + 0.5 * z)


def test_reconstruct_constant_field_is_exact():
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    np.testing.assert_allclose(reconstruct(ConstantField([2.0, -1.0]), x), x, atol=1e-12)


def test_reconstruct_eps_zero_matches_plain(small_field):
    x = np.random.default_rng(4).standard_normal((5, 2))
    z = np.random.default_rng(5).standard_normal((5, 2))
    np.testing.assert_array_equal(reconstruct(small_field, x, perturbation=(0.0, z)),
                                  reconstruct(small_field, x))


def test_non_finite_state_raises_with_time():
    def blowup(x, t):
        return np.where(t > 0.5, np.inf, 0.0) * np.ones_like(x)
    with pytest.raises(IntegrationError) as info:
        transport(blowup, np.zeros((3, 1)), SolverConfig("euler", 10))
    assert info.value.t > 0.5
    assert info.value.index == 0


def test_step_size_underflow_raises():
    cfg = SolverConfig("rk45", rtol=1e-12, atol=1e-12, min_step=1e-3, first_step=1e-2)
    with pytest.raises(IntegrationError):
        transport(lambda x, t: 1e4 * np.sin(1e4 * t) * np.ones_like(x), np.zeros((1, 1)), cfg)


@pytest.mark.parametrize("kwargs", [dict(method="midpoint"), dict(direction="up"),
                                    dict(n_steps=0), dict(method="rk45", rtol=0.0)])
def test_invalid_solver_config(kwargs):
    with pytest.raises(ConfigError):
        SolverConfig(**kwargs)


def test_describe():
    assert SolverConfig("euler", 1).describe() == "euler(1)"
    assert SolverConfig("rk45").describe().startswith("rk45")


def test_trajectory_csv_dump(tmp_path):
    traj = integrate(LinearField(), np.array([[1.0, 2.0]]), SolverConfig("euler", 4))
    path = dump_trajectory_csv(traj, tmp_path / "traj.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,v_1,v_2"
    assert len(lines) == 6
    assert float(lines[-1].split(",")[0]) == 1.0


def test_trajectory_csv_requires_recording(tmp_path):
    traj = integrate(LinearField(), np.array([1.0]), SolverConfig("euler", 3), record=False)
    with pytest.raises(ConfigError):
        dump_trajectory_csv(traj, tmp_path / "x.csv")
