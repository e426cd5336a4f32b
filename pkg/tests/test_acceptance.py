"""Acceptance criteria 1-12, each at its stated tolerance and time budget.

Criteria 4, 5, 6 and 11 share one run of the default configuration
(about a quarter of an hour on one core). Every test prints a PASS/FAIL
line; the lines are repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import TINY_INI, ConstantField, LinearField, record_criterion
from conicflow import pipeline
from conicflow.config import load_config, parse_config
from conicflow.datasets import make_fake_pairs, sample, standard_gaussian, two_moons
from conicflow.nn import VelocityField, backward, forward
from conicflow.ode import SolverConfig, integrate
from conicflow.metrics import curvature
from conicflow.reflow import (EXPONENTIAL_TIME, ReflowBuffers, ReflowPlan, ReflowTrainer,
                              SlerpSchedule, TrainingConfig, default_zeta_grid, sample_time, slerp,
                              train_base_flow, zeta_objective)

MINUTE = 60.0


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    cfg = load_config(None)
    start = time.perf_counter()
    result = pipeline.run_pipeline(cfg, tmp_path_factory.mktemp("default_run"))
    result.timings["total"] = time.perf_counter() - start
    return result


def _stage_time(result, *prefixes):
    return sum(v for k, v in result.timings.items()
               if k != "total" and any(k.startswith(p) for p in prefixes))


# --------------------------------------------------------------------------


def _fd_worst(field, rng, n_probes=25, h=1e-4):
    x, t, u = rng.standard_normal((4, 2)), rng.random(4), rng.standard_normal((4, 2))
    grads = backward(field, x, t, u)
    params = field.params
    worst = 0.0
    for _ in range(n_probes):
        k = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[k].shape)
        plus, minus = [p.copy() for p in params], [p.copy() for p in params]
        plus[k][idx] += h
        minus[k][idx] -= h
        numeric = (np.sum(u * forward(field.with_params(plus), x, t))
                   - np.sum(u * forward(field.with_params(minus), x, t))) / (2 * h)
        a = grads[k][idx]
        worst = max(worst, abs(numeric - a) / max(abs(numeric), abs(a), 1e-6))
    return worst


def test_criterion_01_gradients():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    archs = [((8,), 2, "silu"), ((16, 16), 4, "silu"), ((128, 128, 128), 16, "silu"),
             ((12, 7), 0, "tanh")]
    worst = max(_fd_worst(VelocityField.init(2, h, nf, act, seed=i), rng)
                for i, (h, nf, act) in enumerate(archs))
    elapsed = time.perf_counter() - start
    ok = record_criterion(1, worst <= 1e-3 and elapsed < 10,
                          f"max rel err {worst:.2e} over 4 archs x 25 probes, {elapsed:.1f}s")
    assert ok


def _endpoint_errors(method, steps):
    z0 = np.array([[1.0]])
    return [abs(integrate(LinearField(), z0, SolverConfig(method, n)).end[0, 0] - math.e)
            for n in steps]


def test_criterion_02_solver_orders():
    start = time.perf_counter()
    steps = [10, 20, 40, 80, 160]
    slopes = {}
    for m in ("euler", "heun"):
        err = _endpoint_errors(m, steps)
        slopes[m] = -np.polyfit(np.log(steps), np.log(err), 1)[0]
    z0 = np.array([[1.0], [-0.5], [2.0]])
    rk = integrate(LinearField(), z0, SolverConfig("rk45", rtol=1e-5, atol=1e-5))
    rk_err = float(np.max(np.abs(rk.end - math.e * z0)))
    elapsed = time.perf_counter() - start
    ok = (abs(slopes["euler"] - 1) <= 0.2 and abs(slopes["heun"] - 2) <= 0.2 and rk_err < 1e-5
          and elapsed < 5)
    record_criterion(2, ok, f"slopes euler {slopes['euler']:.3f}, heun {slopes['heun']:.3f}; "
                     f"rk45 err {rk_err:.2e}; {elapsed:.2f}s")
    assert ok


def test_criterion_03_curvature_oracle():
    start = time.perf_counter()
    exact = (math.e - 1) ** 2 - 2 * (math.e - 1) ** 2 + (math.e ** 2 - 1) / 2
    est = curvature(LinearField(), np.array([[1.0]]), n_time_nodes=200)
    z0 = np.random.default_rng(0).standard_normal((100, 2))
    # dyadic velocity on a power-of-two grid: every Euler sum is exact
    const = curvature(ConstantField([0.5, -1.25]), np.round(z0 * 64) / 64, n_time_nodes=129)
    const_generic = curvature(ConstantField([0.3, 0.7]), z0)
    elapsed = time.perf_counter() - start
    rel = abs(est - exact) / exact
    ok = rel < 0.01 and const == 0.0 and const_generic < 1e-25 and elapsed < 5
    record_criterion(3, ok, f"estimate {est:.5f} vs {exact:.5f} (rel {rel:.2e}); "
                     f"constant field {const!r} (dyadic), {const_generic:.1e} (generic)")
    assert ok


@pytest.mark.slow
def test_criterion_04_drift(default_run):
    kl = {k: v for k, v in default_run.drift if k >= 1}
    seq = [kl[k] for k in sorted(kl)]
    monotone = all(b >= a for a, b in zip(seq, seq[1:]))
    growth = kl[3] / kl[1] - 1 if kl[1] > 0 else math.inf
    budget = _stage_time(default_run, "train-base", "fake-pairs k=2 original",
                         "fake-pairs k=3 original", "reflow k=2 original",
                         "reflow k=3 original", "evaluate", "drift")
    ok = monotone and growth >= 0.10 and budget < 15 * MINUTE
    record_criterion(4, ok, "KL(fake_k||real) k=1..3: " + ", ".join(f"{v:.4f}" for v in seq)
                     + f"; k3 vs k1 {growth:+.1%}; {budget / MINUTE:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_05_gap_closing(default_run):
    orig = default_run.report(2, "original")
    conic = default_run.report(2, "balanced_conic")
    budget = _stage_time(default_run, "train-base", "fake-pairs k=2", "reflow k=2", "evaluate")
    ok = conic.recon_gap < orig.recon_gap and budget < 20 * MINUTE
    record_criterion(5, ok, f"k=2 |recon_real - recon_fake|: balanced_conic {conic.recon_gap:.5f}"
                     f" vs original {orig.recon_gap:.5f}; {budget / MINUTE:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_06_straightening(default_run):
    base = default_run.report(1, "base")
    conic = default_run.report(2, "balanced_conic")
    orig = default_run.report(2, "original")
    budget = _stage_time(default_run, "train-base", "fake-pairs k=2", "reflow k=2", "evaluate")
    ok = (conic.curvature < base.curvature and conic.ivd < base.ivd
          and conic.curvature <= orig.curvature and budget < 20 * MINUTE)
    record_criterion(6, ok, f"curvature k1 {base.curvature:.5f} -> conic k2 {conic.curvature:.5f}"
                     f" (original k2 {orig.curvature:.5f}); ivd k1 {base.ivd:.5f} -> "
                     f"conic k2 {conic.ivd:.5f}")
    assert ok


def test_criterion_07_slerp():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    v0, v1 = rng.standard_normal(3), rng.standard_normal(3)
    endpoints = (np.array_equal(slerp(v0, v1, 0.0), v0)
                 and np.array_equal(slerp(v0, v1, 1.0), v1))
    mid = slerp(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
    mid_err = float(np.max(np.abs(mid - math.sqrt(2) / 2)))
    fallback = True
    for c in (0.99949, 0.9995001, 0.99951, 0.9999, -0.99951, -0.99949):
        phi = math.acos(c)
        a, b = np.array([1.0, 0.0]), 2 * np.array([math.cos(phi), math.sin(phi)])
        is_lerp = np.array_equal(slerp(a, b, 0.3), 0.7 * a + 0.3 * b)
        fallback &= is_lerp == (abs(c) > 0.9995)
    elapsed = time.perf_counter() - start
    ok = endpoints and mid_err < 1e-12 and fallback and elapsed < 1
    record_criterion(7, ok, f"endpoints exact {endpoints}; midpoint err {mid_err:.1e}; "
                     f"lerp iff |cos|>0.9995 {fallback}")
    assert ok


def test_criterion_08_schedule():
    start = time.perf_counter()
    zmax, k = 0.3, 4
    sched = SlerpSchedule(zmax, k)
    ends = all(sched.zeta(0.0, p) == 0.0 and sched.zeta(1.0, p) == sched.phase_max(p)
               for p in range(2 * k))
    pattern = [k, 3, 2, 1, 2, 3, 4]
    maxima = all(abs(sched.phase_max(i) - v / k * zmax) < 1e-15 for i, v in enumerate(pattern))
    plan = ReflowPlan(100)
    sets = plan.u_real == set(range(1, 50, 2)) and plan.u_fake == set(range(1, 101)) - plan.u_real
    elapsed = time.perf_counter() - start
    ok = ends and maxima and sets and elapsed < 1
    record_criterion(8, ok, f"endpoints {ends}; phase maxima [K..1..K]/K {maxima}; "
                     f"U_real(N=100) = {{1,3,...,49}} {sets}")
    assert ok


def test_criterion_09_zeta_oracle():
    start = time.perf_counter()
    cfg = load_config(None)
    data = sample(two_moons(), 4000, 0)
    # a briefly trained base flow keeps this criterion independent of the long run
    base, _ = train_base_flow(VelocityField.init(2, (64, 64), 8, seed=0), data, 1500, 256,
                              TrainingConfig(learning_rate=2e-3), seed=1)
    fake = make_fake_pairs(base, standard_gaussian(), 2000, SolverConfig("euler", 100),
                                    seed=2)
    plan = ReflowPlan(200, repair_interval=50, batch_size=128)
    trainer = ReflowTrainer(base, plan, ReflowBuffers(fake, x1=data[:2000]), seed=3,
                            zeta_search_samples=1000)
    for i in range(1, plan.warmup_steps + 1):
        trainer.step(i)
    snapshot = trainer.field
    trainer.step(plan.warmup_steps + 1)
    grid = default_zeta_grid(cfg.reflow.zeta_grid_size)
    n = trainer.zeta_search_samples
    vals = zeta_objective(snapshot, trainer.buffers.real.z1[:n], trainer.buffers.fake.z1[:n],
                          grid, trainer._search_seed, SolverConfig("euler", 100))
    brute = grid[int(np.argmax(vals))]
    elapsed = time.perf_counter() - start
    ok = trainer.zeta_max == brute and len(grid) == 10 and elapsed < 2 * MINUTE
    record_criterion(9, ok, f"search {trainer.zeta_max:.2f}, exhaustive {brute:.2f} "
                     f"on 10-point grid; {elapsed:.1f}s")
    assert ok


def test_criterion_10_time_sampler():
    start = time.perf_counter()
    u = sample_time(EXPONENTIAL_TIME, 100_000, 0)
    res = stats.kstest(u, EXPONENTIAL_TIME.cdf)
    elapsed = time.perf_counter() - start
    ok = res.pvalue > 0.05 and elapsed < 5
    record_criterion(10, ok, f"KS D={res.statistic:.5f}, p={res.pvalue:.3f} (n=1e5)")
    assert ok


@pytest.mark.slow
def test_criterion_11_distillation(default_run):
    d = default_run.distill
    budget = _stage_time(default_run, "distill")
    ok = d["distilled"] <= d["teacher_1step"] and budget < 10 * MINUTE
    record_criterion(11, ok, f"1-step KL: distilled {d['distilled']:.4f} vs teacher "
                     f"{d['teacher_1step']:.4f}; {budget / MINUTE:.1f} min")
    assert ok


def test_criterion_12_reproducibility(tmp_path):
    cfg = parse_config(TINY_INI)
    a = pipeline.run_pipeline(cfg, tmp_path / "a")
    b = pipeline.run_pipeline(cfg, tmp_path / "b")
    same = (a.out / "metrics.csv").read_bytes() == (b.out / "metrics.csv").read_bytes()
    record_criterion(12, same, "metrics.csv byte-identical across two runs: " + str(same))
    assert same
