"""Training objectives and schedules for rectified flow and its reflow variants.

Three objectives share one residual form ``target - v(point, t)``:

* base flow:   target ``x1 - x0``, point ``t x1 + (1 - t) x0``
* fake reflow: the same on ``(z0, z1)`` pairs produced by a previous flow
* conic:       target ``x1 - s``, point ``t x1 + (1 - t) s`` with
  ``s = slerp(z0_real, eps, zeta)``

:class:`ReflowTrainer` interleaves fake and conic steps according to a
:class:`ReflowPlan`, regenerates the real pairs every ``repair_interval``
steps and scales the Slerp strength with a :class:`SlerpSchedule`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .datasets import PairSet, make_real_pairs
from .exceptions import ConfigError, NumericalError
from .nn import EmaShadow, OptimState, adam_step, backward, forward_cached
from .ode import SolverConfig, transport

log = logging.getLogger(__name__)

DOT_THRESHOLD = 0.9995


# --------------------------------------------------------------------------
# time sampling

@dataclass(frozen=True)
class TimeDistribution:
    """Law of the interpolation time ``t``.

    ``u_shaped_exponential`` has density ``a (e^{au} + e^{-au}) / (2 sinh a)``
    on [0, 1]. The name refers to the symmetric ``cosh`` profile on [-1, 1];
    restricted to [0, 1] the density grows towards ``u = 1``.
    """

    kind: str = "uniform"
    a: float = 3.0

    def __post_init__(self):
        if self.kind not in ("uniform", "u_shaped_exponential"):
            raise ConfigError(f"unknown time distribution {self.kind!r}")
        if self.kind == "u_shaped_exponential" and not self.a > 0:
            raise ConfigError(f"sharpness a must be positive, got {self.a}")

    def pdf(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "uniform":
            return np.where((u >= 0) & (u <= 1), 1.0, 0.0)
        a = self.a
        return np.where((u >= 0) & (u <= 1), a * np.cosh(a * u) / np.sinh(a), 0.0)

    def cdf(self, u):
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
        if self.kind == "uniform":
            return u
        return np.sinh(self.a * u) / np.sinh(self.a)

    def ppf(self, r):
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "uniform":
            return r
        return np.clip(np.arcsinh(r * np.sinh(self.a)) / self.a, 0.0, 1.0)


UNIFORM_TIME = TimeDistribution("uniform")
EXPONENTIAL_TIME = TimeDistribution("u_shaped_exponential", 3.0)


def sample_time(dist, n, rng):
    """``n`` i.i.d. draws in [0, 1] by inverse-CDF sampling."""
    if n <= 0:
        raise ConfigError("n must be positive")
    return dist.ppf(np.random.default_rng(rng).random(n))


# --------------------------------------------------------------------------
# spherical interpolation

def slerp(v0, v1, zeta, dot_threshold=DOT_THRESHOLD, per_row=False):
    """Spherical interpolation from ``v0`` (zeta=0) to ``v1`` (zeta=1).

    The angle comes from the normalised directions; the sine coefficients are
    applied to the original, unnormalised vectors, and ``|cos| > dot_threshold``
    falls back to linear interpolation.

    By default a ``(B, d)`` batch is treated as one long vector, so a single
    angle is shared by every row. With ``per_row=True`` each row gets its own
    angle. ``zeta`` may be a scalar or one value per row.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    single = v0.ndim == 1
    a, b = np.atleast_2d(v0), np.atleast_2d(v1)
    if a.shape != b.shape:
        raise ConfigError(f"slerp endpoints differ in shape: {a.shape} vs {b.shape}")
    axis = 1 if per_row else None
    na = np.linalg.norm(a, axis=axis, keepdims=True)
    nb = np.linalg.norm(b, axis=axis, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ConfigError("slerp of a zero-norm vector is undefined")
    zeta = np.asarray(zeta, dtype=np.float64).reshape(-1, 1)
    dot = np.sum((a / na) * (b / nb), axis=axis, keepdims=True)
    linear = np.abs(dot) > dot_threshold
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.where(linear, 1.0, np.sin(theta))
    theta_z = theta * zeta
    s0 = np.sin(theta - theta_z) / sin_theta
    s1 = np.sin(theta_z) / sin_theta
    out = np.where(linear, (1.0 - zeta) * a + zeta * b, s0 * a + s1 * b)
    return out[0] if single else out


def conic_point(x1, z0r, eps, zeta, t):
    """``t x1 + (1 - t) slerp(z0r, eps, zeta)`` where ``z0r`` inverts ``x1``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return t * np.asarray(x1) + (1.0 - t) * slerp(z0r, eps, zeta)


# --------------------------------------------------------------------------
# losses

def _interpolant_loss(field, x0, x1, t, weights=None):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    if x0.shape != x1.shape:
        raise ConfigError("x0 and x1 batches are misaligned")
    if np.any(t < 0) or np.any(t > 1):
        raise ConfigError("t must lie in [0, 1]")
    n = x0.shape[0]
    point = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    out, cache = forward_cached(field, point, t)
    resid = (x1 - x0) - out
    w = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, float), (n,))
    loss = float(np.sum(w * np.sum(resid ** 2, axis=1)) / n)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    grads = backward(field, point, t, -2.0 * w[:, None] * resid / n, cache)
    return loss, grads


def base_flow_loss(field, x0_batch, x1_batch, t_batch):
    """Mean of ``|x1 - x0 - v(t x1 + (1 - t) x0, t)|^2`` and its gradients."""
    return _interpolant_loss(field, x0_batch, x1_batch, t_batch)


def fake_reflow_loss(field, pairs, t_batch):
    """Base-flow loss on generated pairs ``(z0, z1)``."""
    return _interpolant_loss(field, pairs.z0, pairs.z1, t_batch)


def conic_loss(field, pairs, eps_batch, zeta, t_batch, w_t=1.0):
    """Weighted loss on Slerp-perturbed inversions of real samples.

    ``w_t`` is a scalar, per-sample array, or a callable of ``t``.
    """
    if pairs.provenance != "real":
        raise ConfigError("conic loss needs real pairs")
    t_batch = np.asarray(t_batch, dtype=np.float64)
    weights = w_t(t_batch) if callable(w_t) else w_t
    start = slerp(pairs.z0, eps_batch, zeta)
    return _interpolant_loss(field, start, pairs.z1, t_batch, weights)


# --------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class SlerpSchedule:
    """Slerp strength over training.

    Phase ``p`` (one per real-pair regeneration) has a maximum taken from the
    pattern ``[K, K-1, ..., 1, 2, ..., K]`` which is walked back and forth.
    With ``scaling="linear"`` the maximum is ``pattern / K * zeta_max``;
    with ``scaling="inverse"`` it is ``zeta_max / pattern``. Within a phase,
    progress ``t'`` runs from 1 (phase start) to 0 and the strength is
    ``phase_max * 2 t'^2 / (1 + t'^2)``.
    """

    zeta_max: float
    n_phases: int = 4
    scaling: str = "linear"

    def __post_init__(self):
        if not 0 < self.zeta_max <= 0.5:
            raise ConfigError(f"zeta_max must lie in (0, 0.5], got {self.zeta_max}")
        if self.n_phases < 1:
            raise ConfigError("n_phases must be >= 1")
        if self.scaling not in ("linear", "inverse"):
            raise ConfigError(f"unknown scaling {self.scaling!r}")

    def pattern(self):
        k = self.n_phases
        return list(range(k, 0, -1)) + list(range(2, k + 1))

    def pattern_value(self, phase):
        period = self.pattern()
        if len(period) == 1:
            return period[0]
        cycle = period + period[-2:0:-1]
        return cycle[phase % len(cycle)]

    def phase_max(self, phase):
        v = self.pattern_value(phase)
        if self.scaling == "linear":
            return v / self.n_phases * self.zeta_max
        return self.zeta_max / v

    def zeta(self, progress, phase=0):
        t = np.asarray(progress, dtype=np.float64)
        return self.phase_max(phase) * 2 * (1 - 1 / (1 + t ** 2))


@dataclass(frozen=True)
class ReflowPlan:
    """Which loss each training step uses, and when real pairs are rebuilt.

    For ``balanced_conic`` the first ``ceil(N/2)`` steps alternate real/fake
    starting with a real step at index 1; the rest are fake. ``original``
    uses fake pairs for every step. Step indices are 1-based.
    """

    total_steps: int
    repair_interval: int = 500
    warmup_steps: int | None = None
    batch_size: int = 256
    reflow_order_k: int = 2
    procedure: str = "balanced_conic"

    def __post_init__(self):
        if self.total_steps < 0 or self.repair_interval < 1 or self.batch_size < 1:
            raise ConfigError("plan sizes must be positive")
        if self.procedure not in ("original", "balanced_conic"):
            raise ConfigError(f"unknown procedure {self.procedure!r}")
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", self.total_steps // 10)

    @property
    def alternating_steps(self):
        return math.ceil(self.total_steps / 2)

    def is_real(self, i):
        if not 1 <= i <= self.total_steps:
            raise ConfigError(f"step {i} outside 1..{self.total_steps}")
        return (self.procedure == "balanced_conic"
                and i <= self.alternating_steps and i % 2 == 1)

    @property
    def u_real(self):
        return {i for i in range(1, self.total_steps + 1) if self.is_real(i)}

    @property
    def u_fake(self):
        return {i for i in range(1, self.total_steps + 1) if not self.is_real(i)}

    @property
    def last_real_step(self):
        real = self.u_real
        return max(real) if real else 0


# --------------------------------------------------------------------------
# zeta-max search

def default_zeta_grid(n=10):
    return [0.5 * (i + 1) / n for i in range(n)]


def zeta_objective(field, real_samples, fake_samples, grid, eps_seed=0,
                   solver=SolverConfig()):
    """Perturbed-generation gap between real and fake samples for each grid value.

    For every zeta: mean ``|v(slerp(v^-1(x), eps, zeta)) - x|`` over real
    samples minus the same quantity over fake samples. Item ``i`` of both sets
    uses the same noise draw ``eps_i``.
    """
    real = np.atleast_2d(np.asarray(real_samples, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake_samples, dtype=np.float64))
    if len(real) == 0 or len(fake) == 0:
        raise ConfigError("zeta search needs non-empty real and fake samples")
    z0r = transport(field, real, solver.inverse)
    z0f = transport(field, fake, solver.inverse)
    eps = np.random.default_rng(eps_seed).standard_normal((max(len(real), len(fake)), real.shape[1]))
    values = []
    for zeta in grid:
        gen_r = transport(field, slerp(z0r, eps[:len(real)], zeta), solver.forward)
        gen_f = transport(field, slerp(z0f, eps[:len(fake)], zeta), solver.forward)
        values.append(float(np.mean(np.linalg.norm(gen_r - real, axis=1))
                            - np.mean(np.linalg.norm(gen_f - fake, axis=1))))
    return np.array(values)


def find_zeta_max(field, real_samples, fake_samples, grid=None, eps_seed=0,
                  solver=SolverConfig()):
    """Grid value maximising :func:`zeta_objective`; ties go to the smaller zeta."""
    grid = default_zeta_grid() if grid is None else sorted(float(g) for g in grid)
    if not grid:
        raise ConfigError("empty zeta grid")
    if any(not 0 < g <= 0.5 for g in grid):
        raise ConfigError("zeta grid values must lie in (0, 0.5]")
    values = zeta_objective(field, real_samples, fake_samples, grid, eps_seed, solver)
    return grid[int(np.argmax(values))]


# --------------------------------------------------------------------------
# training loops

@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    log_every: int = 100


class _Optimizer:
    """Adam + EMA bookkeeping around a field that is being trained."""

    def __init__(self, field, cfg):
        self.field = field
        self.cfg = cfg
        self.state = OptimState.for_params(field.params, cfg.learning_rate, cfg.beta1,
                                           cfg.beta2, cfg.eps)
        self.ema = EmaShadow(field.params, cfg.ema_decay)

    def apply(self, grads):
        params, _ = adam_step(self.field.params, grads, self.state)
        self.field = self.field.with_params(params, copy=False)
        self.ema.update(self.field.params)

    def averaged(self):
        return self.field.with_params(self.ema.shadow_params)


def train_base_flow(field, data, n_iter, batch_size=256, cfg=TrainingConfig(), seed=0,
                    time_dist=UNIFORM_TIME, callback=None):
    """Fit ``field`` to transport N(0, I) onto ``data`` with independent coupling.

    Returns ``(ema_field, log_rows)``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    rng = np.random.default_rng(seed)
    opt = _Optimizer(field.copy(), cfg)
    rows = []
    for i in range(1, n_iter + 1):
        x1 = data[rng.integers(len(data), size=batch_size)]
        x0 = rng.standard_normal(x1.shape)
        t = sample_time(time_dist, batch_size, rng)
        loss, grads = base_flow_loss(opt.field, x0, x1, t)
        opt.apply(grads)
        if i % cfg.log_every == 0 or i == n_iter:
            rows.append(LogRow(i, "base", loss, 0.0, cfg.learning_rate, 0))
            if callback:
                callback(rows[-1])
    return opt.averaged(), rows


def distill(field, pairs, n_iter, batch_size=256, cfg=TrainingConfig(), seed=0):
    """Train a one-step map ``T(z0) = z0 + v(z0, 0)`` onto the pairs' endpoints.

    Starts from ``field``'s parameters. Returns ``(ema_field, log_rows)``.
    """
    if len(pairs) == 0:
        raise ConfigError("cannot distill from an empty pair set")
    rng = np.random.default_rng(seed)
    opt = _Optimizer(field.copy(), cfg)
    rows = []
    zero_t = np.zeros(batch_size)
    for i in range(1, n_iter + 1):
        idx = rng.integers(len(pairs), size=batch_size)
        loss, grads = base_flow_loss(opt.field, pairs.z0[idx], pairs.z1[idx], zero_t)
        opt.apply(grads)
        if i % cfg.log_every == 0 or i == n_iter:
            rows.append(LogRow(i, "distill", loss, 0.0, cfg.learning_rate, 0))
    return opt.averaged(), rows


@dataclass
class LogRow:
    step: int
    phase: str
    loss: float
    zeta: float
    lr: float
    repairs_done: int

    HEADER = ("step", "phase", "loss", "zeta", "lr", "repairs_done")

    def as_tuple(self):
        return (self.step, self.phase, repr(self.loss), repr(self.zeta), repr(self.lr),
                self.repairs_done)


@dataclass
class ReflowBuffers:
    fake: PairSet
    real: PairSet | None = None
    x1: np.ndarray | None = None


class ReflowTrainer:
    """Step-by-step driver for original and balanced conic reflow.

    ``zeta_max=None`` triggers the grid search after warm-up; a number fixes
    it. The returned field is the EMA of the trained parameters.
    """

    def __init__(self, field, plan, buffers, cfg=TrainingConfig(), seed=0,
                 zeta_max=None, zeta_grid=None, n_phases=4, schedule_scaling="linear",
                 time_dist=EXPONENTIAL_TIME, inverse_solver=SolverConfig("euler", 100),
                 zeta_search_samples=2000, w_t=1.0):
        if plan.procedure == "balanced_conic" and plan.u_real and buffers.x1 is None \
                and buffers.real is None:
            raise ConfigError("balanced conic reflow needs real samples")
        self.plan = plan
        self.buffers = buffers
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.opt = _Optimizer(field.copy(), cfg)
        self.time_dist = time_dist
        self.inverse_solver = inverse_solver
        self.zeta_grid = zeta_grid
        self.zeta_search_samples = zeta_search_samples
        self.w_t = w_t
        self.n_phases = n_phases
        self.schedule_scaling = schedule_scaling
        self.schedule = None if zeta_max is None else SlerpSchedule(zeta_max, n_phases,
                                                                   schedule_scaling)
        self._search_seed = int(self.rng.integers(2 ** 63))
        self.cnt = 0
        self.repairs_done = 0
        self.phase = 0
        self.step_counts = {"real": 0, "fake": 0}
        self.last_phase = None
        self.rows = []
        if plan.procedure == "balanced_conic" and plan.u_real and buffers.real is None:
            self._regenerate_real_pairs()

    @property
    def field(self):
        return self.opt.field

    def result(self):
        return self.opt.averaged()

    @property
    def zeta_max(self):
        return None if self.schedule is None else self.schedule.zeta_max

    def current_zeta(self):
        if self.schedule is None:
            return 0.0
        progress = 1.0 - self.cnt / self.plan.repair_interval
        return float(self.schedule.zeta(progress, self.phase))

    def _regenerate_real_pairs(self):
        x1 = self.buffers.x1 if self.buffers.x1 is not None else self.buffers.real.z1
        self.buffers.real = make_real_pairs(self.opt.field, None, len(x1), self.inverse_solver,
                                            x1=x1, order_k=self.plan.reflow_order_k)

    def _search_zeta_max(self):
        n = self.zeta_search_samples
        real = self.buffers.real.z1[:n]
        fake = self.buffers.fake.z1[:n]
        zeta = find_zeta_max(self.opt.field, real, fake, self.zeta_grid, self._search_seed,
                             self.inverse_solver)
        log.info("zeta_max = %.4g", zeta)
        self.schedule = SlerpSchedule(zeta, self.n_phases, self.schedule_scaling)
        self.phase = 0

    def step(self, i):
        """Run training step ``i`` (1-based) and return its log row."""
        plan = self.plan
        real_remaining = plan.procedure == "balanced_conic" and i <= plan.last_real_step
        if real_remaining and self.schedule is None and i == plan.warmup_steps + 1:
            self._search_zeta_max()
        if real_remaining and self.cnt == plan.repair_interval:
            self._regenerate_real_pairs()
            self.repairs_done += 1
            if self.schedule is not None:
                self.phase += 1
            self.cnt = 0
        b = plan.batch_size
        t = sample_time(self.time_dist, b, self.rng)
        if plan.is_real(i):
            pairs = self.buffers.real.subset(self.rng.integers(len(self.buffers.real), size=b))
            eps = self.rng.standard_normal(pairs.z0.shape)
            zeta = self.current_zeta()
            loss, grads = conic_loss(self.opt.field, pairs, eps, zeta, t, self.w_t)
            phase = "real"
        else:
            pairs = self.buffers.fake.subset(self.rng.integers(len(self.buffers.fake), size=b))
            zeta = 0.0
            loss, grads = fake_reflow_loss(self.opt.field, pairs, t)
            phase = "fake"
        self.opt.apply(grads)
        self.step_counts[phase] += 1
        self.last_phase = phase
        self.cnt += 1
        row = LogRow(i, phase, loss, zeta, self.cfg.learning_rate, self.repairs_done)
        if i % self.cfg.log_every == 0 or i == plan.total_steps:
            self.rows.append(row)
        return row

    def run(self):
        for i in range(1, self.plan.total_steps + 1):
            self.step(i)
        return self.result()


def balanced_step(trainer, step_index):
    """One step of balanced conic reflow; see :meth:`ReflowTrainer.step`."""
    return trainer.step(step_index)


def original_reflow(field, fake_pairs, n_iter, batch_size=256, cfg=TrainingConfig(), seed=0,
                    order_k=2):
    plan = ReflowPlan(n_iter, batch_size=batch_size, reflow_order_k=order_k,
                      procedure="original")
    trainer = ReflowTrainer(field, plan, ReflowBuffers(fake_pairs), cfg, seed)
    return trainer.run(), trainer

