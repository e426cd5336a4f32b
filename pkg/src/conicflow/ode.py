"""Fixed-step and adaptive integration of ``dz/dt = v(z, t)`` on [0, 1].

Forward transport runs from t=0 (noise) to t=1 (data); inverse transport
runs the same field backwards from t=1 to t=0. All solvers work on a batch
of points at once; the adaptive solver shares one step size across the batch.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError, IntegrationError

METHODS = ("euler", "heun", "rk45")
_EVALS_PER_STEP = {"euler": 1, "heun": 2}

# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    n_steps: int = 100
    rtol: float = 1e-5
    atol: float = 1e-5
    direction: str = "forward"
    first_step: float = 1e-3
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    min_step: float = 1e-12

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver method {self.method!r}")
        if self.direction not in ("forward", "inverse"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.method != "rk45" and self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.method == "rk45" and (self.rtol <= 0 or self.atol <= 0):
            raise ConfigError("rtol and atol must be positive")

    @property
    def forward(self):
        return replace(self, direction="forward")

    @property
    def inverse(self):
        return replace(self, direction="inverse")

    def describe(self):
        if self.method == "rk45":
            return f"rk45(rtol={self.rtol:g},atol={self.atol:g})"
        return f"{self.method}({self.n_steps})"


@dataclass
class Trajectory:
    """Nodes of one batched solve.

    ``states`` and ``velocities`` have shape ``(n_nodes, B, d)``; velocities
    are the field's values ``v(z, t)`` at the accepted nodes.
    """

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray | None
    nfe: int
    n_accepted: int
    n_rejected: int = 0
    single: bool = False

    @property
    def start(self):
        return self.states[0, 0] if self.single else self.states[0]

    @property
    def end(self):
        return self.states[-1, 0] if self.single else self.states[-1]


def _check_state(z, t):
    bad = ~np.all(np.isfinite(z), axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise IntegrationError(f"non-finite state at t={t:.6g} (sample {idx})", t=t, index=idx)


def integrate(field, z_start, cfg=SolverConfig(), record=True):
    """Integrate ``field`` from ``z_start`` in the direction given by ``cfg``.

    ``field`` is any callable ``field(x, t)`` accepting batches. With
    ``record=False`` only the two endpoints are kept and no extra velocity
    evaluation is spent on the final node. NFE counts solver evaluations only;
    the diagnostic velocity recorded at the last node of a fixed-step solve is
    not included.
    """
    z = np.asarray(z_start, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z).copy()
    _check_state(z, 0.0 if cfg.direction == "forward" else 1.0)
    t0, t1 = (0.0, 1.0) if cfg.direction == "forward" else (1.0, 0.0)
    if cfg.method == "rk45":
        traj = _integrate_dopri(field, z, t0, t1, cfg, record)
    else:
        traj = _integrate_fixed(field, z, t0, t1, cfg, record)
    traj.single = single
    return traj


def _integrate_fixed(field, z, t0, t1, cfg, record):
    n = cfg.n_steps
    times = np.linspace(t0, t1, n + 1)
    states = [z]
    vels = []
    nfe = 0
    for i in range(n):
        t, h = times[i], times[i + 1] - times[i]
        k1 = field(z, t)
        nfe += 1
        if cfg.method == "euler":
            z = z + h * k1
        else:
            k2 = field(z + h * k1, times[i + 1])
            nfe += 1
            z = z + 0.5 * h * (k1 + k2)
        _check_state(z, times[i + 1])
        if record:
            vels.append(k1)
            states.append(z)
    if not record:
        return Trajectory(times[[0, -1]], np.stack([states[0], z]), None, nfe, n)
    vels.append(field(z, times[-1]))
    return Trajectory(times, np.stack(states), np.stack(vels), nfe, n)


def _integrate_dopri(field, z, t0, t1, cfg, record):
    sign = 1.0 if t1 > t0 else -1.0
    t = t0
    h = cfg.first_step
    k1 = field(z, t)
    nfe = 1
    times, states, vels = [t], [z], [k1]
    accepted = rejected = 0
    prev_err = 1e-4
    while sign * (t1 - t) > 0:
        h = min(h, abs(t1 - t))
        if h < cfg.min_step:
            raise IntegrationError(f"step size underflow ({h:.3g}) at t={t:.6g}", t=t)
        hs = sign * h
        ks = [k1]
        for s in range(1, 7):
            zs = z + hs * sum(a * k for a, k in zip(_DP_A[s], ks) if a != 0.0)
            ks.append(field(zs, t + _DP_C[s] * hs))
        nfe += 6
        z_new = zs  # stage 7 sits at the 5th-order solution (FSAL)
        err = hs * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z_new))
        per_sample = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        err_norm = float(np.max(per_sample)) if np.all(np.isfinite(z_new)) else np.inf
        if err_norm <= 1.0:
            t = t1 if h == abs(t1 - t) else t + hs
            z = z_new
            k1 = ks[6]
            accepted += 1
            _check_state(z, t)
            if record:
                times.append(t)
                states.append(z)
                vels.append(k1)
            if err_norm == 0.0:
                factor = cfg.max_factor
            else:
                factor = cfg.safety * err_norm ** -0.14 * prev_err ** 0.08
                factor = min(cfg.max_factor, max(cfg.min_factor, factor))
            prev_err = max(err_norm, 1e-4)
            h *= factor
        else:
            rejected += 1
            if not np.isfinite(err_norm):
                factor = cfg.min_factor
            else:
                factor = max(cfg.min_factor, cfg.safety * err_norm ** -0.2)
            h *= min(1.0, factor)
    if not record:
        return Trajectory(np.array([t0, t1]), np.stack([states[0], z]), None, nfe,
                          accepted, rejected)
    return Trajectory(np.array(times), np.stack(states), np.stack(vels), nfe, accepted, rejected)


def transport(field, z, cfg=SolverConfig()):
    """Endpoint of :func:`integrate` without recording the path."""
    return integrate(field, z, cfg, record=False).end


def one_step_generate(field, z0):
    """Single Euler step from t=0: ``z0 + v(z0, 0)``."""
    z0 = np.asarray(z0, dtype=np.float64)
    return z0 + field(z0, 0.0)


def reconstruct(field, x, cfg_inv=SolverConfig(), cfg_fwd=SolverConfig(), perturbation=None):
    """Round trip ``v(v^-1(x) + eps * z)``; ``perturbation`` is ``(eps, z)`` or None."""
    z0 = transport(field, x, cfg_inv.inverse)
    if perturbation is not None:
        eps, noise = perturbation
        z0 = z0 + eps * np.asarray(noise, dtype=np.float64)
    return transport(field, z0, cfg_fwd.forward)


def dump_trajectory_csv(traj, path, sample=0):
    """Write one sample's path as ``t,x_1..x_d,v_1..v_d`` rows."""
    if traj.velocities is None:
        raise ConfigError("trajectory was integrated without recording")
    d = traj.states.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *(f"x_{i + 1}" for i in range(d)), *(f"v_{i + 1}" for i in range(d))])
        for t, x, v in zip(traj.times, traj.states[:, sample], traj.velocities[:, sample]):
            writer.writerow([repr(float(t)), *map(repr, x.tolist()), *map(repr, v.tolist())])
    return path
