"""Straightness, reconstruction and distribution-drift diagnostics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import sample, standard_gaussian
from .exceptions import ConfigError
from .ode import SolverConfig, integrate, reconstruct

log = logging.getLogger(__name__)

ONE_STEP = SolverConfig("euler", 1)
CURVATURE_SOLVER = SolverConfig("euler", 100)


# --------------------------------------------------------------------------
# straightness

def velocity_deltas(traj):
    """Per-node mean of ``|(Z1 - Z0) - v(Z_t, t)|^2`` over the batch."""
    if traj.velocities is None:
        raise ConfigError("trajectory has no recorded velocities")
    z0, z1 = (traj.states[0], traj.states[-1])
    if traj.times[0] > traj.times[-1]:
        z0, z1 = z1, z0
    chord = z1 - z0
    return np.mean(np.sum((chord[None] - traj.velocities) ** 2, axis=2), axis=1)


def _trajectory(field, z0, n_time_nodes, method):
    if n_time_nodes < 2:
        raise ConfigError("need at least two time nodes")
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    return integrate(field, z0, SolverConfig(method, n_time_nodes - 1))


def curvature_from_trajectory(traj):
    vals = velocity_deltas(traj)
    t = traj.times
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.abs(np.diff(t))))


def curvature(field, z0_samples, n_time_nodes=101, method="euler"):
    """Trapezoidal estimate of the time-integrated squared chord deviation."""
    return curvature_from_trajectory(_trajectory(field, z0_samples, n_time_nodes, method))


def ivd_from_trajectory(field, traj, t0=0.0):
    """Chord deviation at ``t0``; off-grid times interpolate the state linearly."""
    if not 0.0 <= t0 <= 1.0:
        raise ConfigError("t0 must lie in [0, 1]")
    times = traj.times
    chord = traj.states[-1] - traj.states[0]
    hit = np.flatnonzero(np.abs(times - t0) <= 1e-12)
    if hit.size:
        vel = traj.velocities[hit[0]]
    else:
        j = int(np.searchsorted(times, t0)) - 1
        w = (t0 - times[j]) / (times[j + 1] - times[j])
        state = (1 - w) * traj.states[j] + w * traj.states[j + 1]
        vel = field(state, t0)
    return float(np.mean(np.sum((chord - vel) ** 2, axis=1)))


def ivd(field, z0_samples, t0=0.0, n_time_nodes=101, method="euler"):
    """Mean ``|(Z1 - Z0) - v(Z_t0, t0)|^2``."""
    return ivd_from_trajectory(field, _trajectory(field, z0_samples, n_time_nodes, method), t0)


def topk_curvature_indices(field, z0_samples, n_steps=100, k=10):
    """Solver steps with the largest chord deviation, largest first.

    Ties resolve to the lower step index.
    """
    if not 1 <= k <= n_steps:
        raise ConfigError("need 1 <= k <= n_steps")
    traj = _trajectory(field, z0_samples, n_steps + 1, "euler")
    vals = velocity_deltas(traj)[:n_steps]
    order = np.lexsort((np.arange(n_steps), -vals))
    return [int(i) for i in order[:k]]


# --------------------------------------------------------------------------
# reconstruction

def recon_error(field, samples, eps=None, inv_solver=ONE_STEP, fwd_solver=ONE_STEP, seed=0):
    """Mean ``|x - v(v^-1(x) + eps z)|`` with ``z ~ N(0, I)`` drawn from ``seed``.

    ``eps=None`` gives the plain reconstruction error.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(x) == 0:
        raise ConfigError("no samples")
    perturbation = None
    if eps is not None:
        if eps < 0:
            raise ConfigError("eps must be non-negative")
        z = np.random.default_rng(seed).standard_normal(x.shape)
        perturbation = (eps, z)
    rec = reconstruct(field, x, inv_solver, fwd_solver, perturbation)
    return float(np.mean(np.linalg.norm(x - rec, axis=1)))


# --------------------------------------------------------------------------
# Gaussian mixtures

@dataclass
class GmmFit:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    ll_history: list = field(default_factory=list, repr=False)
    regularized: bool = False

    @property
    def n_components(self):
        return len(self.weights)

    def log_pdf(self, x):
        logp = _component_log_probs(np.atleast_2d(x), self.weights, self.means,
                                    self.covariances)
        return logsumexp(logp, axis=1)

    def sample(self, n, seed=None):
        rng = np.random.default_rng(seed)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        eps = rng.standard_normal((n, self.means.shape[1]))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)


def logsumexp(a, axis=1):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _component_log_probs(x, weights, means, covs):
    n, d = x.shape
    out = np.empty((n, len(weights)))
    for k in range(len(weights)):
        chol = np.linalg.cholesky(covs[k])
        sol = (x - means[k]) @ np.linalg.inv(chol).T
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = (np.log(weights[k]) - 0.5 * (d * np.log(2 * np.pi) + logdet)
                     - 0.5 * np.einsum("ij,ij->i", sol, sol))
    return out


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(x)) if total == 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp, floor):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    d = x.shape[1]
    covs = np.empty((len(nk), d, d))
    collapsed = False
    for k in range(len(nk)):
        diff = x - means[k]
        c = (resp[:, k, None] * diff).T @ diff / nk[k]
        c = 0.5 * (c + c.T)
        if np.linalg.eigvalsh(c)[0] < floor:
            c = c + floor * np.eye(d)
            collapsed = True
        covs[k] = c
    return weights, means, covs, collapsed


def fit_gmm(samples, n_components=8, n_iter=200, seed=0, n_init=5, tol=1e-10, floor=1e-6):
    """Full-covariance EM with k-means++ seeding.

    Runs ``n_init`` seeded restarts and keeps the highest final likelihood.
    ``ll_history`` holds the mean log-likelihood at every E-step and is
    nondecreasing unless a collapsed covariance had to be floored, which
    sets ``regularized``.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(x) < 10 * n_components:
        raise ConfigError(f"need at least {10 * n_components} samples for "
                          f"{n_components} components")
    if n_init < 1:
        raise ConfigError("n_init must be >= 1")
    best = None
    for rng in map(np.random.default_rng, np.random.SeedSequence(seed).spawn(n_init)):
        fit = _em(x, n_components, n_iter, rng, tol, floor)
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    if best.regularized:
        log.warning("GMM fit floored a collapsed covariance")
    return best


def _em(x, n_components, n_iter, rng, tol, floor):
    centers = _kmeans_pp(x, n_components, rng)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(n_components)[labels]
    weights, means, covs, regularized = _m_step(x, resp, floor)
    history = []
    for _ in range(n_iter):
        logp = _component_log_probs(x, weights, means, covs)
        lse = logsumexp(logp, axis=1)
        history.append(float(lse.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol * max(1.0, abs(history[-1])):
            break
        resp = np.exp(logp - lse[:, None])
        weights, means, covs, collapsed = _m_step(x, resp, floor)
        regularized |= collapsed
    if len(history) == n_iter:
        logp = _component_log_probs(x, weights, means, covs)
        history.append(float(logsumexp(logp, axis=1).mean()))
    return GmmFit(weights, means, covs, history[-1], history, regularized)


def gmm_kl(p, q, n_mc=100_000, seed=0, return_stderr=False):
    """Monte-Carlo ``E_p[log p - log q]`` (not clamped)."""
    if p.means.shape[1] != q.means.shape[1]:
        raise ConfigError("mixtures live in different dimensions")
    if n_mc <= 0:
        raise ConfigError("n_mc must be positive")
    x = p.sample(n_mc, seed)
    diff = p.log_pdf(x) - q.log_pdf(x)
    est = float(diff.mean())
    if return_stderr:
        return est, float(diff.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else np.inf
    return est


def kl_between_samples(fake, real, n_components=8, n_iter=200, n_mc=100_000, seed=0, n_init=5):
    """``KL(fake || real)`` between GMM approximations, clamped at zero."""
    p = fit_gmm(fake, n_components, n_iter, seed, n_init)
    q = fit_gmm(real, n_components, n_iter, seed + 1, n_init)
    return max(0.0, gmm_kl(p, q, n_mc, seed + 2))


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    curvature: float
    ivd: float
    recon_real: float
    recon_fake: float
    precon_real: float
    precon_fake: float
    eps: float
    kl_to_target: float
    nfe_mean: float
    sample_count: int
    solver_used: str
    order_k: int = 1
    procedure: str = "base"

    FIELDS = ("order_k", "procedure", "curvature", "ivd", "recon_real", "recon_fake",
              "precon_real", "precon_fake", "eps", "kl_to_target", "nfe_mean",
              "sample_count", "solver_used")

    def __post_init__(self):
        for name in ("curvature", "ivd", "recon_real", "recon_fake", "precon_real",
                     "precon_fake", "kl_to_target", "nfe_mean"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"metric {name} = {v} is not a finite non-negative number")
        if self.sample_count <= 0:
            raise ConfigError("sample_count must be positive")

    @property
    def recon_gap(self):
        return abs(self.recon_real - self.recon_fake)

    def csv_row(self):
        d = asdict(self)
        return [d[k] if isinstance(d[k], (int, str)) else repr(float(d[k])) for k in self.FIELDS]

    def to_text(self):
        width = max(map(len, self.FIELDS))
        lines = [f"{k:<{width}} : {v}" for k, v in zip(self.FIELDS, self.csv_row())]
        return "\n".join(lines)


def evaluate(field, target, n_samples=10_000, seed=0, eps=0.05,
             gen_solver=CURVATURE_SOLVER, recon_inv=ONE_STEP, recon_fwd=ONE_STEP,
             real_samples=None, fake_samples=None, order_k=1, procedure="base",
             gmm_components=8, gmm_iter=200, gmm_restarts=5, n_mc=100_000):
    """Full diagnostic report for one flow.

    The KL term compares the flow's own outputs from fresh noise against the
    real samples, which come from ``target`` unless ``real_samples`` is given.
    The reconstruction errors use ``real_samples`` and ``fake_samples``; the
    latter default to the flow's own outputs. Pass a teacher's outputs there
    to measure how closely a reflowed model tracks its supervision.
    """
    seeds = np.random.SeedSequence(seed).spawn(5)
    rng = [np.random.default_rng(s) for s in seeds]
    dim = field.input_dim
    z0 = sample(standard_gaussian(dim), n_samples, rng[0])
    traj = integrate(field, z0, CURVATURE_SOLVER)
    curv = curvature_from_trajectory(traj)
    ivd0 = ivd_from_trajectory(field, traj, 0.0)
    if gen_solver == CURVATURE_SOLVER:
        fake, nfe = traj.end, traj.nfe
    else:
        gen = integrate(field, z0, gen_solver, record=False)
        fake, nfe = gen.end, gen.nfe
    real = sample(target, n_samples, rng[1]) if real_samples is None else real_samples
    recon_fake_set = fake if fake_samples is None else np.atleast_2d(fake_samples)
    pseed = int(rng[2].integers(2 ** 32))
    report = MetricsReport(
        curvature=curv,
        ivd=ivd0,
        recon_real=recon_error(field, real, None, recon_inv, recon_fwd),
        recon_fake=recon_error(field, recon_fake_set, None, recon_inv, recon_fwd),
        precon_real=recon_error(field, real, eps, recon_inv, recon_fwd, pseed),
        precon_fake=recon_error(field, recon_fake_set, eps, recon_inv, recon_fwd, pseed),
        eps=eps,
        kl_to_target=kl_between_samples(fake, real, gmm_components, gmm_iter, n_mc,
                                        seed=int(rng[3].integers(2 ** 31)),
                                        n_init=gmm_restarts),
        nfe_mean=float(nfe),
        sample_count=len(z0),
        solver_used=gen_solver.describe(),
        order_k=order_k,
        procedure=procedure,
    )
    return report, fake, real, velocity_deltas(traj)
