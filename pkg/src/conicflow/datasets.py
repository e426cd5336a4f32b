"""Synthetic source/target distributions and coupled pair buffers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, IntegrationError
from .ode import SolverConfig, transport

KINDS = ("standard_gaussian", "two_moons", "gaussian_mixture", "checkerboard")


@dataclass(frozen=True)
class Distribution:
    """A samplable distribution.

    ``two_moons`` follows scikit-learn's ``make_moons`` geometry: an upper
    unit half-circle and a lower one centred at (1, 0.5), with isotropic
    Gaussian noise of scale ``noise``. Points are drawn i.i.d. (uniform angle,
    fair coin for the moon) rather than on an even grid.
    """

    kind: str = "standard_gaussian"
    dim: int = 2
    noise: float = 0.05
    weights: tuple = ()
    means: tuple = ()
    covariances: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.kind in ("two_moons", "checkerboard") and self.dim != 2:
            raise ConfigError(f"{self.kind} is two-dimensional")
        if self.kind == "gaussian_mixture":
            if not self.weights or len(self.weights) != len(self.means):
                raise ConfigError("mixture needs matching weights and means")
            if any(len(m) != self.dim for m in self.means):
                raise ConfigError("mixture means must match dim")

    def sample(self, n, seed=None):
        return sample(self, n, seed)


def standard_gaussian(dim=2):
    return Distribution("standard_gaussian", dim)


def two_moons(noise=0.05):
    return Distribution("two_moons", 2, noise=noise)


def sample(dist, n, seed=None):
    """Draw ``n`` i.i.d. points; ``seed`` may be an int or a ``Generator``."""
    if n <= 0:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng(seed)
    if dist.kind == "standard_gaussian":
        return rng.standard_normal((n, dist.dim))
    if dist.kind == "two_moons":
        theta = rng.uniform(0.0, np.pi, n)
        lower = rng.random(n) < 0.5
        x = np.where(lower, 1.0 - np.cos(theta), np.cos(theta))
        y = np.where(lower, 0.5 - np.sin(theta), np.sin(theta))
        return np.column_stack([x, y]) + dist.noise * rng.standard_normal((n, 2))
    if dist.kind == "checkerboard":
        # 4x4 board on [-2, 2]^2, mass on cells where (row + col) is even
        col = rng.integers(0, 4, n)
        row = 2 * rng.integers(0, 2, n) + (col % 2)
        return np.column_stack([col, row]) - 2.0 + rng.random((n, 2))
    w = np.asarray(dist.weights, dtype=np.float64)
    comp = rng.choice(len(w), size=n, p=w / w.sum())
    means = np.asarray(dist.means, dtype=np.float64)
    if dist.covariances:
        chols = np.array([np.linalg.cholesky(np.asarray(c, dtype=np.float64))
                          for c in dist.covariances])
    else:
        chols = np.broadcast_to(np.eye(dist.dim), (len(w), dist.dim, dist.dim))
    eps = rng.standard_normal((n, dist.dim))
    return means[comp] + np.einsum("nij,nj->ni", chols[comp], eps)


@dataclass
class PairSet:
    """Coupled endpoints ``(z0, z1)``.

    ``provenance == "fake"``: ``z1`` is the forward transport of ``z0``.
    ``provenance == "real"``: ``z0`` is the inverse transport of ``z1``.
    """

    z0: np.ndarray
    z1: np.ndarray
    provenance: str
    order_k: int = 1
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.z0 = np.atleast_2d(np.asarray(self.z0, dtype=np.float64))
        self.z1 = np.atleast_2d(np.asarray(self.z1, dtype=np.float64))
        if self.z0.shape != self.z1.shape:
            raise ConfigError(f"pair endpoints differ in shape: {self.z0.shape} vs {self.z1.shape}")
        if self.provenance not in ("fake", "real"):
            raise ConfigError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return self.z0.shape[0]

    @property
    def dim(self):
        return self.z0.shape[1]

    def subset(self, idx):
        return PairSet(self.z0[idx], self.z1[idx], self.provenance, self.order_k)

    def save(self, path):
        """Header ``dim,count,provenance,order_k`` then ``z0...,z1...`` rows."""
        with open(path, "w") as fh:
            fh.write(f"{self.dim},{len(self)},{self.provenance},{self.order_k}\n")
            for a, b in zip(self.z0, self.z1):
                fh.write(",".join(f"{v:.17g}" for v in (*a, *b)) + "\n")
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            head = fh.readline().strip().split(",")
            if len(head) != 4:
                raise ConfigError(f"{path}: malformed pair header")
            dim, count, provenance, order_k = int(head[0]), int(head[1]), head[2], int(head[3])
            data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
        if data.shape != (count, 2 * dim):
            raise ConfigError(f"{path}: expected {count} rows of {2 * dim} values")
        return cls(data[:, :dim], data[:, dim:], provenance, order_k)


def _transport_chunked(field, z, cfg, chunk):
    out = np.empty_like(z)
    for start in range(0, len(z), chunk):
        stop = min(start + chunk, len(z))
        try:
            out[start:stop] = transport(field, z[start:stop], cfg)
        except IntegrationError as exc:
            index = None if exc.index is None else start + exc.index
            raise IntegrationError(f"{exc} while transporting pair {index}",
                                   t=exc.t, index=index) from exc
    return out


def make_fake_pairs(field, dist0, n, solver_config=SolverConfig(), seed=None,
                    order_k=1, chunk=4096):
    """``z0 ~ dist0`` paired with its forward transport under ``field``."""
    z0 = sample(dist0, n, seed)
    z1 = _transport_chunked(field, z0, solver_config.forward, chunk)
    return PairSet(z0, z1, "fake", order_k)


def make_real_pairs(field, dist1, n, solver_config=SolverConfig(), seed=None,
                    order_k=1, chunk=4096, x1=None):
    """Target samples paired with their inverse transport under ``field``.

    Pass ``x1`` to invert a fixed set of points instead of sampling ``dist1``.
    """
    if x1 is None:
        x1 = sample(dist1, n, seed)
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if len(x1) == 0:
        raise ConfigError("no target points to invert")
    z0 = _transport_chunked(field, x1, solver_config.inverse, chunk)
    return PairSet(z0, x1.copy(), "real", order_k)
