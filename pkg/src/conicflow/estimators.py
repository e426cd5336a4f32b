"""scikit-learn style wrappers around the training loops.

``transform`` maps data to latent noise (inverse transport) and
``inverse_transform`` maps noise to data (forward transport), so a fitted
flow behaves like an invertible transformer::

    flow = RectifiedFlow(n_iter=20000, learning_rate=2e-3).fit(X)
    reflowed = Reflow(flow, procedure="balanced_conic").fit(X)
    Z = reflowed.transform(X)
    X_new = reflowed.sample(1000)
"""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import make_fake_pairs, sample, standard_gaussian
from .exceptions import ConfigError
from .metrics import curvature, ivd, recon_error
from .nn import VelocityField
from .ode import SolverConfig, integrate, one_step_generate, transport
from .reflow import (EXPONENTIAL_TIME, ReflowBuffers, ReflowPlan, ReflowTrainer,
                     TrainingConfig, default_zeta_grid, distill, train_base_flow)


def _check_seed(random_state):
    if random_state is None:
        return 0
    if not isinstance(random_state, numbers.Integral) or random_state < 0:
        raise ConfigError("random_state must be a non-negative integer")
    return int(random_state)


def _check_positive(**values):
    for name, v in values.items():
        if v is None or v <= 0:
            raise ConfigError(f"{name} must be positive, got {v!r}")


def _check_points(est, X):
    X = check_array(X, dtype=np.float64)
    if hasattr(est, "n_features_in_") and X.shape[1] != est.n_features_in_:
        raise ConfigError(f"X has {X.shape[1]} features; the flow was fitted on "
                          f"{est.n_features_in_}")
    return X


class _FlowMixin(TransformerMixin):
    """Transport methods shared by every fitted flow (needs ``field_``)."""

    def _solver(self):
        return SolverConfig(self.solver, self.n_steps)

    def transform(self, X):
        """Inverse transport: data points to their latent noise."""
        check_is_fitted(self, "field_")
        return transport(self.field_, _check_points(self, X), self._solver().inverse)

    def inverse_transform(self, Z):
        """Forward transport: noise to data."""
        check_is_fitted(self, "field_")
        return transport(self.field_, _check_points(self, Z), self._solver().forward)

    def sample(self, n_samples, random_state=None):
        check_is_fitted(self, "field_")
        _check_positive(n_samples=n_samples)
        z0 = sample(standard_gaussian(self.n_features_in_), n_samples, _check_seed(random_state))
        return self.inverse_transform(z0)

    def velocity(self, X, t):
        check_is_fitted(self, "field_")
        return self.field_(_check_points(self, X), t)

    def trajectory(self, Z):
        check_is_fitted(self, "field_")
        return integrate(self.field_, _check_points(self, Z), self._solver())

    def straightness(self, n_samples=2000, random_state=None):
        """``(curvature, ivd)`` estimated from fresh noise."""
        check_is_fitted(self, "field_")
        z0 = sample(standard_gaussian(self.n_features_in_), n_samples, _check_seed(random_state))
        return curvature(self.field_, z0), ivd(self.field_, z0)

    def reconstruction_error(self, X, eps=None, random_state=None):
        """One-step Euler round-trip error on ``X`` (perturbed when ``eps`` is given)."""
        check_is_fitted(self, "field_")
        return recon_error(self.field_, _check_points(self, X), eps, seed=_check_seed(random_state))


class RectifiedFlow(_FlowMixin, BaseEstimator):
    """1-rectified flow from N(0, I) to the empirical distribution of ``X``."""

    def __init__(self, hidden_dims=(128, 128, 128), n_frequencies=16, activation="silu",
                 n_iter=20000, batch_size=256, learning_rate=2e-3, ema_decay=0.999,
                 solver="euler", n_steps=100, random_state=0):
        self.hidden_dims = hidden_dims
        self.n_frequencies = n_frequencies
        self.activation = activation
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ema_decay = ema_decay
        self.solver = solver
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        _check_positive(n_iter=self.n_iter, batch_size=self.batch_size,
                        learning_rate=self.learning_rate)
        seed = _check_seed(self.random_state)
        self._solver()
        field = VelocityField.init(X.shape[1], self.hidden_dims, self.n_frequencies,
                                   self.activation, seed=seed)
        cfg = TrainingConfig(learning_rate=self.learning_rate, ema_decay=self.ema_decay)
        self.field_, rows = train_base_flow(field, X, self.n_iter, self.batch_size, cfg,
                                            seed=seed + 1)
        self.loss_curve_ = np.array([r.loss for r in rows])
        self.n_features_in_ = X.shape[1]
        self.order_k_ = 1
        return self


class Reflow(_FlowMixin, BaseEstimator):
    """k-rectified flow trained from a fitted ``teacher`` flow.

    ``procedure="original"`` uses fake pairs only and ignores ``X``;
    ``"balanced_conic"`` also inverts ``X`` into real pairs.
    """

    def __init__(self, teacher, procedure="balanced_conic", n_iter=5000, n_fake=50000,
                 batch_size=256, learning_rate=1e-3, ema_decay=0.999, repair_interval=500,
                 warmup_steps=None, n_phases=4, zeta_max=None, zeta_grid_size=10,
                 solver="euler", n_steps=100, random_state=0):
        self.teacher = teacher
        self.procedure = procedure
        self.n_iter = n_iter
        self.n_fake = n_fake
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ema_decay = ema_decay
        self.repair_interval = repair_interval
        self.warmup_steps = warmup_steps
        self.n_phases = n_phases
        self.zeta_max = zeta_max
        self.zeta_grid_size = zeta_grid_size
        self.solver = solver
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_is_fitted(self.teacher, "field_")
        if self.procedure not in ("original", "balanced_conic"):
            raise ConfigError(f"unknown procedure {self.procedure!r}")
        _check_positive(n_iter=self.n_iter, n_fake=self.n_fake)
        seed = _check_seed(self.random_state)
        teacher = self.teacher.field_
        dim = teacher.input_dim
        x1 = None
        if self.procedure == "balanced_conic":
            if X is None:
                raise ConfigError("balanced conic reflow needs real samples X")
            x1 = check_array(X, dtype=np.float64)
            if x1.shape[1] != dim:
                raise ConfigError(f"X has {x1.shape[1]} features; teacher has {dim}")
        order_k = getattr(self.teacher, "order_k_", 1) + 1
        solver = self._solver()
        fake = make_fake_pairs(teacher, standard_gaussian(dim), self.n_fake, solver, seed=seed,
                               order_k=order_k)
        plan = ReflowPlan(self.n_iter, self.repair_interval, self.warmup_steps, self.batch_size,
                          order_k, self.procedure)
        cfg = TrainingConfig(learning_rate=self.learning_rate, ema_decay=self.ema_decay)
        trainer = ReflowTrainer(teacher, plan, ReflowBuffers(fake, x1=x1), cfg, seed=seed + 1,
                                zeta_max=self.zeta_max,
                                zeta_grid=default_zeta_grid(self.zeta_grid_size),
                                n_phases=self.n_phases, time_dist=EXPONENTIAL_TIME,
                                inverse_solver=solver)
        self.field_ = trainer.run()
        self.fake_pairs_ = fake
        self.zeta_max_ = trainer.zeta_max
        self.repairs_ = trainer.repairs_done
        self.loss_curve_ = np.array([r.loss for r in trainer.rows])
        self.n_features_in_ = dim
        self.order_k_ = order_k
        return self


class DistilledFlow(_FlowMixin, BaseEstimator):
    """One-step generator distilled from a fitted teacher flow.

    ``predict(Z)`` applies the single Euler step ``z + v(z, 0)``.
    """

    def __init__(self, teacher, n_iter=5000, n_pairs=50000, batch_size=256,
                 learning_rate=1e-3, solver="euler", n_steps=100, random_state=0):
        self.teacher = teacher
        self.n_iter = n_iter
        self.n_pairs = n_pairs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.solver = solver
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_is_fitted(self.teacher, "field_")
        _check_positive(n_iter=self.n_iter, n_pairs=self.n_pairs)
        seed = _check_seed(self.random_state)
        teacher = self.teacher.field_
        pairs = make_fake_pairs(teacher, standard_gaussian(teacher.input_dim), self.n_pairs,
                                self._solver(), seed=seed)
        cfg = TrainingConfig(learning_rate=self.learning_rate)
        self.field_, rows = distill(teacher, pairs, self.n_iter, self.batch_size, cfg,
                                    seed=seed + 1)
        self.loss_curve_ = np.array([r.loss for r in rows])
        self.n_features_in_ = teacher.input_dim
        self.order_k_ = getattr(self.teacher, "order_k_", 1)
        return self

    def predict(self, Z):
        check_is_fitted(self, "field_")
        return one_step_generate(self.field_, _check_points(self, Z))

    def sample(self, n_samples, random_state=None):
        check_is_fitted(self, "field_")
        _check_positive(n_samples=n_samples)
        z0 = sample(standard_gaussian(self.n_features_in_), n_samples, _check_seed(random_state))
        return self.predict(z0)
