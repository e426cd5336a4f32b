"""Rectified flow, reflow and balanced conic reflow on low-dimensional toys.

Everything runs on NumPy: a dense velocity network with hand-written
gradients, fixed-step and adaptive ODE transport, the training objectives
and schedules, straightness and drift diagnostics, and a seeded pipeline.
"""
from .config import ExperimentConfig, load_config, parse_config
from .datasets import Distribution, PairSet, make_fake_pairs, make_real_pairs, sample
from .estimators import DistilledFlow, RectifiedFlow, Reflow
from .exceptions import ConfigError, IntegrationError, NumericalError
from .metrics import MetricsReport, curvature, evaluate, fit_gmm, gmm_kl, ivd, recon_error
from .nn import VelocityField, load_checkpoint, save_checkpoint
from .ode import SolverConfig, Trajectory, integrate, transport
from .pipeline import drift_demo, run_pipeline
from .reflow import ReflowPlan, ReflowTrainer, SlerpSchedule, find_zeta_max, slerp

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "load_config", "parse_config",
    "Distribution", "PairSet", "make_fake_pairs", "make_real_pairs", "sample",
    "DistilledFlow", "RectifiedFlow", "Reflow",
    "ConfigError", "IntegrationError", "NumericalError",
    "MetricsReport", "curvature", "evaluate", "fit_gmm", "gmm_kl", "ivd", "recon_error",
    "VelocityField", "load_checkpoint", "save_checkpoint",
    "SolverConfig", "Trajectory", "integrate", "transport",
    "drift_demo", "run_pipeline",
    "ReflowPlan", "ReflowTrainer", "SlerpSchedule", "find_zeta_max", "slerp",
]
