"""Experiment configuration read from an INI-style ``key = value`` file.

Every key has a default, so an empty file (or no file) describes the full
default experiment. Unknown sections or keys are rejected so that typos do
not silently fall back to defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datasets import KINDS
from .exceptions import ConfigError
from .ode import METHODS, SolverConfig

PROCEDURES = ("original", "balanced_conic")


@dataclass(frozen=True)
class DataSection:
    target: str = "two_moons"
    noise: float = 0.05
    n_train: int = 10_000


@dataclass(frozen=True)
class NetworkSection:
    hidden: tuple = (128, 128, 128)
    n_frequencies: int = 16
    activation: str = "silu"


@dataclass(frozen=True)
class BaseSection:
    steps: int = 20_000
    learning_rate: float = 2e-3
    batch_size: int = 256
    ema_decay: float = 0.999


@dataclass(frozen=True)
class ReflowSection:
    procedures: tuple = ("original", "balanced_conic")
    max_order: int = 3
    steps: int = 5_000
    learning_rate: float = 1e-3
    batch_size: int = 256
    ema_decay: float = 0.999
    n_fake: int = 50_000
    n_real: int = 10_000
    repair_interval: int = 500
    warmup_steps: int = -1
    n_phases: int = 4
    zeta_max: str = "auto"
    zeta_grid_size: int = 10
    zeta_search_samples: int = 2_000
    schedule_scaling: str = "linear"
    time_a: float = 3.0

    @property
    def fixed_zeta(self):
        return None if self.zeta_max == "auto" else float(self.zeta_max)


@dataclass(frozen=True)
class SolverSection:
    pair_method: str = "euler"
    pair_steps: int = 100
    sample_method: str = "euler"
    sample_steps: int = 100
    rtol: float = 1e-5
    atol: float = 1e-5

    @property
    def pair_solver(self):
        return SolverConfig(self.pair_method, self.pair_steps, self.rtol, self.atol)

    @property
    def sample_solver(self):
        return SolverConfig(self.sample_method, self.sample_steps, self.rtol, self.atol)


@dataclass(frozen=True)
class EvalSection:
    n_samples: int = 10_000
    eps: float = 0.05
    gmm_components: int = 8
    gmm_iter: int = 200
    gmm_restarts: int = 5
    n_mc: int = 100_000


@dataclass(frozen=True)
class DistillSection:
    enabled: bool = True
    teacher_order: int = 2
    steps: int = 5_000
    n_pairs: int = 50_000
    learning_rate: float = 1e-3
    batch_size: int = 256


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    log_every: int = 100
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    base: BaseSection = field(default_factory=BaseSection)
    reflow: ReflowSection = field(default_factory=ReflowSection)
    solver: SolverSection = field(default_factory=SolverSection)
    eval: EvalSection = field(default_factory=EvalSection)
    distill: DistillSection = field(default_factory=DistillSection)

    def __post_init__(self):
        validate(self)

    def with_overrides(self, seed=None, out=None):
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if out is not None:
            changes["out"] = str(out)
        return replace(self, **changes) if changes else self

    def to_ini(self):
        """Serialise back to the file format; ``load_config`` round-trips it."""
        cp = configparser.ConfigParser()
        cp["experiment"] = {k: _fmt(getattr(self, k)) for k in ("seed", "out", "log_every")}
        for name in _SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(section, f.name)) for f in fields(section)}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)


_SECTIONS = {
    "data": DataSection,
    "network": NetworkSection,
    "base": BaseSection,
    "reflow": ReflowSection,
    "solver": SolverSection,
    "eval": EvalSection,
    "distill": DistillSection,
}


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(raw, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _build(cls, items, where):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[key] = _convert(raw, getattr(defaults, key), f"{where}.{key}")
    return cls(**kwargs)


def parse_config(text, source="<string>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    top = {}
    sections = {}
    for name in cp.sections():
        if name == "experiment":
            top = _build(_Top, cp.items(name), name).__dict__
        elif name in _SECTIONS:
            sections[name] = _build(_SECTIONS[name], cp.items(name), name)
        else:
            raise ConfigError(f"{source}: unknown section [{name}]")
    return ExperimentConfig(**top, **sections)


@dataclass(frozen=True)
class _Top:
    seed: int = 0
    out: str = "runs/default"
    log_every: int = 100


def load_config(path=None):
    """Read ``path``; ``None`` gives the default experiment."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def validate(cfg):
    """Raise :class:`ConfigError` on any inconsistent setting."""
    def positive(where, **values):
        for k, v in values.items():
            if v <= 0:
                raise ConfigError(f"{where}.{k} must be positive, got {v}")

    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    positive("experiment", log_every=cfg.log_every)
    d = cfg.data
    if d.target not in KINDS or d.target == "standard_gaussian":
        raise ConfigError(f"data.target must be one of two_moons, checkerboard; got {d.target!r}")
    if d.target == "gaussian_mixture":
        raise ConfigError("gaussian_mixture targets need explicit parameters; use the Python API")
    positive("data", n_train=d.n_train)
    if d.noise < 0:
        raise ConfigError("data.noise must be non-negative")
    n = cfg.network
    if not n.hidden or any(h <= 0 for h in n.hidden):
        raise ConfigError("network.hidden must list positive widths")
    if n.n_frequencies < 0 or n.activation not in ("silu", "tanh"):
        raise ConfigError("network.n_frequencies must be >= 0 and activation silu|tanh")
    b = cfg.base
    positive("base", steps=b.steps, learning_rate=b.learning_rate, batch_size=b.batch_size)
    r = cfg.reflow
    if not r.procedures or any(p not in PROCEDURES for p in r.procedures):
        raise ConfigError(f"reflow.procedures must be drawn from {PROCEDURES}")
    if len(set(r.procedures)) != len(r.procedures):
        raise ConfigError("reflow.procedures lists a procedure twice")
    if r.max_order < 1:
        raise ConfigError("reflow.max_order must be >= 1")
    if r.steps < 0:
        raise ConfigError("reflow.steps must be >= 0")
    positive("reflow", learning_rate=r.learning_rate, batch_size=r.batch_size,
             n_fake=r.n_fake, n_real=r.n_real, repair_interval=r.repair_interval,
             n_phases=r.n_phases, zeta_grid_size=r.zeta_grid_size,
             zeta_search_samples=r.zeta_search_samples, time_a=r.time_a)
    if r.n_real > d.n_train:
        raise ConfigError("reflow.n_real cannot exceed data.n_train (real pairs come "
                          "from the training set)")
    if r.zeta_max != "auto":
        try:
            z = float(r.zeta_max)
        except ValueError:
            raise ConfigError(f"reflow.zeta_max must be 'auto' or a number, got {r.zeta_max!r}") \
                from None
        if not 0 < z <= 0.5:
            raise ConfigError("reflow.zeta_max must lie in (0, 0.5]")
    if r.schedule_scaling not in ("linear", "inverse"):
        raise ConfigError("reflow.schedule_scaling must be linear or inverse")
    if not 0 <= r.ema_decay < 1 or not 0 <= b.ema_decay < 1:
        raise ConfigError("ema_decay must lie in [0, 1)")
    s = cfg.solver
    for m in (s.pair_method, s.sample_method):
        if m not in METHODS:
            raise ConfigError(f"unknown solver method {m!r}")
    positive("solver", pair_steps=s.pair_steps, sample_steps=s.sample_steps,
             rtol=s.rtol, atol=s.atol)
    e = cfg.eval
    positive("eval", n_samples=e.n_samples, gmm_components=e.gmm_components,
             gmm_iter=e.gmm_iter, gmm_restarts=e.gmm_restarts, n_mc=e.n_mc)
    if e.eps < 0:
        raise ConfigError("eval.eps must be non-negative")
    if e.n_samples < 10 * e.gmm_components:
        raise ConfigError("eval.n_samples must be at least 10 * gmm_components")
    t = cfg.distill
    positive("distill", teacher_order=t.teacher_order, steps=t.steps, n_pairs=t.n_pairs, learning_rate=t.learning_rate,
             batch_size=t.batch_size)
    return cfg
