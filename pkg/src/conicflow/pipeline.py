"""Seeded end-to-end experiments: base flow, reflow rounds, evaluation, distillation.

Layout of an output directory::

    checkpoints/k1_base.cflow, k2_original.cflow, k2_balanced_conic.cflow, ...
    logs/train_<stage>.csv
    metrics.csv          one MetricsReport row per (k, procedure)
    drift.csv            KL(fake_k || real) per k for original reflow
    distill.csv          teacher vs distilled one-step KL
    plots/*.svg
    config.ini           the resolved configuration
    manifest.json        every file above with its sha256

All randomness derives from ``config.seed`` through per-stage seed streams,
so two runs of one config write identical CSV files.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import svg
from .config import ExperimentConfig
from .datasets import Distribution, make_fake_pairs, sample, standard_gaussian
from .exceptions import ConfigError
from .metrics import (ONE_STEP, MetricsReport, evaluate, kl_between_samples,
                      topk_curvature_indices)
from .nn import VelocityField, load_checkpoint, save_checkpoint
from .ode import integrate, one_step_generate, transport
from .reflow import (LogRow, ReflowBuffers, ReflowPlan, ReflowTrainer, TimeDistribution,
                     TrainingConfig, default_zeta_grid, distill, train_base_flow)

log = logging.getLogger(__name__)


def stage_seed(root, *names):
    """Stable integer seed for a named stage, independent of execution order."""
    key = [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(root, spawn_key=key).generate_state(1, np.uint64)[0]
               % (2 ** 63))


class StageError(RuntimeError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    out: Path
    reports: list = field(default_factory=list)
    fields: dict = field(default_factory=dict)
    drift: list = field(default_factory=list)
    distill: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def report(self, order_k, procedure):
        for r in self.reports:
            if r.order_k == order_k and r.procedure == procedure:
                return r
        raise KeyError((order_k, procedure))


class RunContext:
    """Output directory bookkeeping shared by the stages."""

    def __init__(self, cfg, out=None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        try:
            for sub in ("", "checkpoints", "logs", "plots"):
                (self.out / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc.strerror}") \
                from None
        self.files = []
        self.timings = {}

    def path(self, rel):
        p = self.out / rel
        if rel not in self.files:
            self.files.append(rel)
        return p

    @contextlib.contextmanager
    def stage(self, name):
        log.info("stage %s: start", name)
        start = time.perf_counter()
        try:
            yield
        except (ConfigError, StageError):
            self.write_manifest()
            raise
        except Exception as exc:
            self.write_manifest()
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - start
        log.info("stage %s: done in %.1fs", name, self.timings[name])

    def write_log(self, name, rows):
        with open(self.path(f"logs/train_{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LogRow.HEADER)
            w.writerows(r.as_tuple() for r in rows)

    def write_manifest(self):
        entries = []
        for rel in sorted(set(self.files)):
            p = self.out / rel
            if p.exists():
                entries.append({"path": rel, "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                                "bytes": p.stat().st_size})
        (self.out / "manifest.json").write_text(json.dumps({"files": entries}, indent=1) + "\n")
        return entries


def target_distribution(cfg):
    return Distribution(cfg.data.target, 2, noise=cfg.data.noise)


def training_data(cfg):
    return sample(target_distribution(cfg), cfg.data.n_train, stage_seed(cfg.seed, "data"))


def new_field(cfg):
    n = cfg.network
    return VelocityField.init(2, n.hidden, n.n_frequencies, n.activation,
                              seed=stage_seed(cfg.seed, "init"))


def _train_cfg(cfg, section):
    return TrainingConfig(learning_rate=section.learning_rate, ema_decay=section.ema_decay,
                          log_every=cfg.log_every)


def train_base(cfg, data):
    """Fit the 1-rectified flow on ``data``; returns ``(field, log_rows)``."""
    b = cfg.base
    return train_base_flow(new_field(cfg), data, b.steps, b.batch_size, _train_cfg(cfg, b),
                           seed=stage_seed(cfg.seed, "base"))


def fake_pairs_for(cfg, teacher, order_k):
    """Fake pairs for training order ``order_k`` from its teacher (order ``k-1``)."""
    return make_fake_pairs(teacher, standard_gaussian(2), cfg.reflow.n_fake,
                           cfg.solver.pair_solver, seed=stage_seed(cfg.seed, "fake", order_k),
                           order_k=order_k)


def reflow_round(cfg, teacher, fake, real_x1, procedure, order_k):
    """Train order ``order_k`` from ``teacher``; returns ``(field, trainer)``.

    Both procedures share the training seed for a given order, so their
    minibatch streams start identically.
    """
    r = cfg.reflow
    plan = ReflowPlan(r.steps, r.repair_interval,
                      None if r.warmup_steps < 0 else r.warmup_steps,
                      r.batch_size, order_k, procedure)
    buffers = ReflowBuffers(fake, x1=real_x1 if procedure == "balanced_conic" else None)
    trainer = ReflowTrainer(
        teacher, plan, buffers, _train_cfg(cfg, r), seed=stage_seed(cfg.seed, "reflow", order_k),
        zeta_max=r.fixed_zeta, zeta_grid=default_zeta_grid(r.zeta_grid_size),
        n_phases=r.n_phases, schedule_scaling=r.schedule_scaling,
        time_dist=TimeDistribution("u_shaped_exponential", r.time_a),
        inverse_solver=cfg.solver.pair_solver, zeta_search_samples=r.zeta_search_samples)
    return trainer.run(), trainer


def evaluate_order(cfg, fld, data, order_k, procedure, recon_fake=None):
    """Metrics for one checkpoint.

    Real samples are the first ``eval.n_samples`` training points. The fake
    set for the reconstruction gap is the supervision the model was fitted to
    (the teacher's fake-pair endpoints) when given, else the model's outputs.
    """
    e = cfg.eval
    real = data[:e.n_samples]
    if recon_fake is not None:
        recon_fake = recon_fake[:e.n_samples]
    report, fake, _, deltas = evaluate(
        fld, target_distribution(cfg), e.n_samples, seed=stage_seed(cfg.seed, "eval"),
        eps=e.eps, gen_solver=cfg.solver.sample_solver, real_samples=real,
        fake_samples=recon_fake, order_k=order_k, procedure=procedure,
        gmm_components=e.gmm_components, gmm_iter=e.gmm_iter, gmm_restarts=e.gmm_restarts,
        n_mc=e.n_mc)
    return report, fake, deltas


def write_metrics(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsReport.FIELDS)
        w.writerows(r.csv_row() for r in reports)
    return path


def run_pipeline(cfg: ExperimentConfig, out=None, base_checkpoint=None) -> PipelineResult:
    """Run every stage the config declares and write the artifacts.

    ``base_checkpoint`` skips base training by loading an existing
    1-rectified flow (its metrics are still recomputed).
    """
    ctx = RunContext(cfg, out)
    ctx.path("config.ini").write_text(cfg.to_ini())
    result = PipelineResult(ctx.out)
    data = training_data(cfg)
    real_x1 = data[:cfg.reflow.n_real]

    with ctx.stage("train-base"):
        if base_checkpoint is not None:
            base, _ = load_checkpoint(base_checkpoint)
        else:
            base, rows = train_base(cfg, data)
            ctx.write_log("base", rows)
        save_checkpoint(base, ctx.path("checkpoints/k1_base.cflow"), order_k=1, procedure="base")
    result.fields[(1, "base")] = base

    teachers = {p: base for p in cfg.reflow.procedures}
    supervision = {}
    run_reflow = cfg.reflow.steps > 0 and cfg.reflow.max_order >= 2
    for k in range(2, cfg.reflow.max_order + 1) if run_reflow else ():
        fake_cache = {}
        for proc in cfg.reflow.procedures:
            teacher = teachers[proc]
            with ctx.stage(f"fake-pairs k={k} {proc}"):
                fake = fake_cache.get(id(teacher))
                if fake is None:
                    fake = fake_cache[id(teacher)] = fake_pairs_for(cfg, teacher, k)
            with ctx.stage(f"reflow k={k} {proc}"):
                student, trainer = reflow_round(cfg, teacher, fake, real_x1, proc, k)
                ctx.write_log(f"k{k}_{proc}", trainer.rows)
                save_checkpoint(student, ctx.path(f"checkpoints/k{k}_{proc}.cflow"), order_k=k,
                                procedure=proc, zeta_max=trainer.zeta_max,
                                repairs=trainer.repairs_done)
            teachers[proc] = student
            supervision[(k, proc)] = fake.z1
            result.fields[(k, proc)] = student

    with ctx.stage("evaluate"):
        samples = {}
        for key, fld in result.fields.items():
            k, proc = key
            report, fake, deltas = evaluate_order(cfg, fld, data, k, proc, supervision.get(key))
            result.reports.append(report)
            samples[key] = fake
            if key == (1, "base"):
                svg.bar_chart(ctx.path("plots/curvature_per_step_k1.svg"), deltas,
                              "per-step velocity deviation, k=1", "step", "mean squared deviation")
        write_metrics(ctx.path("metrics.csv"), result.reports)
        for key, pts in samples.items():
            svg.scatter(ctx.path(f"plots/samples_k{key[0]}_{key[1]}.svg"),
                        {"target": data[:2000], "generated": pts}, f"k={key[0]} {key[1]}")
        _plot_metric_lines(ctx, result.reports)

    if "original" in cfg.reflow.procedures:
        with ctx.stage("drift"):
            result.drift = drift_table(cfg, result, data)
            _write_drift(ctx, result.drift)

    if cfg.distill.enabled:
        with ctx.stage("distill"):
            order = min(cfg.distill.teacher_order, max(k for k, _ in result.fields))
            key = max((kp for kp in result.fields if kp[0] == order),
                      key=lambda kp: kp[1] == "balanced_conic")
            result.distill = run_distill(cfg, ctx, result.fields[key], data, key)

    result.files = ctx.write_manifest()
    result.timings = dict(ctx.timings)
    return result


def _plot_metric_lines(ctx, reports):
    for metric in ("curvature", "ivd", "kl_to_target", "recon_gap"):
        series = {}
        for proc in sorted({r.procedure for r in reports if r.procedure != "base"}):
            rows = sorted((r for r in reports if r.procedure in (proc, "base")),
                          key=lambda r: r.order_k)
            series[proc] = [getattr(r, metric) for r in rows]
            ks = [r.order_k for r in rows]
        if series:
            svg.line_chart(ctx.path(f"plots/{metric}_vs_k.svg"), ks, series,
                           f"{metric} vs reflow order", "k", metric)


def drift_table(cfg, result, data):
    """``[(k, kl)]`` for an untrained field (k=0) and the original-reflow chain."""
    rows = []
    e = cfg.eval
    z0 = sample(standard_gaussian(2), e.n_samples, stage_seed(cfg.seed, "eval-drift0"))
    untrained = transport(new_field(cfg), z0, cfg.solver.sample_solver)
    kl0 = kl_between_samples(untrained, data[:e.n_samples], e.gmm_components, e.gmm_iter,
                             e.n_mc, seed=stage_seed(cfg.seed, "kl-drift0") % 2 ** 31,
                             n_init=e.gmm_restarts)
    rows.append((0, kl0))
    for r in sorted(result.reports, key=lambda r: r.order_k):
        if r.procedure in ("base", "original"):
            rows.append((r.order_k, r.kl_to_target))
    return rows


def _write_drift(ctx, rows):
    with open(ctx.path("drift.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("k", "kl_fake_to_real"))
        w.writerows((k, repr(float(v))) for k, v in rows)
    svg.line_chart(ctx.path("plots/drift_kl.svg"), [k for k, _ in rows],
                   {"original reflow": [v for _, v in rows]},
                   "KL(fake_k || real)", "k", "KL")


def run_distill(cfg, ctx, teacher, data, key):
    """Distil ``teacher`` into a one-step map and compare KLs against the data."""
    d, e = cfg.distill, cfg.eval
    pairs = make_fake_pairs(teacher, standard_gaussian(2), d.n_pairs, cfg.solver.sample_solver,
                            seed=stage_seed(cfg.seed, "distill-pairs"), order_k=key[0])
    tcfg = TrainingConfig(learning_rate=d.learning_rate, log_every=cfg.log_every)
    student, rows = distill(teacher, pairs, d.steps, d.batch_size, tcfg,
                            seed=stage_seed(cfg.seed, "distill"))
    ctx.write_log("distill", rows)
    save_checkpoint(student, ctx.path("checkpoints/distilled.cflow"), order_k=key[0],
                    procedure=f"{key[1]}+distill")
    z0 = sample(standard_gaussian(2), e.n_samples, stage_seed(cfg.seed, "eval-distill"))
    real = data[:e.n_samples]
    kl_seed = stage_seed(cfg.seed, "kl-distill") % 2 ** 31
    out = {}
    for name, fld in (("teacher_1step", teacher), ("distilled", student)):
        out[name] = kl_between_samples(one_step_generate(fld, z0), real, e.gmm_components,
                                       e.gmm_iter, e.n_mc, seed=kl_seed, n_init=e.gmm_restarts)
    with open(ctx.path("distill.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("teacher", "model", "kl_to_target"))
        for name, v in out.items():
            w.writerow((f"k{key[0]}_{key[1]}", name, repr(float(v))))
    return out


def drift_demo(cfg: ExperimentConfig, out=None, base_checkpoint=None) -> PipelineResult:
    """Original reflow for k = 1..max(3, max_order) with the KL-vs-k table."""
    reflow = replace(cfg.reflow, procedures=("original",),
                     max_order=max(3, cfg.reflow.max_order))
    cfg = replace(cfg, reflow=reflow, distill=replace(cfg.distill, enabled=False))
    return run_pipeline(cfg, out, base_checkpoint)


def curvature_profile(fld, n_samples=2000, n_steps=100, k=10, seed=0):
    """Top-``k`` step indices of the per-step velocity deviation."""
    z0 = sample(standard_gaussian(fld.input_dim), n_samples, seed)
    return topk_curvature_indices(fld, z0, n_steps, k)


def generate(fld, n, solver, seed=0):
    """``n`` samples from ``fld`` plus the trajectory's NFE."""
    z0 = sample(standard_gaussian(fld.input_dim), n, seed)
    if solver == ONE_STEP:
        return one_step_generate(fld, z0), 1
    traj = integrate(fld, z0, solver, record=False)
    return traj.end, traj.nfe


__all__ = ["run_pipeline", "drift_demo", "PipelineResult", "StageError", "RunContext",
           "stage_seed", "train_base", "reflow_round", "fake_pairs_for", "evaluate_order",
           "run_distill", "training_data", "target_distribution", "generate",
           "curvature_profile", "write_metrics"]
