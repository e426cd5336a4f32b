"""Command-line entry point ``cflow``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
``CFLOW_THREADS`` caps the BLAS/OpenMP thread pools.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline, svg
from .config import load_config
from .exceptions import ConfigError, NumericalError
from .metrics import ONE_STEP
from .nn import load_checkpoint, save_checkpoint
from .ode import SolverConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("conicflow")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="experiment config file (INI)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", metavar="DIR", help="override the output directory")
    p.add_argument("--quiet", action="store_true", help="only print errors")


def build_parser():
    parser = argparse.ArgumentParser(prog="cflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="fit the 1-rectified flow")
    _common(p)

    for name, help_ in (("reflow", "original reflow on fake pairs"),
                        ("conic-reflow", "balanced conic reflow on fake and real pairs")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--teacher", metavar="CKPT",
                       help="teacher checkpoint (default: OUT/checkpoints/k1_base.cflow)")

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("-n", "--n-samples", type=int, default=1000)
    p.add_argument("--method", choices=("euler", "heun", "rk45"), default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")

    p = sub.add_parser("distill", help="distil a checkpoint into a one-step map")
    _common(p)
    p.add_argument("--teacher", required=True, metavar="CKPT")

    for name, help_ in (("drift-demo", "KL drift of original reflow over k"),
                        ("run", "full pipeline as declared in the config")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--base-checkpoint", metavar="CKPT",
                       help="reuse a trained 1-rectified flow instead of training one")
    return parser


def _thread_limit():
    raw = os.environ.get("CFLOW_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CFLOW_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None


def _cmd_train_base(cfg, args):
    ctx = pipeline.RunContext(cfg)
    data = pipeline.training_data(cfg)
    with ctx.stage("train-base"):
        field, rows = pipeline.train_base(cfg, data)
        ctx.write_log("base", rows)
        path = save_checkpoint(field, ctx.path("checkpoints/k1_base.cflow"), order_k=1,
                               procedure="base")
    ctx.write_manifest()
    return f"wrote {path}"


def _cmd_reflow(cfg, args, procedure):
    ctx = pipeline.RunContext(cfg)
    teacher_path = args.teacher or ctx.out / "checkpoints" / "k1_base.cflow"
    teacher, header = _load_ckpt(teacher_path)
    order_k = int(header.get("order_k", 1)) + 1
    data = pipeline.training_data(cfg)
    with ctx.stage(f"fake-pairs k={order_k}"):
        fake = pipeline.fake_pairs_for(cfg, teacher, order_k)
    with ctx.stage(f"reflow k={order_k} {procedure}"):
        student, trainer = pipeline.reflow_round(cfg, teacher, fake, data[:cfg.reflow.n_real],
                                                 procedure, order_k)
        ctx.write_log(f"k{order_k}_{procedure}", trainer.rows)
        path = save_checkpoint(student, ctx.path(f"checkpoints/k{order_k}_{procedure}.cflow"),
                               order_k=order_k, procedure=procedure, zeta_max=trainer.zeta_max,
                               repairs=trainer.repairs_done)
    ctx.write_manifest()
    return f"wrote {path}"


def _cmd_sample(cfg, args):
    field, header = _load_ckpt(args.checkpoint)
    if args.n_samples < 1:
        raise ConfigError("--n-samples must be positive")
    base = cfg.solver.sample_solver
    solver = SolverConfig(args.method or base.method, args.steps or base.n_steps,
                          base.rtol, base.atol)
    ctx = pipeline.RunContext(cfg)
    with ctx.stage("sample"):
        if solver.method == "euler" and solver.n_steps == 1:
            solver = ONE_STEP
        x, nfe = pipeline.generate(field, args.n_samples, solver, seed=cfg.seed)
        name = Path(args.checkpoint).stem
        with open(ctx.path(f"samples_{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{i + 1}" for i in range(x.shape[1])])
            w.writerows([repr(float(v)) for v in row] for row in x)
        svg.scatter(ctx.path(f"plots/samples_{name}.svg"), {"generated": x}, name)
    ctx.write_manifest()
    return f"{args.n_samples} samples with {solver.describe()}, nfe={nfe}"


def _cmd_eval(cfg, args):
    field, header = _load_ckpt(args.checkpoint)
    ctx = pipeline.RunContext(cfg)
    data = pipeline.training_data(cfg)
    with ctx.stage("evaluate"):
        report, _, _ = pipeline.evaluate_order(cfg, field, data, int(header.get("order_k", 1)),
                                               header.get("procedure", "base"))
        name = Path(args.checkpoint).stem
        pipeline.write_metrics(ctx.path(f"metrics_{name}.csv"), [report])
    ctx.write_manifest()
    return report.to_text()


def _cmd_distill(cfg, args):
    teacher, header = _load_ckpt(args.teacher)
    ctx = pipeline.RunContext(cfg)
    data = pipeline.training_data(cfg)
    key = (int(header.get("order_k", 1)), header.get("procedure", "base"))
    with ctx.stage("distill"):
        kls = pipeline.run_distill(cfg, ctx, teacher, data, key)
    ctx.write_manifest()
    return "  ".join(f"{k}: KL={v:.4f}" for k, v in kls.items())


def _cmd_pipeline(cfg, args, drift_only):
    runner = pipeline.drift_demo if drift_only else pipeline.run_pipeline
    result = runner(cfg, base_checkpoint=args.base_checkpoint)
    lines = [",".join(("k", "procedure", "curvature", "ivd", "recon_gap", "kl"))]
    for r in result.reports:
        lines.append(f"{r.order_k},{r.procedure},{r.curvature:.5g},{r.ivd:.5g},"
                     f"{r.recon_gap:.5g},{r.kl_to_target:.5g}")
    if drift_only:
        lines.append("drift: " + " ".join(f"k={k}:{v:.4f}" for k, v in result.drift))
    return "\n".join(lines)


COMMANDS = {
    "train-base": _cmd_train_base,
    "reflow": lambda cfg, a: _cmd_reflow(cfg, a, "original"),
    "conic-reflow": lambda cfg, a: _cmd_reflow(cfg, a, "balanced_conic"),
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "distill": _cmd_distill,
    "drift-demo": lambda cfg, a: _cmd_pipeline(cfg, a, True),
    "run": lambda cfg, a: _cmd_pipeline(cfg, a, False),
}


def _exit_code(exc):
    cause = getattr(exc, "cause", exc)
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, (NumericalError, FloatingPointError)):
        return EXIT_NUMERIC
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out)
        limit = _thread_limit()
        guard = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
        with guard:
            message = COMMANDS[args.command](cfg, args)
    except (ConfigError, NumericalError, pipeline.StageError) as exc:
        print(f"cflow {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    if not args.quiet and message:
        print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
