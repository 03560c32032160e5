#!/usr/bin/env python3
"""
BDATP lab CLI
- train / eval one configuration
- ablate / sweep-lambda for the experiment tables
- gradcheck the whole differentiable stack at 64-bit
- export plot-ready data (trajectories, transition matrices, BDA scatter)

Every command prints [info]/[ok] lines; a failure prints exactly one
`[error] {"code": ..., "message": ...}` line on stderr and exits nonzero.
"""

import os

# One BLAS thread per process keeps serial runs reproducible and parallel runs sane.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

load_dotenv()

import bench
from config import RunConfig, load_config, write_resolved
from errors import ConfigError, LabError
from services import (EvaluationService, ExportService, GradcheckService, TrainingService, format_eval_report,
                      load_model)

EXPORT_KINDS = ("trajectories", "transition-matrix", "bda-scatter")


# Helpers
def info(message: str) -> None:
    print(f"[info] {message}")


def ok(message: str) -> None:
    print(f"[ok] {message}")


def error_line(code: str, message: str) -> None:
    print("[error] " + json.dumps({"code": code, "message": message}), file=sys.stderr)


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of integers, got '{text}'") from e


def parse_float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of numbers, got '{text}'") from e


def resolve_config(args) -> RunConfig:
    """Defaults, then --config, then --set, then --seed/--out, then --serial/--parallel."""
    cfg = load_config(args.config, args.set or (), args.seed, args.out)
    if getattr(args, "arm", None):
        cfg = bench.apply_arm(cfg, args.arm)
    if args.parallel is not None:
        cfg = replace(cfg, train=replace(cfg.train, parallel=args.parallel))
    return cfg.validate()


def prepare_out(cfg: RunConfig) -> Path:
    """Create the output directory and echo the resolved config before any work starts."""
    out = Path(cfg.out_dir)
    path = write_resolved(cfg, out)
    info(f"resolved config written to {path}")
    return out


# Commands
def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(cfg)
    service = TrainingService(cfg, out)
    if args.checkpoint:
        service.resume(args.checkpoint)
        info(f"resumed from {args.checkpoint} at update {service.update}")
    info(f"training {service.total_updates} updates of {cfg.ppo.rollout_length}x{cfg.ppo.num_envs} steps")
    summary = service.run(args.updates)
    ok(f"trained {summary.updates} updates ({summary.env_steps} env steps)")
    print(f"metrics: {summary.metrics_log}")
    if summary.checkpoint:
        print(f"checkpoint: {summary.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint and not args.random:
        raise ConfigError("eval needs --checkpoint (or --random for the random agent)")
    out = prepare_out(cfg) / "eval"
    results = []
    if args.checkpoint:
        model = load_model(cfg, args.checkpoint)
        evaluator = EvaluationService(cfg, model, out)
        results += [evaluator.evaluate(setting) for setting in args.settings]
    if args.random:
        evaluator = EvaluationService(cfg, None, out)
        results += [evaluator.evaluate(setting, policy="random") for setting in args.settings]
    report = format_eval_report(results)
    (out / "report.txt").write_text(report, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps([r.to_dict() for r in results], indent=2), encoding="utf-8")
    print(report, end="")
    ok(f"evaluation written to {out}")
    return 0


def report_acceptance(report: bench.AcceptanceReport) -> int:
    print(report.to_text(), end="")
    if not report.passed:
        error_line("acceptance", "; ".join(report.violations))
        return 2
    ok("acceptance checks passed")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(cfg)
    arms = [bench.AblationArm(a) for a in args.arms.split(",")] if args.arms else list(bench.ARM_ORDER)
    table = bench.run_ablation(cfg.split, parse_int_list(args.seeds), cfg.train.budget_steps, arms, cfg, out,
                               cfg.train.parallel, include_random=not args.no_random)
    print(table.to_text(), end="")
    ok(f"ablation report written to {out / 'ablation.txt'}")
    if args.check:
        return report_acceptance(bench.check_ablation(table, cfg.ppo.num_actions))
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(cfg)
    table = bench.run_lambda_sweep(cfg.split, parse_float_list(args.lambdas), parse_int_list(args.seeds),
                                   cfg.train.budget_steps, cfg, out, cfg.train.parallel)
    print(table.to_text(), end="")
    ok(f"sweep report written to {out / 'sweep' / 'report.txt'}")
    if args.check:
        return report_acceptance(bench.check_sweep(table))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    service = GradcheckService(instances=args.instances, seed=args.seed or 0, num_actions=cfg.ppo.num_actions)
    report = service.run(args.components.split(",") if args.components else None)
    print(report.to_text(), end="")
    if not report.passed:
        error_line("gradcheck", f"components above tolerance: {','.join(report.failures)}")
        return 2
    ok("all gradient checks passed")
    return 0


def cmd_export(args) -> int:
    out = Path(args.output)
    if args.kind == "trajectories":
        if not args.input:
            raise ConfigError("export trajectories needs --input LOG")
        written = ExportService.trajectories(args.input, out, args.compare)
    elif args.kind == "transition-matrix":
        if not args.input:
            raise ConfigError("export transition-matrix needs --input LOG")
        written = ExportService.transition_matrix(args.input, out)
    else:
        if not args.checkpoint:
            raise ConfigError("export bda-scatter needs --checkpoint")
        cfg = resolve_config(args)
        model = load_model(cfg, args.checkpoint)
        written = [ExportService.bda_scatter(cfg, model, out, args.setting, args.episodes)]
    for path in written:
        ok(f"wrote {path}")
    return 0


# Parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default $BDATP_OUT or runs)")
    common.add_argument("--checkpoint", help="checkpoint manifest path")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--serial", dest="parallel", action="store_false", default=None)
    mode.add_argument("--parallel", dest="parallel", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="cli.py", description="BDATP audio-visual navigation lab")
    sub = p.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common])
    train.add_argument("--arm", choices=[a.value for a in bench.AblationArm])
    train.add_argument("--updates", type=int, help="stop after this many updates (budget still bounds the run)")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--arm", choices=[a.value for a in bench.AblationArm])
    ev.add_argument("--settings", nargs="+", default=["heard", "unheard"], choices=["heard", "unheard"])
    ev.add_argument("--random", action="store_true", help="also evaluate the random agent")
    ev.set_defaults(func=cmd_eval)

    ablate = sub.add_parser("ablate", parents=[common])
    ablate.add_argument("--arms", help="comma-separated subset of none,no_atp,no_bda,full")
    ablate.add_argument("--seeds", default="1,2,3,4,5")
    ablate.add_argument("--no-random", action="store_true", help="skip the random agent row")
    ablate.add_argument("--check", action="store_true", help="exit 2 unless the arms order as expected")
    ablate.set_defaults(func=cmd_ablate)

    sweep = sub.add_parser("sweep-lambda", parents=[common])
    sweep.add_argument("--lambdas", default=",".join(str(v) for v in bench.LAMBDA_SWEEP))
    sweep.add_argument("--seeds", default="1,2,3,4,5")
    sweep.add_argument("--check", action="store_true", help="exit 2 unless the default aux weight beats 0")
    sweep.set_defaults(func=cmd_sweep_lambda)

    grad = sub.add_parser("gradcheck", parents=[common])
    grad.add_argument("--instances", type=int, default=5)
    grad.add_argument("--components", help="comma-separated subset of components")
    grad.set_defaults(func=cmd_gradcheck)

    export = sub.add_parser("export", parents=[common])
    export.add_argument("--kind", required=True, choices=EXPORT_KINDS)
    export.add_argument("--input", help="trajectory log (trajectories_*.jsonl)")
    export.add_argument("--compare", help="second trajectory log for a side-by-side comparison")
    export.add_argument("--output", required=True, help="CSV file to write")
    export.add_argument("--setting", default="unheard", choices=["heard", "unheard"])
    export.add_argument("--episodes", type=int, help="episodes for bda-scatter (default split.episodes_per_eval)")
    export.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.getenv("BDATP_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LabError as e:
        error_line(e.code, str(e))
        return 2
    except Exception as e:  # anything unexpected still gets one machine-parsable line
        logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        error_line("internal", f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
