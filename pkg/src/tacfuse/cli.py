"""Command-line entry points.

Subcommands: gendata, train, eval, gradcheck, sweep. Exit codes:
0 success, 1 check failure, 2 usage/config error, 3 numeric failure.
Every command honors --seed and is reproducible on one machine.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import (ABLATIONS, CLEARANCES, ConfigError, RunConfig,
                     load_run_config, make_model_config, write_resolved)
from .dataset import EpisodeFormatError, gen_dataset, load_manifest
from .evalrun import (eval_base_seed, evaluate_checkpoint, format_metrics_table,
                      run_config_for_checkpoint, sweep, write_sweep_csv)
from .gradcheck import NonDeterministicLossError
from .modelcheck import check_model_grads, module_rollup
from .training import CheckpointMismatch, NumericFailure, train


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed for this command")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tacfuse",
                                     description="vision-tactile chunking policy workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="record scripted-expert demonstrations")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--clearance", choices=sorted(CLEARANCES), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-jitter", default="0.02,0.08",
                   help="per-episode expert noise range LO,HI")
    g.add_argument("--horizon", type=int, default=200)
    _add_seed(g)
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("train", help="train a policy on recorded episodes")
    t.add_argument("--config", help="TOML run config; flags override file values")
    t.add_argument("--data", help="dataset directory with manifest.json")
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", choices=ABLATIONS)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--clearance", choices=sorted(CLEARANCES))
    t.add_argument("--seed", type=int)
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint in the simulator")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--clearance", choices=sorted(CLEARANCES), required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="run config; defaults to resolved.toml beside the checkpoint")
    e.add_argument("--horizon", type=int, default=200)
    e.add_argument("--dump-attn", action="store_true")
    e.add_argument("--dump-gate", action="store_true")
    _add_seed(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    c.add_argument("--config", help="run config selecting the model preset")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--coords", type=int, default=32, help="sampled coordinates per tensor")
    c.add_argument("--workers", type=int, default=min(2, os.cpu_count() or 1))
    _add_seed(c)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="evaluate checkpoints across clearance levels")
    s.add_argument("--clearances", default="loose,medium,tight")
    s.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--horizon", type=int, default=200)
    _add_seed(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def cmd_gendata(args) -> int:
    try:
        lo, hi = (float(x) for x in args.noise_jitter.split(","))
    except ValueError:
        print(f"error: --noise-jitter expects LO,HI, got {args.noise_jitter!r}", file=sys.stderr)
        return 2
    summary = gen_dataset(args.out, args.episodes, args.clearance, args.seed,
                          noise_lo=lo, noise_hi=hi, horizon=args.horizon)
    print(f"retained {summary['retained']}/{summary['attempts']}")
    return 0


def _merged_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig(model=make_model_config("desk"))
    if args.data is not None:
        cfg.data_dir = args.data
    if args.steps is not None:
        cfg.steps = args.steps
    if args.ablate is not None:
        cfg.ablate = args.ablate
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.clearance is not None:
        cfg.clearance = args.clearance
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _merged_run_config(args)
    if not cfg.data_dir:
        print("error: no dataset given (--data or [paths].data)", file=sys.stderr)
        return 2
    load_manifest(cfg.data_dir)  # fail fast with a config error on bad datasets
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir / "resolved.toml")
    result = train(cfg, progress=args.progress)
    print(f"trained {result.steps} steps in {result.seconds:.1f}s, "
          f"final total loss {result.final_total:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    run_cfg = run_config_for_checkpoint(args.checkpoint, args.config)
    result, _ = evaluate_checkpoint(args.checkpoint, run_cfg, args.trials, args.clearance,
                                    horizon=args.horizon, seed=args.seed, out_dir=args.out,
                                    dump_attn=args.dump_attn, dump_gate=args.dump_gate)
    print(format_metrics_table(result))
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        model = load_run_config(args.config).model
    else:
        model = make_model_config("desk")
    model = model.replace(precision="f64")
    report = check_model_grads(model, seed=args.seed, tol=args.tol, eps=args.eps,
                               max_coords=args.coords, workers=args.workers)
    for module, err in sorted(module_rollup(report).items()):
        print(f"{module:8s} max rel err {err:.3e}")
    if report.all_passed:
        print(f"gradcheck PASS at tol {args.tol:g}")
        return 0
    failing = report.failures()
    print(f"gradcheck FAIL at tol {args.tol:g}: {len(failing)} parameter(s)")
    for name in failing:
        print(f"  {name}: rel err {report.max_rel_err[name]:.3e}")
    return 1


def cmd_sweep(args) -> int:
    clearances = [c.strip() for c in args.clearances.split(",") if c.strip()]
    for c in clearances:
        if c not in CLEARANCES:
            print(f"error: unknown clearance {c!r}", file=sys.stderr)
            return 2
    checkpoints = [c.strip() for c in args.checkpoints.split(",") if c.strip()]
    rows = sweep(checkpoints, clearances, args.trials, args.seed, horizon=args.horizon)
    write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NonDeterministicLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, EpisodeFormatError, CheckpointError, CheckpointMismatch,
            FileNotFoundError, NotADirectoryError, PermissionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
