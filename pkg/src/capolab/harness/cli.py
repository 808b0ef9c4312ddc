"""Command-line entry point: ``capolab <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from capolab import theory
from capolab.harness import sweeps
from capolab.harness.config import ConfigError, load_config
from capolab.harness.runner import run_experiment
from capolab.harness.summary import (
    SUMMARY_COLUMNS,
    format_table,
    load_seed_summaries,
    summarize,
    write_csv,
)

SWEEPS = {
    "sweep-epochs": (sweeps.epoch_sweep, sweeps.EPOCH_GRID, None, sweeps.EPOCH_COLUMNS),
    "sweep-k": (sweeps.k_sweep, sweeps.K_GRID, ("capo_avg", "capo_logop"), sweeps.K_COLUMNS),
    "sweep-clip": (sweeps.clip_sweep, sweeps.CLIP_GRID, ("ppo", "capo_avg", "capo_logop"),
                   sweeps.K_COLUMNS),
    "sweep-target-kl": (sweeps.target_kl_sweep, sweeps.TARGET_KL_GRID, ("ppo", "capo_avg", "capo_logop"),
                        sweeps.K_COLUMNS),
    "sweep-warmup": (sweeps.warmup_sweep, sweeps.WARMUP_GRID, ("capo_avg", "capo_logop"), sweeps.K_COLUMNS),
    "sweep-carry": (sweeps.carry_sweep, sweeps.CARRY_GRID, ("capo_avg", "capo_logop"), sweeps.K_COLUMNS),
}


def _int_list(text):
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _value_list(text):
    out = []
    for item in text.replace(" ", "").split(","):
        if not item:
            continue
        try:
            out.append(int(item))
        except ValueError:
            try:
                out.append(float(item))
            except ValueError:
                out.append(item)
    return out


def _add_common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="single run seed")
    p.add_argument("--seeds", type=_int_list, help="comma-separated run seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="capolab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("run", help="train one method over the configured seeds"))
    for name, (_, grid, methods, _) in SWEEPS.items():
        p = sub.add_parser(name, help=f"sweep over {grid}")
        _add_common(p)
        p.add_argument("--values", type=_value_list, help=f"grid values (default {','.join(map(str, grid))})")
        if methods is not None:
            p.add_argument("--methods", type=lambda t: [m for m in t.split(",") if m],
                           help=f"methods (default {','.join(methods)})")

    p = sub.add_parser("check-theory", help="randomized certification of the consensus inequalities")
    p.add_argument("--instances", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--g-mode", choices=("free", "quadratic"), default="free")

    p = sub.add_parser("summarize", help="mean and SE of final returns from run directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", help="write the table as CSV here")
    return parser


def _config(args):
    cfg = load_config(args.config, args.overrides)
    seeds = args.seeds if args.seeds else ([args.seed] if args.seed is not None else None)
    if seeds:
        cfg.seeds = tuple(seeds)
    return cfg.validate()


def cmd_run(args):
    cfg = _config(args)
    rec = run_experiment(cfg, args.out)
    rows = summarize([s.summary() for s in rec.seeds])
    print(format_table(rows, SUMMARY_COLUMNS))
    return 0


def cmd_sweep(args):
    fn, grid, methods, columns = SWEEPS[args.command]
    cfg = _config(args)
    kwargs = {"seeds": list(cfg.seeds), "out_dir": args.out}
    values = args.values or grid
    if methods is not None:
        kwargs["methods"] = tuple(args.methods or methods)
    rows = fn(cfg, values, **kwargs)
    print(format_table(rows, columns))
    return 0


def cmd_check_theory(args):
    start = time.perf_counter()
    res = theory.certify(args.instances, args.seed, args.tol, args.g_mode)
    elapsed = time.perf_counter() - start
    print(f"{res.instances} instances, tol {args.tol:g}, {elapsed:.2f} s")
    print(f"{'clause':<8}{'violations':>12}{'worst margin':>16}  status")
    for c in theory.CLAUSES:
        status = "pass" if res.violations[c] == 0 else "FAIL"
        print(f"{c:<8}{res.violations[c]:>12d}{res.worst_margin[c]:>16.3e}  {status}")
    return 0 if res.ok else 1


def cmd_summarize(args):
    rows = summarize(load_seed_summaries(args.paths))
    if not rows:
        print("no per-seed summary.json files found", file=sys.stderr)
        return 1
    print(format_table(rows, SUMMARY_COLUMNS))
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        write_csv(args.out, rows, SUMMARY_COLUMNS)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "check-theory": cmd_check_theory, "summarize": cmd_summarize}
    handler = handlers.get(args.command, cmd_sweep)
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
