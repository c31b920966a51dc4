"""Command-line front end.

Exit codes: 0 success, 2 bad config, 3 divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys

from . import accounting, runner
from .config import load_config
from .protocol import ConfigError, DivergedAtRound


def _build_parser():
    parser = argparse.ArgumentParser(prog="vflsim",
                                     description="Simulator for compressed vertical "
                                                 "federated learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single seed of a config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config's first seed")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--parallel", action="store_true",
                       help="evaluate client blocks on a thread pool")
    p_run.add_argument("--dry-run", action="store_true",
                       help="validate and print the resolved plan, then stop")
    p_run.set_defaults(func=_cmd_run)

    p_verify = sub.add_parser("verify", help="run the numerical verification oracles")
    p_verify.add_argument("config")
    p_verify.add_argument("--out", default=None,
                          help="also write the JSON report to OUT/verify.json")
    p_verify.set_defaults(func=_cmd_verify)

    p_sweep = sub.add_parser("sweep", help="run a seed matrix and aggregate")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--seeds", type=int, default=None,
                         help="run seeds 0..N-1 instead of the config's list")
    p_sweep.add_argument("--out", default=None, help="output directory")
    p_sweep.add_argument("--parallel", action="store_true")
    p_sweep.add_argument("--dry-run", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def _plan(cfg, seeds):
    problem = runner.build_problem(cfg)
    algo = cfg.build_algorithm(problem.model.n_samples)
    lines = [
        f"algorithm      {algo.kind}",
        f"compressor     {cfg.compressor}",
        f"dataset        {cfg.dataset} (N={problem.model.n_samples}, "
        f"K={problem.model.n_clients}, dims={problem.model.block_dims()})",
        f"rounds         {algo.rounds} (batch {algo.batch_size}, "
        f"local updates {algo.local_updates})",
        f"eta            {algo.eta}" + (f" halved at epochs {list(algo.eta_halve_epochs)}"
                                        if algo.eta_halve_epochs else ""),
        f"downlink       scheme {algo.resolved_downlink_scheme}",
        f"seeds          {list(seeds)}",
        f"output         {cfg.out_dir}",
    ]
    print("\n".join(lines))


def _cmd_run(args):
    cfg = load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out_dir = args.out or cfg.out_dir
    if args.dry_run:
        _plan(cfg, [seed])
        return 0
    _, summary = runner.run_experiment(cfg, seed, out_dir=out_dir, parallel=args.parallel)
    sys.stdout.write(accounting.summary_text(summary))
    return 0


def _cmd_verify(args):
    cfg = load_config(args.config)
    report = runner.verify_experiment(cfg)
    sys.stdout.write(accounting.summary_text(report))
    if args.out:
        import os
        os.makedirs(args.out, exist_ok=True)
        accounting.emit_summary(report, os.path.join(args.out, "verify.json"))
    return 0 if report["passed"] else 4


def _cmd_sweep(args):
    cfg = load_config(args.config)
    seeds = cfg.seeds if args.seeds is None else tuple(range(args.seeds))
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    out_dir = args.out or cfg.out_dir
    if args.dry_run:
        _plan(cfg, seeds)
        return 0
    aggregate = runner.run_matrix(cfg, seeds=seeds, out_dir=out_dir, parallel=args.parallel)
    sys.stdout.write(accounting.summary_text(aggregate))
    return 3 if aggregate["failed"] else 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergedAtRound as exc:
        print(f"diverged at round {exc.round}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
