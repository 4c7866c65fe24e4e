"""Command-line interface: one subcommand per experiment."""

from __future__ import annotations

import argparse
import sys

from .harness import EXPERIMENTS, parse_config, run_experiment


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="KEY=VALUE config file", default=None)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dx", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--mode", choices=["hard", "soft"])
    p.add_argument("--soft-rate", dest="soft_rate", type=float)
    p.add_argument("--n-replicates", dest="n_replicates", type=int)
    p.add_argument("--root-seed", dest="root_seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--t-eval", dest="t_eval", type=float)
    p.add_argument("--survival-delta", dest="survival_delta", type=float)
    p.add_argument("--n-accepted", dest="n_accepted", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--n-paths", dest="n_paths", type=int)
    p.add_argument("--delta0", type=float)
    p.add_argument("--delta1", type=float)
    p.add_argument("--R", dest="R", type=float)
    p.add_argument("--record-times", dest="record_times")
    p.add_argument("--support-tol", dest="support_tol", type=float)
    p.add_argument("--output", dest="output_path")
    p.add_argument("--format", dest="output_format", choices=["csv", "jsonl"])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="annspde",
        description="Monte Carlo experiments for the annihilating-pair SPDE system",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        _add_common(sub.add_parser(name))
    args = parser.parse_args(argv)

    overrides = {
        k: v
        for k, v in vars(args).items()
        if v is not None and k not in ("config",)
    }
    cfg = parse_config(args.config, overrides)
    code, result = run_experiment(cfg)
    for rep in result.reports:
        print(
            f"{rep.name}: {rep.estimate:.6g} +- {rep.stderr:.3g} "
            f"[{rep.ci_low:.6g}, {rep.ci_high:.6g}] (n={rep.n})"
        )
    for key, val in result.details.items():
        if key in ("snapshots", "grid_centers"):
            continue
        print(f"{key}: {val}")
    print("PASS" if code == 0 else "FAIL")
    return code


if __name__ == "__main__":
    sys.exit(main())
