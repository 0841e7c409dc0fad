"""Command line entry points: run, sweep-k, oracle, verify."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import harness, tandem, verify


def _parse_grid(spec: str):
    """'0.05:0.95:19' -> linspace; '0.3,0.6,0.9' -> explicit values."""
    if ":" in spec:
        lo, hi, count = spec.split(":")
        return list(np.linspace(float(lo), float(hi), int(count)))
    return [float(v) for v in spec.split(",")]


def cmd_run(args) -> int:
    cfg = harness.load_scenario(args.scenario)
    if args.policy:
        cfg.policy = dict(cfg.policy, kind=args.policy)
    if args.slots:
        cfg.slots = args.slots
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    record = harness.run_scenario(cfg)
    print(
        f"policy={record.policy} slots={record.slots} delivered={record.delivered_total()} "
        f"mean_delay={record.mean_delay():.2f} stable={record.stability.stable}"
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        if args.format == "json":
            path = os.path.join(args.out, "record.json")
            harness.export(record, path, "json")
        else:
            path = args.out
            harness.export(record, path, "csv")
        print(f"wrote {path}")
    return 0


def cmd_sweep_k(args) -> int:
    cfg = harness.load_scenario(args.scenario)
    if args.seed is not None:
        cfg.seed = args.seed
    ks = [float(v) for v in args.k.split(",")]
    rows = harness.sweep_k(cfg, ks)
    for policy, k, delay in rows:
        print(f"{policy:>12} K={k:<8g} mean_delay={delay:.2f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "ksweep.csv")
        harness.export_ksweep(rows, path)
        print(f"wrote {path}")
    return 0


def cmd_oracle(args) -> int:
    grid = _parse_grid(args.a_grid)
    rows = tandem.oracle_table(args.hops, grid)
    header = ["a"] + [f"pbar_{i}" for i in range(1, args.hops + 1)]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "tandem.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows([[f"{v:.12g}" for v in row] for row in rows])
        print(f"wrote {path}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(f"{v:.12g}" for v in row))
    return 0


def cmd_verify(args) -> int:
    checks = verify.run_all(fast=args.fast)
    failed = 0
    for name, ok, detail in checks:
        if ok:
            print(f"PASS {name}")
        else:
            failed += 1
            print(f"FAIL {name}: {detail}")
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="danet",
        description="Delay-aware cross-layer network control: simulate, sweep, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policy", choices=["dtbp", "min_resource", "crosslayer"])
    p.add_argument("--slots", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-k", help="mean delay vs K for DTBP and cross-layer")
    p.add_argument("--scenario", required=True)
    p.add_argument("--k", required=True, help="comma-separated K values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("oracle", help="exact tandem mean queue lengths")
    p.add_argument("--hops", type=int, required=True)
    p.add_argument("--a-grid", default="0.05:0.95:19")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--fast", action="store_true")
    p.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
