"""Command line entry point: ``esfd run|converge|reference``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .problems import PRESETS
from .solver import SCHEMES, write_snapshot
from .sbp import Grid


def _int_list(text: str) -> list[int]:
    """``2,3,4`` or a doubling range ``16..512``."""
    if ".." in text:
        lo, hi = (int(t) for t in text.split(".."))
        if lo <= 0 or hi < lo:
            raise argparse.ArgumentTypeError(f"bad range {text!r}")
        out = [lo]
        while out[-1] * 2 <= hi:
            out.append(out[-1] * 2)
        return out
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esfd", description="Entropy stable finite difference benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a configured problem")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", type=Path)

    c = sub.add_parser("converge", help="grid convergence study against the exact solution")
    c.add_argument("--problem", default="density_wave", choices=[k for k, s in PRESETS.items() if s.exact])
    c.add_argument("--scheme", default="ecav", choices=SCHEMES)
    c.add_argument("--orders", type=_int_list, default=[2, 3, 4, 5])
    c.add_argument("--grids", type=_int_list, default=[16, 32, 64, 128, 256, 512])
    c.add_argument("--dt", type=float)
    c.add_argument("--out", type=Path, default=Path("convergence"))

    f = sub.add_parser("reference", help="fine-grid low order reference solution")
    f.add_argument("--problem", required=True, choices=[k for k, s in PRESETS.items() if s.dim == 1])
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--out", type=Path)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        try:
            cfg = bench.load_config(args.config)
        except bench.ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return bench.EXIT_CONFIG
        code = bench.run(cfg, args.out or Path("runs") / args.config.stem)
        if code:
            print(f"run failed with exit code {code}", file=sys.stderr)
        return code

    if args.command == "converge":
        report = bench.convergence_study(args.problem, args.scheme, args.orders, args.grids, args.dt)
        path = report.write_csv(args.out / f"{args.problem}_{args.scheme}.csv")
        for row in report.rows:
            rate = "-" if row.rate is None else f"{row.rate:.2f}"
            print(f"N={row.order} n={row.n:5d} error={row.error:.3e} rate={rate}")
        print(f"wrote {path}")
        return 0

    if args.command == "reference":
        x, u = bench.reference_solution(args.problem, args.n)
        out = args.out or Path("references") / f"{args.problem}_{args.n}.csv"
        spec = PRESETS[args.problem]
        write_snapshot(out, Grid.uniform(args.n, spec.domain, periodic=spec.periodic), u)
        print(f"wrote {out} (x in [{np.min(x):g}, {np.max(x):g}])")
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
