"""Command line entry point: ``sense run --config spec.json --out results/``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .harness import ExperimentAborted, ExperimentSpec, write_outputs


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sense", description="Adaptive MIMO radar sensing experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a Monte Carlo experiment from a JSON spec")
    run.add_argument("--config", required=True, help="JSON file with ExperimentSpec fields")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--snr", type=_floats, help="comma-separated SNR points in dB")
    run.add_argument("--strategies", type=_names, help="subset of proposed,random,steering")
    run.add_argument("--t-explore", dest="t_explore", type=_ints, help="comma-separated exploration lengths")
    run.add_argument("--alpha-random", action="store_true", help="draw alpha ~ CN(0,1) instead of |alpha| = 1")
    run.add_argument("--trace", action="store_true", help="also write posterior and beampattern traces")
    run.add_argument("--workers", type=int, default=1, help="worker processes for trials")
    run.add_argument("--grid-k", dest="grid_k", type=int, help="override grid points per angle")
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_spec(args: argparse.Namespace) -> ExperimentSpec:
    with open(args.config) as fh:
        raw = json.load(fh)
    spec = ExperimentSpec.from_dict(raw)
    overrides = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.snr is not None:
        overrides["snr_grid"] = args.snr
    if args.strategies is not None:
        overrides["strategies"] = args.strategies
    if args.t_explore is not None:
        overrides["t_explore_values"] = args.t_explore
    if args.alpha_random:
        overrides["alpha_random"] = True
    if args.grid_k is not None:
        overrides["base"] = replace(spec.base, grid_k=args.grid_k)
    overrides["output"] = args.out
    return replace(spec, **overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    spec = load_spec(args)
    try:
        report = write_outputs(spec, args.out, workers=args.workers, trace=args.trace)
    except ExperimentAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    for key in report.sorted_keys():
        c = report.cells[key]
        print(f"{key[0]:>9} snr={key[1]:g} t_explore={key[2]} wmse={c.wmse_mean:.4g} +/- {c.wmse_stderr:.2g} "
              f"bcrb={c.bcrb_mean:.4g} n={c.trials} fail={c.failures}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
