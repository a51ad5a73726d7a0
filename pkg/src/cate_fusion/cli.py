"""Command-line entry point: ``cate-fusion run|summarize|heatmap``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bench import ExperimentResult, emit_heatmap_table, load_spec, run_experiment, summarize
from .exceptions import ConfigParse

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _parser():
    p = argparse.ArgumentParser(prog="cate-fusion", description="Two-source CATE simulation runner")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment spec")
    run.add_argument("--spec", required=True, help="config file (key = value lines)")
    run.add_argument("--out", help="output directory (overrides the spec)")
    run.add_argument("--workers", type=int, help="worker processes (default: spec, then $CATE_FUSION_WORKERS)")
    run.add_argument("--seed", type=int, help="master seed (overrides the spec)")
    run.add_argument("-q", "--quiet", action="store_true")
    s = sub.add_parser("summarize", help="print mean +- SD RMSE per grid point")
    s.add_argument("--in", dest="indir", required=True)
    h = sub.add_parser("heatmap", help="write MR-RACER and MR-SR gap matrices")
    h.add_argument("--in", dest="indir", required=True)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        try:
            spec = load_spec(args.spec)
        except (ConfigParse, OSError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        out = args.out or spec.out
        total = sum(1 for pt in spec.points if not isinstance(pt, tuple) or sum(pt) <= 0.8 + 1e-12)
        total *= spec.n_replicates
        done = [0]

        def progress(gi, rep):
            done[0] += 1
            if not args.quiet and (done[0] % 10 == 0 or done[0] == total):
                print(f"\r{done[0]}/{total} tasks", end="", file=sys.stderr, flush=True)

        result = run_experiment(spec, out=out, workers=args.workers, progress=progress)
        if not args.quiet:
            print(file=sys.stderr)
        print(summarize(result))
        return EXIT_PARTIAL if result.n_failed else EXIT_OK

    result = ExperimentResult.load(args.indir)
    if args.command == "summarize":
        print(summarize(result))
        return EXIT_PARTIAL if result.n_failed else EXIT_OK

    _, matrices = emit_heatmap_table(result)
    for name, text in matrices.items():
        Path(args.indir, f"heatmap_{name}.csv").write_text(text)
        print(f"# {name}")
        print(text, end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
