"""Command-line entry point: ``pinlf {prepare,train,sweep,report}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .data import DataError, FormatSpec, load_ratings, split_tenfold, write_split_manifest
from .factors import save_factors
from .solvers import DivergenceError, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_data_args(p):
    p.add_argument("--dataset", required=True, help="delimited rating file")
    p.add_argument("--format", default="comma", choices=["tab", "comma", "mldouble-colon"])
    p.add_argument("--header", action="store_true", help="skip the first line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def _add_solver_args(p):
    p.add_argument("--f", type=int, default=20)
    p.add_argument("--lambda", dest="lam", type=float, default=0.08)
    p.add_argument("--kp", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--error-threshold", type=float, default=1e-5)
    p.add_argument("--schedule", default="gauss-seidel", choices=["gauss-seidel", "jacobi"])
    p.add_argument("--init-range", type=_floats, default=[0.0, 0.5], help="lo,hi of the uniform init")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pinlf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="parse a dataset and write split manifests")
    _add_data_args(p)
    p.add_argument("--rotations", type=_ints, default=[0, 1, 2, 3, 4])

    p = sub.add_parser("train", help="single training run")
    _add_data_args(p)
    _add_solver_args(p)
    p.add_argument("--ki", type=float, default=0.0)
    p.add_argument("--rotation", type=int, default=0)
    p.add_argument("--resume", help="checkpoint (.npz) to continue from")

    p = sub.add_parser("sweep", help="ki grid over rotations")
    _add_data_args(p)
    _add_solver_args(p)
    p.add_argument("--ki-grid", type=_floats, default=list(bench.DEFAULT_KI_GRID))
    p.add_argument("--rotations", type=_ints, default=[0, 1, 2, 3, 4])

    p = sub.add_parser("report", help="re-render a sweep from its sweep.json")
    p.add_argument("--out", required=True, help="sweep output directory")
    return parser


def _solver(args, ki=0.0):
    if len(args.init_range) != 2:
        raise UsageError("--init-range takes exactly two values")
    return bench.default_solver(
        lam=args.lam, kp=args.kp, ki=ki, f=args.f, max_iters=args.max_iters,
        error_threshold=args.error_threshold, schedule=args.schedule, seed=args.seed,
        init_range=tuple(args.init_range),
    )


def cmd_prepare(args) -> int:
    fmt = FormatSpec.named(args.format, header=args.header)
    data, ratings = load_ratings(args.dataset, fmt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rot in args.rotations:
        split = split_tenfold(data, args.seed, rot)
        write_split_manifest(
            split, out / f"split-r{rot}.json",
            dataset=str(args.dataset), n_rows=data.n_rows, n_cols=data.n_cols,
            dataset_digest=data.digest(),
        )
    print(f"{data.n_rows} x {data.n_cols}, {data.nnz} entries; "
          f"wrote {len(args.rotations)} manifest(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    fmt = FormatSpec.named(args.format, header=args.header)
    data, _ = load_ratings(args.dataset, fmt)
    config = _solver(args, args.ki)
    split = split_tenfold(data, args.seed, args.rotation)
    state = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as trace:
        rep = train(data, split, config, state=state, trace=trace)
    save_checkpoint(rep.final_state, out / "checkpoint.npz")
    save_factors(rep.best_factors, out / "best_factors.csv")
    summary = {
        "iterations_run": rep.iterations_run,
        "stop_reason": rep.stop_reason,
        "best_iteration": rep.best_iteration,
        "best_val_rmse": rep.best_val_rmse,
        "test_rmse_at_best": rep.test_rmse_at_best,
        "solver_ms": round(rep.solver_ms, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    fmt = FormatSpec.named(args.format, header=args.header)
    config = bench.ExperimentConfig(
        dataset=str(args.dataset), fmt=fmt, solver=_solver(args),
        rotations=args.rotations, ki_grid=args.ki_grid, out_dir=args.out,
    )
    data, _ = load_ratings(config.dataset, fmt)
    report = bench.run_experiment(config, data)
    bench.emit_report(report, args.out)
    print(bench.render_table(report))
    return EXIT_OK


def cmd_report(args) -> int:
    report = bench.load_report(args.out)
    (Path(args.out) / "sweep.csv").write_text(bench.sweep_csv(report), encoding="utf-8")
    print(bench.render_table(report))
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pinlf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"pinlf: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"pinlf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"pinlf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
