"""Experiment harness: ki sweeps over rotations, Table-II-style reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import FormatSpec, HdiMatrix, load_ratings, split_tenfold
from .factors import Hyperparams, init_factors
from .solvers import TRACE_FIELDS, DivergenceError, IterationRecord, SolverConfig, train

log = logging.getLogger(__name__)

DEFAULT_KI_GRID = tuple(round(0.01 * i, 2) for i in range(10))
CELL_FIELDS = [
    "run_id", "ki", "rotation", "status", "best_val_rmse", "best_iteration",
    "test_rmse", "iterations_run", "stop_reason", "reason",
]


@dataclass
class ExperimentConfig:
    dataset: str | None
    fmt: FormatSpec = field(default_factory=FormatSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    rotations: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    ki_grid: list[float] = field(default_factory=lambda: list(DEFAULT_KI_GRID))
    out_dir: str | None = None

    def __post_init__(self):
        if any(not math.isfinite(k) for k in self.ki_grid):
            raise ValueError("ki_grid values must be finite")
        bad = [r for r in self.rotations if not 0 <= r <= 4]
        if bad:
            raise ValueError(f"rotations must be within 0..4, got {bad}")

    def echo(self) -> dict:
        s = self.solver
        return {
            "dataset": self.dataset,
            "format": asdict(self.fmt),
            "f": s.f,
            "lambda": s.hyper.lam,
            "kp": s.hyper.kp,
            "max_iters": s.max_iters,
            "error_threshold": s.error_threshold,
            "schedule": s.schedule,
            "seed": s.seed,
            "init_range": list(s.init_range),
            "rotations": list(self.rotations),
            "ki_grid": list(self.ki_grid),
        }


@dataclass
class Cell:
    run_id: str
    ki: float
    rotation: int
    status: str = "ok"
    best_val_rmse: float | None = None
    best_iteration: int | None = None
    test_rmse: float | None = None
    iterations_run: int | None = None
    stop_reason: str | None = None
    reason: str = ""
    wall_ms: float | None = None


@dataclass
class SweepReport:
    config: dict
    dataset_digest: str
    cells: list[Cell]
    traces: dict = field(default_factory=dict, compare=False, repr=False)

    def aggregates(self) -> list[dict]:
        """Mean and sample std across rotations for every ki (ok cells only)."""
        out = []
        for ki in sorted({c.ki for c in self.cells}):
            ok = [c for c in self.cells if c.ki == ki and c.status == "ok"]
            row = {"ki": ki, "runs": len(ok), "failed": sum(c.ki == ki and c.status != "ok" for c in self.cells)}
            for key in ("best_val_rmse", "best_iteration", "test_rmse"):
                vals = [float(getattr(c, key)) for c in ok if getattr(c, key) is not None]
                row[f"{key}_mean"] = statistics.fmean(vals) if vals else None
                row[f"{key}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0 if vals else None
            out.append(row)
        return out

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "dataset_digest": self.dataset_digest,
            "cells": [asdict(c) for c in self.cells],
            "aggregates": self.aggregates(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SweepReport":
        return cls(doc["config"], doc["dataset_digest"], [Cell(**c) for c in doc["cells"]])


def run_id(dataset_digest: str, rotation: int, ki: float, seed: int) -> str:
    key = f"{dataset_digest}|{rotation}|{ki!r}|{seed}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PINLF_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig, data: HdiMatrix | None = None) -> SweepReport:
    """Train every (rotation, ki) cell and collect a :class:`SweepReport`.

    All ki values of one rotation start from the same initial factors.
    A diverged run is recorded as failed and the sweep carries on.
    """
    if data is None:
        data, _ = load_ratings(config.dataset, config.fmt)
    digest = data.digest()
    base = config.solver
    init = init_factors(data.n_rows, data.n_cols, base.f, base.seed, *base.init_range)

    jobs = []
    for rot in config.rotations:
        split = split_tenfold(data, base.seed, rot)
        for ki in config.ki_grid:
            jobs.append((rot, ki, split))

    def run(job):
        rot, ki, split = job
        rid = run_id(digest, rot, ki, base.seed)
        cell = Cell(rid, ki, rot)
        try:
            rep = train(data, split, base.with_ki(ki), initial=init)
        except DivergenceError as exc:
            log.warning("run %s (ki=%g, rotation=%d) failed: %s", rid, ki, rot, exc)
            cell.status, cell.reason = "failed", str(exc)
            return cell, None
        cell.best_val_rmse = rep.best_val_rmse
        cell.best_iteration = rep.best_iteration
        cell.test_rmse = rep.test_rmse_at_best
        cell.iterations_run = rep.iterations_run
        cell.stop_reason = rep.stop_reason
        cell.wall_ms = rep.solver_ms
        return cell, rep.per_iteration

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run, jobs))

    report = SweepReport(config.echo(), digest, [c for c, _ in results])
    report.traces = {c.run_id: t for c, t in results if t is not None}
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CELL_FIELDS)
    for c in report.cells:
        w.writerow([_fmt(getattr(c, k)) for k in CELL_FIELDS])
    return buf.getvalue()


def emit_report(report: SweepReport, out_dir) -> list[Path]:
    """Write sweep.csv, sweep.json and traces/<run-id>.csv under ``out_dir``.

    sweep.csv holds no timings so identical configs give identical bytes;
    wall-clock totals live in sweep.json and the traces.
    """
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        p = out / "sweep.csv"
        p.write_text(sweep_csv(report), encoding="utf-8")
        written.append(p)
        p = out / "sweep.json"
        p.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(p)
        if report.traces:
            tdir = out / "traces"
            tdir.mkdir(exist_ok=True)
            for rid, records in report.traces.items():
                p = tdir / f"{rid}.csv"
                write_trace(records, p)
                written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or out}: {exc.strerror or exc}") from exc
    return written


def write_trace(records: list[IterationRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in records:
            w.writerow([r.iteration, repr(r.objective), repr(r.val_rmse), f"{r.elapsed_ms:.3f}"])


def load_report(path) -> SweepReport:
    path = Path(path)
    if path.is_dir():
        path = path / "sweep.json"
    with open(path, encoding="utf-8") as fh:
        return SweepReport.from_json(json.load(fh))


def render_table(report: SweepReport) -> str:
    """Plain-text summary: one line per ki plus best-ki versus ki=0."""
    lines = [f"{'ki':>6} {'runs':>4} {'val RMSE':>18} {'iterations':>16} {'test RMSE':>18}"]
    aggs = report.aggregates()

    def pm(row, key, spec):
        m, s = row[f"{key}_mean"], row[f"{key}_std"]
        return "n/a" if m is None else f"{m:{spec}} ± {s:{spec}}"

    for row in aggs:
        lines.append(
            f"{row['ki']:>6.2f} {row['runs']:>4d} {pm(row, 'best_val_rmse', '.4f'):>18} "
            f"{pm(row, 'best_iteration', '.1f'):>16} {pm(row, 'test_rmse', '.4f'):>18}"
        )
    scored = [r for r in aggs if r["best_val_rmse_mean"] is not None]
    base = next((r for r in scored if r["ki"] == 0), None)
    tuned = [r for r in scored if r["ki"] != 0]
    if base and tuned:
        best = min(tuned, key=lambda r: r["best_val_rmse_mean"])
        lines.append(
            f"optimal ki={best['ki']:.2f}: RMSE {best['best_val_rmse_mean']:.4f} in "
            f"{best['best_iteration_mean']:.0f} its; ki=0: RMSE {base['best_val_rmse_mean']:.4f} in "
            f"{base['best_iteration_mean']:.0f} its"
        )
    return "\n".join(lines)


def default_solver(**overrides) -> SolverConfig:
    hyper = Hyperparams(
        lam=overrides.pop("lam", 0.08), kp=overrides.pop("kp", 1.0), ki=overrides.pop("ki", 0.0)
    )
    return SolverConfig(hyper=hyper, **overrides)
