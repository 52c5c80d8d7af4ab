"""SLF-NMU multiplicative updates and the PI-style increment refinement (ISN).

One ISN half-step for X (Y is symmetric)::

    X'     = nmu_expected_x(X, Y)          # plain SLF-NMU target
    delta  = X' - X                        # raw increment
    S_X   += delta                         # integral of raw increments
    X_next = max(X + kp * delta + ki * S_X, 0)

With ``kp=1, ki=0`` this is exactly SLF-NMU.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Literal, NamedTuple, TextIO

import numpy as np
import scipy.sparse as sp

from .data import HdiMatrix
from .factors import DEFAULT_INIT_RANGE, FactorPair, Hyperparams, init_factors, objective, predict_entries, rmse

log = logging.getLogger(__name__)

Schedule = Literal["gauss-seidel", "jacobi"]
SCHEDULES = ("gauss-seidel", "jacobi")
VALIDATED_KI_RANGE = (0.0, 0.09)


class DivergenceError(ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"training diverged at iteration {iteration} (objective={value!r})")
        self.iteration = iteration


# -- SLF-NMU ----------------------------------------------------------------

def _view(data: HdiMatrix, train) -> HdiMatrix:
    return data if train is None else data.restrict(train)


def _multiplicative(cur: np.ndarray, num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = cur.copy()
    ok = den != 0
    out[ok] = cur[ok] * num[ok] / den[ok]
    return out


def nmu_expected_x(pair: FactorPair, data: HdiMatrix, train=None, lam: float = 0.0) -> np.ndarray:
    """SLF-NMU target for X given the current (X, Y).

    ``x'[m,d] = x[m,d] * sum_n y[n,d] r[m,n] / (sum_n y[n,d] rhat[m,n] + lam |Λ(m)| x[m,d])``
    with sums over the training entries of row ``m``. A zero denominator
    leaves the entry unchanged (this covers rows without training data).

    ``train`` is an array of entry positions, or None for all entries.
    Passing a pre-restricted matrix with ``train=None`` avoids re-indexing.
    """
    data = _view(data, train)
    X, Y = pair.X, pair.Y
    rhat = predict_entries(pair, data.rows, data.cols)
    weighted = sp.csr_matrix((rhat, data.cols, data.row_ptr), shape=data.shape)
    num = data.row_major @ Y
    den = weighted @ Y + lam * data.row_counts()[:, None] * X
    return _multiplicative(X, num, den)


def nmu_expected_y(pair: FactorPair, data: HdiMatrix, train=None, lam: float = 0.0) -> np.ndarray:
    """Column counterpart of :func:`nmu_expected_x`."""
    data = _view(data, train)
    X, Y = pair.X, pair.Y
    order = data.col_order
    rhat = predict_entries(pair, data.rows[order], data.cols[order])
    weighted = sp.csr_matrix((rhat, data.rows[order], data.col_ptr), shape=(data.n_cols, data.n_rows))
    num = data.col_major @ X
    den = weighted @ X + lam * data.col_counts()[:, None] * Y
    return _multiplicative(Y, num, den)


def slf_nmu_iteration(pair: FactorPair, data: HdiMatrix, train=None, lam: float = 0.0,
                      schedule: Schedule = "gauss-seidel") -> FactorPair:
    """One plain SLF-NMU pass (no refinement)."""
    data = _view(data, train)
    X = nmu_expected_x(pair, data, None, lam)
    source = FactorPair(X, pair.Y) if schedule == "gauss-seidel" else pair
    Y = nmu_expected_y(source, data, None, lam)
    return FactorPair(X, Y)


# -- increment refinement ---------------------------------------------------

@dataclass
class IncrementAccumulator:
    """Running sums of raw SLF-NMU increments for X and Y."""

    S_X: np.ndarray
    S_Y: np.ndarray

    @classmethod
    def zeros_like(cls, pair: FactorPair) -> "IncrementAccumulator":
        return cls(np.zeros_like(pair.X), np.zeros_like(pair.Y))

    def copy(self) -> "IncrementAccumulator":
        return IncrementAccumulator(self.S_X.copy(), self.S_Y.copy())


def refine_and_apply(current: np.ndarray, expected: np.ndarray, accumulated: np.ndarray,
                     kp: float = 1.0, ki: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Apply one PI-refined step and return ``(next, accumulated')``.

    The accumulator gains the raw increment ``expected - current``, never the
    refined or truncated step. Negative results are truncated to zero.
    """
    current = np.asarray(current, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if current.shape != expected.shape or current.shape != np.shape(accumulated):
        raise ValueError("current, expected and accumulator shapes must agree")
    delta = expected - current
    acc = accumulated + delta
    # (1-kp)*cur + kp*exp == cur + kp*delta, but is exactly `expected` when kp=1, ki=0
    raw = (1.0 - kp) * current + kp * expected + ki * acc
    return np.maximum(raw, 0.0), acc


# -- training ---------------------------------------------------------------

@dataclass
class SolverConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    f: int = 20
    max_iters: int = 1000
    error_threshold: float = 1e-5
    schedule: Schedule = "gauss-seidel"
    seed: int = 0
    init_range: tuple[float, float] = DEFAULT_INIT_RANGE

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.error_threshold >= 0:
            raise ValueError("error_threshold must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.f < 1:
            raise ValueError("f must be >= 1")
        lo, hi = VALIDATED_KI_RANGE
        if not lo <= self.hyper.ki <= hi:
            log.warning("ki=%g is outside the validated range [%g, %g]", self.hyper.ki, lo, hi)

    def with_ki(self, ki: float) -> "SolverConfig":
        return replace(self, hyper=replace(self.hyper, ki=ki))


@dataclass
class SolverState:
    pair: FactorPair
    accumulator: IncrementAccumulator
    iteration: int = 0

    @classmethod
    def initial(cls, pair: FactorPair) -> "SolverState":
        return cls(pair, IncrementAccumulator.zeros_like(pair), 0)

    def copy(self) -> "SolverState":
        return SolverState(self.pair.copy(), self.accumulator.copy(), self.iteration)


def isn_iteration(state: SolverState, data: HdiMatrix, train, config: SolverConfig) -> SolverState:
    """One ISN iteration; returns a new state and leaves ``state`` untouched."""
    data = _view(data, train)
    h = config.hyper
    X0, Y0 = state.pair.X, state.pair.Y
    X_exp = nmu_expected_x(state.pair, data, None, h.lam)
    if config.schedule == "jacobi":
        Y_exp = nmu_expected_y(state.pair, data, None, h.lam)
        X1, S_X = refine_and_apply(X0, X_exp, state.accumulator.S_X, h.kp, h.ki)
    else:
        X1, S_X = refine_and_apply(X0, X_exp, state.accumulator.S_X, h.kp, h.ki)
        Y_exp = nmu_expected_y(FactorPair(X1, Y0), data, None, h.lam)
    Y1, S_Y = refine_and_apply(Y0, Y_exp, state.accumulator.S_Y, h.kp, h.ki)
    return SolverState(FactorPair(X1, Y1), IncrementAccumulator(S_X, S_Y), state.iteration + 1)


class IterationRecord(NamedTuple):
    iteration: int
    objective: float
    val_rmse: float
    elapsed_ms: float


TRACE_FIELDS = list(IterationRecord._fields)


@dataclass
class TrainReport:
    iterations_run: int
    per_iteration: list[IterationRecord]
    stop_reason: Literal["iteration-threshold", "error-threshold"]
    final_factors: FactorPair
    final_state: SolverState
    initial_val_rmse: float
    best_iteration: int
    best_val_rmse: float
    best_factors: FactorPair
    test_rmse_at_best: float | None = None

    @property
    def solver_ms(self) -> float:
        return sum(r.elapsed_ms for r in self.per_iteration)

    def iterations_to_reach(self, target: float) -> int | None:
        """First iteration whose validation RMSE is <= target, if any."""
        for r in self.per_iteration:
            if r.val_rmse <= target:
                return r.iteration
        return None


def train(data: HdiMatrix, split, config: SolverConfig, state: SolverState | None = None,
          trace: TextIO | None = None, initial: FactorPair | None = None) -> TrainReport:
    """Run ISN until ``max_iters`` or until validation RMSE moves less than
    ``error_threshold`` between consecutive iterations.

    ``split`` needs ``train_set``, ``validation_set`` and ``test_set`` entry
    arrays. Passing ``state`` resumes a checkpointed run; otherwise factors
    come from ``initial`` or ``init_factors(config.seed, config.init_range)``.
    If ``trace`` is given, one CSV row per iteration is streamed to it.
    """
    train_data = data.restrict(split.train_set)
    val_set = np.asarray(split.validation_set)
    test_set = np.asarray(split.test_set)
    lam = config.hyper.lam

    if state is None:
        if initial is None:
            initial = init_factors(data.n_rows, data.n_cols, config.f, config.seed, *config.init_range)
        state = SolverState.initial(initial.copy())
    state.pair.check_shape(data)

    writer = None
    if trace is not None:
        writer = csv.writer(trace, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)

    prev = initial_rmse = rmse(state.pair, data, val_set)
    best_it, best_rmse, best_pair = state.iteration, initial_rmse, state.pair
    records: list[IterationRecord] = []
    stop = "iteration-threshold"
    while state.iteration < config.max_iters:
        t0 = time.perf_counter()
        state = isn_iteration(state, train_data, None, config)
        elapsed = (time.perf_counter() - t0) * 1e3
        obj = objective(state.pair, train_data, None, lam)
        cur = rmse(state.pair, data, val_set)
        if not (math.isfinite(obj) and math.isfinite(cur)):
            raise DivergenceError(state.iteration, obj)
        rec = IterationRecord(state.iteration, obj, cur, elapsed)
        records.append(rec)
        if writer is not None:
            writer.writerow([rec.iteration, repr(rec.objective), repr(rec.val_rmse), f"{rec.elapsed_ms:.3f}"])
        if cur < best_rmse:
            best_it, best_rmse, best_pair = state.iteration, cur, state.pair
        if abs(cur - prev) < config.error_threshold:
            stop = "error-threshold"
            break
        prev = cur

    test_at_best = rmse(best_pair, data, test_set) if len(test_set) else None
    return TrainReport(
        iterations_run=len(records),
        per_iteration=records,
        stop_reason=stop,
        final_factors=state.pair,
        final_state=state,
        initial_val_rmse=initial_rmse,
        best_iteration=best_it,
        best_val_rmse=best_rmse,
        best_factors=best_pair,
        test_rmse_at_best=test_at_best,
    )


def save_checkpoint(state: SolverState, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, X=state.pair.X, Y=state.pair.Y, S_X=state.accumulator.S_X,
                 S_Y=state.accumulator.S_Y, iteration=np.int64(state.iteration))


def load_checkpoint(path) -> SolverState:
    with np.load(path) as z:
        return SolverState(
            FactorPair(z["X"], z["Y"]),
            IncrementAccumulator(z["S_X"].copy(), z["S_Y"].copy()),
            int(z["iteration"]),
        )
