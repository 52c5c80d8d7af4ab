import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from pinlf.data import HdiMatrix, split_tenfold, synthetic_low_rank
from pinlf.factors import FactorPair, Hyperparams, init_factors, objective
from pinlf.oracle import dense_nmu_step, scalar_isn_recurrence
from pinlf.solvers import (
    DivergenceError, IncrementAccumulator, SolverConfig, SolverState, isn_iteration,
    load_checkpoint, nmu_expected_x, nmu_expected_y, refine_and_apply, save_checkpoint,
    slf_nmu_iteration, train,
)


def cfg(ki=0.0, kp=1.0, lam=0.0, **kw):
    return SolverConfig(hyper=Hyperparams(lam=lam, kp=kp, ki=ki), **kw)


# -- SLF-NMU ----------------------------------------------------------------

def test_expected_x_single_entry(one_by_one):
    data, pair = one_by_one
    assert nmu_expected_x(pair, data, lam=0.0)[0, 0] == 2.0
    assert nmu_expected_x(pair, data, lam=0.08)[0, 0] == pytest.approx(2 / 1.08, abs=1e-15)


def test_expected_y_single_entry(one_by_one):
    data, pair = one_by_one
    assert nmu_expected_y(pair, data, lam=0.0)[0, 0] == 2.0


def test_zero_factor_is_absorbing():
    data = HdiMatrix.from_arrays([0, 0, 1], [0, 1, 1], [1.0, 2.0, 3.0])
    pair = FactorPair([[0.0, 0.5], [0.3, 0.2]], [[0.4, 0.0], [0.1, 0.9]])
    X = nmu_expected_x(pair, data, lam=0.08)
    Y = nmu_expected_y(pair, data, lam=0.08)
    assert X[0, 0] == 0.0 and Y[0, 1] == 0.0
    assert (X >= 0).all() and (Y >= 0).all()


def test_empty_row_and_column_unchanged():
    data = HdiMatrix.from_arrays([0], [0], [2.0], shape=(2, 2))
    pair = FactorPair([[1.0], [0.7]], [[1.0], [0.3]])
    assert nmu_expected_x(pair, data, lam=0.08)[1, 0] == 0.7
    assert nmu_expected_y(pair, data, lam=0.08)[1, 0] == 0.3


def test_train_subset_matches_restricted_matrix():
    data = synthetic_low_rank(20, 15, 3, 0.4, seed=3)
    pair = init_factors(20, 15, 3, seed=1)
    idx = np.arange(0, data.nnz, 3)
    np.testing.assert_array_equal(
        nmu_expected_x(pair, data, idx, 0.08), nmu_expected_x(pair, data.restrict(idx), None, 0.08)
    )


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([0.0, 0.08]), st.sampled_from(["gauss-seidel", "jacobi"]))
def test_nmu_pass_matches_dense_oracle(seed, lam, schedule):
    data, inst, pair = random_instance(seed)
    got = slf_nmu_iteration(pair, data, lam=lam, schedule=schedule)
    X_ref, Y_ref = dense_nmu_step(inst, pair.X, pair.Y, lam, schedule)
    np.testing.assert_allclose(got.X, X_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(got.Y, Y_ref, rtol=0, atol=1e-12)


# -- refinement -------------------------------------------------------------

def test_refine_pure_slf_nmu():
    rng = np.random.default_rng(0)
    cur, exp, acc = rng.random((4, 3)), rng.random((4, 3)), rng.standard_normal((4, 3))
    nxt, acc2 = refine_and_apply(cur, exp, acc, kp=1.0, ki=0.0)
    np.testing.assert_array_equal(nxt, exp)
    np.testing.assert_array_equal(acc2, acc + (exp - cur))


def test_refine_scalar_step():
    nxt, acc = refine_and_apply(np.array([1.0]), np.array([2.0]), np.array([0.0]), 1.0, 0.01)
    assert acc[0] == 1.0
    assert nxt[0] == pytest.approx(2.01, abs=1e-15)


def test_refine_truncation_branch():
    nxt, acc = refine_and_apply(np.array([0.05]), np.array([0.01]), np.array([-10.0]), 1.0, 0.01)
    assert nxt[0] == 0.0
    # the stored increment is the raw one, not the truncated step
    assert acc[0] == pytest.approx(-10.04, abs=1e-12)


def test_refine_general_kp():
    nxt, _ = refine_and_apply(np.array([1.0]), np.array([2.0]), np.array([0.5]), kp=0.5, ki=0.1)
    # 1 + 0.5 * 1 + 0.1 * 1.5
    assert nxt[0] == pytest.approx(1.65, abs=1e-15)


def test_refine_shape_mismatch():
    with pytest.raises(ValueError):
        refine_and_apply(np.zeros(2), np.zeros(3), np.zeros(2))


# -- ISN iteration ----------------------------------------------------------

def test_isn_first_step_matches_scalar_oracle(one_by_one):
    data, pair = one_by_one
    state = isn_iteration(SolverState.initial(pair), data, None, cfg(ki=0.01))
    (x1, y1), = scalar_isn_recurrence(2.0, 1.0, 1.0, 0.0, 1.0, 0.01, 1)
    assert state.pair.X[0, 0] == pytest.approx(2.01, abs=1e-15)
    assert state.pair.Y[0, 0] == pytest.approx(0.994975124378, abs=1e-12)
    assert (state.pair.X[0, 0], state.pair.Y[0, 0]) == pytest.approx((x1, y1), abs=1e-15)
    assert state.iteration == 1


@pytest.mark.parametrize("schedule", ["gauss-seidel", "jacobi"])
@pytest.mark.parametrize("lam, kp, ki", [(0.0, 1.0, 0.03), (0.08, 1.0, 0.09), (0.08, 0.7, 0.02)])
def test_isn_trajectory_matches_scalar_oracle(schedule, lam, kp, ki):
    data = HdiMatrix.from_arrays([0], [0], [3.5])
    state = SolverState.initial(FactorPair([[0.4]], [[0.2]]))
    config = cfg(ki=ki, kp=kp, lam=lam, schedule=schedule)
    expected = scalar_isn_recurrence(3.5, 0.4, 0.2, lam, kp, ki, 60, schedule)
    for x_t, y_t in expected:
        state = isn_iteration(state, data, None, config)
        assert state.pair.X[0, 0] == pytest.approx(x_t, rel=1e-12, abs=1e-15)
        assert state.pair.Y[0, 0] == pytest.approx(y_t, rel=1e-12, abs=1e-15)


def test_scalar_oracle_hits_truncation():
    # a large initial overshoot drives the integral term negative
    traj = scalar_isn_recurrence(0.1, 3.0, 3.0, 0.0, 1.0, 0.09, 40)
    assert any(x == 0.0 for x, _ in traj)
    assert all(x >= 0 and y >= 0 for x, y in traj)


@pytest.mark.parametrize("schedule", ["gauss-seidel", "jacobi"])
def test_isn_ki0_equals_slf_nmu(schedule):
    data, _, pair = random_instance(17)
    state = SolverState.initial(pair.copy())
    plain = pair.copy()
    config = cfg(ki=0.0, lam=0.08, schedule=schedule)
    for _ in range(25):
        state = isn_iteration(state, data, None, config)
        plain = slf_nmu_iteration(plain, data, lam=0.08, schedule=schedule)
        assert np.array_equal(state.pair.X, plain.X) and np.array_equal(state.pair.Y, plain.Y)


def test_isn_does_not_mutate_input():
    data, _, pair = random_instance(4)
    state = SolverState.initial(pair.copy())
    before = state.copy()
    isn_iteration(state, data, None, cfg(ki=0.05, lam=0.08))
    assert np.array_equal(state.pair.X, before.pair.X)
    assert np.array_equal(state.accumulator.S_X, before.accumulator.S_X)


def test_zero_entries_stay_zero_ki0():
    data = synthetic_low_rank(10, 8, 2, 0.5, seed=2)
    pair = init_factors(10, 8, 3, seed=0)
    pair.X[2, 1] = pair.Y[5, 0] = 0.0
    state = SolverState.initial(pair)
    for _ in range(10):
        state = isn_iteration(state, data, None, cfg(lam=0.08))
    assert state.pair.X[2, 1] == 0.0 and state.pair.Y[5, 0] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.09), st.sampled_from(["gauss-seidel", "jacobi"]))
def test_nonnegative_after_every_iteration(seed, ki, schedule):
    data, _, pair = random_instance(seed)
    state = SolverState.initial(pair)
    config = cfg(ki=ki, lam=0.08, schedule=schedule)
    for _ in range(30):
        state = isn_iteration(state, data, None, config)
        assert state.pair.is_nonnegative()


@pytest.mark.parametrize("schedule", ["gauss-seidel", "jacobi"])
def test_accumulator_replay(schedule):
    data = synthetic_low_rank(30, 20, 3, 0.3, seed=8)
    state = SolverState.initial(init_factors(30, 20, 3, seed=3))
    config = cfg(ki=0.05, lam=0.08, schedule=schedule)
    sum_x = np.zeros_like(state.pair.X)
    sum_y = np.zeros_like(state.pair.Y)
    for _ in range(50):
        X_prev, Y_prev = state.pair.X, state.pair.Y
        X_exp = nmu_expected_x(state.pair, data, lam=0.08)
        state = isn_iteration(state, data, None, config)
        y_src = FactorPair(state.pair.X, Y_prev) if schedule == "gauss-seidel" else FactorPair(X_prev, Y_prev)
        sum_x += X_exp - X_prev
        sum_y += nmu_expected_y(y_src, data, lam=0.08) - Y_prev
    np.testing.assert_allclose(state.accumulator.S_X, sum_x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.accumulator.S_Y, sum_y, rtol=0, atol=1e-12)


def test_truncation_inert_when_inactive():
    # small ki on well-fit data never drives an entry negative, so clamping is a no-op
    data = synthetic_low_rank(15, 10, 2, 0.6, seed=1)
    state = SolverState.initial(init_factors(15, 10, 2, seed=1, lo=0.2, hi=0.6))
    h = Hyperparams(lam=0.08, ki=0.01)
    unclamped = state.copy()
    for _ in range(20):
        state = isn_iteration(state, data, None, cfg(ki=0.01, lam=0.08))
        X_exp = nmu_expected_x(unclamped.pair, data, lam=0.08)
        S_X = unclamped.accumulator.S_X + (X_exp - unclamped.pair.X)
        X1 = unclamped.pair.X + h.kp * (X_exp - unclamped.pair.X) + h.ki * S_X
        Y_exp = nmu_expected_y(FactorPair(X1, unclamped.pair.Y), data, lam=0.08)
        S_Y = unclamped.accumulator.S_Y + (Y_exp - unclamped.pair.Y)
        Y1 = unclamped.pair.Y + h.kp * (Y_exp - unclamped.pair.Y) + h.ki * S_Y
        assert (X1 > 0).all() and (Y1 > 0).all()
        unclamped = SolverState(FactorPair(X1, Y1), IncrementAccumulator(S_X, S_Y), unclamped.iteration + 1)
        np.testing.assert_allclose(state.pair.X, X1, rtol=1e-13)
        np.testing.assert_allclose(state.pair.Y, Y1, rtol=1e-13)


def test_objective_monotone_slf_nmu():
    data = synthetic_low_rank(40, 30, 3, 0.2, seed=6, noise=0.2)
    state = SolverState.initial(init_factors(40, 30, 4, seed=2))
    config = cfg(lam=0.08)
    prev = objective(state.pair, data, lam=0.08)
    for _ in range(100):
        state = isn_iteration(state, data, None, config)
        cur = objective(state.pair, data, lam=0.08)
        assert cur <= prev * (1 + 1e-9)
        prev = cur


# -- training loop ----------------------------------------------------------

def _full_split(n):
    everything = np.arange(n)
    return type("Split", (), {"train_set": everything, "validation_set": everything, "test_set": everything})


def test_train_exact_rank1_converges():
    x = np.array([[1.0], [2.0], [3.0]])
    y = np.array([[0.5], [1.0], [1.5]])
    full = x @ y.T
    rows, cols = np.nonzero(np.ones_like(full))
    data = HdiMatrix.from_arrays(rows, cols, full[rows, cols])
    rep = train(data, _full_split(9), cfg(f=1, lam=0.0, seed=0))
    assert rep.stop_reason == "error-threshold"
    assert rep.iterations_run < 1000
    assert rep.per_iteration[-1].val_rmse < 1e-3


def test_train_single_iteration():
    data = synthetic_low_rank(20, 10, 2, 0.5, seed=0)
    rep = train(data, split_tenfold(data, 0), cfg(f=2, max_iters=1))
    assert rep.iterations_run == len(rep.per_iteration) == 1
    assert rep.stop_reason == "iteration-threshold"


def test_train_report_best_snapshot():
    data = synthetic_low_rank(60, 40, 3, 0.2, seed=1, noise=0.3)
    split = split_tenfold(data, 1)
    rep = train(data, split, cfg(ki=0.04, lam=0.08, f=3, max_iters=80, error_threshold=0.0))
    vals = [r.val_rmse for r in rep.per_iteration]
    assert rep.best_val_rmse == min([rep.initial_val_rmse] + vals)
    assert rep.iterations_to_reach(rep.best_val_rmse) == rep.best_iteration
    assert rep.test_rmse_at_best is not None
    assert [r.iteration for r in rep.per_iteration] == list(range(1, 81))


def test_train_trace_stream():
    data = synthetic_low_rank(20, 10, 2, 0.5, seed=0)
    buf = io.StringIO()
    rep = train(data, split_tenfold(data, 0), cfg(f=2, max_iters=5, error_threshold=0.0), trace=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "iteration,objective,val_rmse,elapsed_ms"
    assert len(lines) == 1 + rep.iterations_run


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_error():
    data = synthetic_low_rank(20, 10, 2, 0.5, seed=0)
    huge = FactorPair(np.full((20, 2), 1e200), np.full((10, 2), 1e200))
    with pytest.raises(DivergenceError) as exc:
        train(data, split_tenfold(data, 0), cfg(f=2), initial=huge)
    assert exc.value.iteration == 1


def test_checkpoint_resume_is_seamless(tmp_path):
    data = synthetic_low_rank(30, 20, 3, 0.3, seed=2)
    split = split_tenfold(data, 2)
    full = train(data, split, cfg(ki=0.03, lam=0.08, f=3, max_iters=20, error_threshold=0.0))
    half = train(data, split, cfg(ki=0.03, lam=0.08, f=3, max_iters=10, error_threshold=0.0))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(half.final_state, path)
    resumed = train(data, split, cfg(ki=0.03, lam=0.08, f=3, max_iters=20, error_threshold=0.0),
                    state=load_checkpoint(path))
    assert resumed.iterations_run == 10
    assert np.array_equal(resumed.final_factors.X, full.final_factors.X)
    assert np.array_equal(resumed.final_state.accumulator.S_Y, full.final_state.accumulator.S_Y)


def test_ki_outside_validated_range_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="pinlf.solvers"):
        cfg(ki=0.2)
    assert "outside the validated range" in caplog.text


@pytest.mark.parametrize("kw", [{"max_iters": 0}, {"error_threshold": -1.0}, {"schedule": "async"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        cfg(**kw)
