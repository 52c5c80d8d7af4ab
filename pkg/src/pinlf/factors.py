"""Non-negative latent factors, prediction, objective and RMSE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import HdiMatrix

DEFAULT_INIT_RANGE = (0.0, 0.5)


@dataclass
class FactorPair:
    """Row factors ``X`` (M x f) and column factors ``Y`` (N x f)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[1] != self.Y.shape[1]:
            raise ValueError(f"incompatible factor shapes {self.X.shape} and {self.Y.shape}")

    @property
    def f(self) -> int:
        return self.X.shape[1]

    def copy(self) -> "FactorPair":
        return FactorPair(self.X.copy(), self.Y.copy())

    def is_nonnegative(self) -> bool:
        return bool((self.X >= 0).all() and (self.Y >= 0).all())

    def check_shape(self, data: HdiMatrix) -> None:
        if self.X.shape[0] != data.n_rows or self.Y.shape[0] != data.n_cols:
            raise ValueError(
                f"factors ({self.X.shape[0]} x {self.Y.shape[0]}) do not match matrix {data.shape}"
            )


@dataclass(frozen=True)
class Hyperparams:
    lam: float = 0.08
    kp: float = 1.0
    ki: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not (math.isfinite(self.kp) and math.isfinite(self.ki)):
            raise ValueError("kp and ki must be finite")


def init_factors(M: int, N: int, f: int, seed: int, lo: float = DEFAULT_INIT_RANGE[0],
                 hi: float = DEFAULT_INIT_RANGE[1]) -> FactorPair:
    """Draw X then Y i.i.d. uniform on [lo, hi) from ``numpy.random.default_rng(seed)``."""
    if lo < 0:
        raise ValueError(f"lo must be >= 0 to keep factors non-negative, got {lo}")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    if f < 1:
        raise ValueError(f"f must be >= 1, got {f}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(M, f))
    Y = rng.uniform(lo, hi, size=(N, f))
    return FactorPair(X, Y)


def predict(pair: FactorPair, m: int, n: int) -> float:
    if not (0 <= m < pair.X.shape[0] and 0 <= n < pair.Y.shape[0]):
        raise IndexError(f"({m}, {n}) out of range for factors {pair.X.shape[0]} x {pair.Y.shape[0]}")
    return float(pair.X[m] @ pair.Y[n])


def predict_entries(pair: FactorPair, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", pair.X[rows], pair.Y[cols])


def _entries(data: HdiMatrix, entries) -> np.ndarray:
    if entries is None:
        return np.arange(data.nnz)
    entries = np.asarray(entries, dtype=np.int64)
    if len(entries) and (entries.min() < 0 or entries.max() >= data.nnz):
        raise IndexError("entry index out of range")
    return entries


def objective(pair: FactorPair, data: HdiMatrix, train=None, lam: float = 0.0) -> float:
    """Squared error plus density-weighted L2 penalty over the training entries.

    The penalty ``lam * (|x_m|^2 + |y_n|^2)`` is added once per known entry,
    so heavily observed rows and columns are regularized more.
    """
    idx = _entries(data, train)
    rows, cols = data.rows[idx], data.cols[idx]
    resid = data.values[idx] - predict_entries(pair, rows, cols)
    loss = float(resid @ resid)
    if lam:
        xsq = np.einsum("ij,ij->i", pair.X, pair.X)
        ysq = np.einsum("ij,ij->i", pair.Y, pair.Y)
        loss += lam * float(np.bincount(rows, minlength=len(xsq)) @ xsq
                            + np.bincount(cols, minlength=len(ysq)) @ ysq)
    return loss


def rmse(pair: FactorPair, data: HdiMatrix, eval_set=None) -> float:
    idx = _entries(data, eval_set)
    if len(idx) == 0:
        raise ValueError("rmse needs a non-empty evaluation set")
    resid = data.values[idx] - predict_entries(pair, data.rows[idx], data.cols[idx])
    return math.sqrt(float(resid @ resid) / len(idx))


def save_factors(pair: FactorPair, path) -> None:
    """CSV checkpoint: a ``name,rows,cols`` header line before each matrix."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, mat in (("X", pair.X), ("Y", pair.Y)):
            fh.write(f"{name},{mat.shape[0]},{mat.shape[1]}\n")
            np.savetxt(fh, mat, delimiter=",", fmt="%.17g")


def load_factors(path) -> FactorPair:
    mats = {}
    with open(path, encoding="utf-8") as fh:
        for _ in range(2):
            name, r, c = fh.readline().strip().split(",")
            r, c = int(r), int(c)
            rows = [fh.readline() for _ in range(r)]
            mats[name] = np.array(
                [[float(v) for v in line.split(",")] for line in rows], dtype=np.float64
            ).reshape(r, c)
    return FactorPair(mats["X"], mats["Y"])
