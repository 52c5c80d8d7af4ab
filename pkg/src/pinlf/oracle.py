"""Dense, loop-naive reference implementations for tests.

Nothing here imports the sparse solver; keep it slow and literal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DIM = 32


@dataclass
class DenseInstance:
    R: np.ndarray      # M x N, NaN where unknown
    mask: np.ndarray   # True where known

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.R.shape != self.mask.shape:
            raise ValueError("R and mask shapes differ")
        if not np.array_equal(self.mask, ~np.isnan(self.R)):
            raise ValueError("mask must be true exactly where R has a value")
        if max(self.R.shape) > MAX_DIM:
            raise ValueError(f"dense oracle is limited to {MAX_DIM} x {MAX_DIM}")

    @classmethod
    def from_triples(cls, triples, shape):
        R = np.full(shape, np.nan)
        for r, c, v in triples:
            R[r, c] = v
        return cls(R, ~np.isnan(R))


def _rhat(X, Y, m, n):
    s = 0.0
    for d in range(len(X[m])):
        s += X[m][d] * Y[n][d]
    return s


def dense_objective(inst: DenseInstance, X, Y, lam: float) -> float:
    M, N = inst.R.shape
    f = len(X[0]) if M else 0
    total = 0.0
    for m in range(M):
        for n in range(N):
            if not inst.mask[m, n]:
                continue
            e = inst.R[m, n] - _rhat(X, Y, m, n)
            reg = 0.0
            for d in range(f):
                reg += X[m][d] ** 2 + Y[n][d] ** 2
            total += e * e + lam * reg
    return total


def _update_rows(R, mask, A, B, lam):
    """Multiplicative update of A (rows indexed like R) against fixed B."""
    M, N = mask.shape
    f = len(A[0]) if M else 0
    out = [list(row) for row in A]
    for m in range(M):
        known = [n for n in range(N) if mask[m, n]]
        for d in range(f):
            num = 0.0
            den = 0.0
            for n in known:
                num += B[n][d] * R[m, n]
                den += B[n][d] * _rhat(A, B, m, n)
            den += lam * len(known) * A[m][d]
            if den != 0.0:
                out[m][d] = A[m][d] * num / den
    return out


def dense_nmu_step(inst: DenseInstance, X, Y, lam: float, schedule: str = "gauss-seidel"):
    """One SLF-NMU pass; returns ``(X', Y')`` as float arrays."""
    Xl = [list(map(float, r)) for r in np.asarray(X)]
    Yl = [list(map(float, r)) for r in np.asarray(Y)]
    Xn = _update_rows(inst.R, inst.mask, Xl, Yl, lam)
    Xsrc = Xn if schedule == "gauss-seidel" else Xl
    Yn = _update_rows(inst.R.T, inst.mask.T, Yl, Xsrc, lam)
    return np.array(Xn, dtype=np.float64).reshape(np.shape(X)), np.array(Yn, dtype=np.float64).reshape(np.shape(Y))


def scalar_isn_recurrence(r, x0, y0, lam, kp, ki, steps, schedule="gauss-seidel"):
    """Exact M = N = f = 1 trajectory of the refined update, as [(x_t, y_t)]."""
    if steps > 100:
        raise ValueError("steps must be <= 100")
    x, y = float(x0), float(y0)
    sx = sy = 0.0
    out = []
    for _ in range(steps):
        den = y * (x * y) + lam * x
        xe = x * (y * r) / den if den != 0 else x
        sx += xe - x
        x_new = max(x + kp * (xe - x) + ki * sx, 0.0)
        xs = x_new if schedule == "gauss-seidel" else x
        den = xs * (xs * y) + lam * y
        ye = y * (xs * r) / den if den != 0 else y
        sy += ye - y
        y = max(y + kp * (ye - y) + ki * sy, 0.0)
        x = x_new
        out.append((x, y))
    return out
