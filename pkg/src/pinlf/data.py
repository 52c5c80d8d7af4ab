"""Rating-triple ingestion, sparse HDI matrices and ten-way splits.

An HDI (high-dimensional and incomplete) matrix only stores its known
entries. Entries are kept sorted by (row, col) so that ``row_ptr`` gives
the CSR layout directly; ``col_order``/``col_ptr`` give the column view.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, TextIO

import numpy as np
import scipy.sparse as sp


class DataError(ValueError):
    """Raised for malformed or inconsistent rating data."""


class ParseError(DataError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DuplicateEntryError(DataError):
    def __init__(self, row: int, col: int):
        super().__init__(f"duplicate entry at (row={row}, col={col})")
        self.pair = (row, col)


class RatingTriple(NamedTuple):
    row: int
    col: int
    value: float


@dataclass(frozen=True)
class FormatSpec:
    """Layout of a delimited rating file. Extra columns are ignored."""

    delimiter: str = ","
    row_field: int = 0
    col_field: int = 1
    value_field: int = 2
    header: bool = False

    @classmethod
    def named(cls, name: str, header: bool = False) -> "FormatSpec":
        try:
            delim = FORMATS[name]
        except KeyError:
            raise ValueError(f"unknown format {name!r}; expected one of {sorted(FORMATS)}") from None
        return cls(delimiter=delim, header=header)


FORMATS = {"tab": "\t", "comma": ",", "mldouble-colon": "::"}


class Ratings(list):
    """List of dense-indexed :class:`RatingTriple` plus the external id maps.

    ``row_ids[i]`` is the external id that was mapped to row index ``i``.
    """

    def __init__(self, triples=(), row_ids=(), col_ids=()):
        super().__init__(triples)
        self.row_ids = list(row_ids)
        self.col_ids = list(col_ids)


def parse_ratings(stream: TextIO | bytes | str | Iterable[str], fmt: FormatSpec | None = None) -> Ratings:
    """Parse delimited rating lines into dense 0-based triples.

    External ids are remapped in order of first appearance. Blank lines are
    skipped; a negative value raises :class:`DataError`.
    """
    fmt = fmt or FormatSpec()
    if isinstance(stream, bytes):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        stream = io.StringIO(stream)

    need = max(fmt.row_field, fmt.col_field, fmt.value_field) + 1
    row_map: dict[str, int] = {}
    col_map: dict[str, int] = {}
    triples = []
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if fmt.header and lineno == 1:
            continue
        line = line.strip("\r\n")
        if not line.strip():
            continue
        fields = line.split(fmt.delimiter)
        if len(fields) < need:
            raise ParseError(lineno, f"expected at least {need} fields, got {len(fields)}")
        rid = fields[fmt.row_field].strip()
        cid = fields[fmt.col_field].strip()
        try:
            value = float(fields[fmt.value_field])
        except ValueError:
            raise ParseError(lineno, f"non-numeric value {fields[fmt.value_field]!r}") from None
        if not math.isfinite(value):
            raise ParseError(lineno, f"non-finite value {value!r}")
        if value < 0:
            raise DataError(f"line {lineno}: negative value {value!r}")
        r = row_map.setdefault(rid, len(row_map))
        c = col_map.setdefault(cid, len(col_map))
        triples.append(RatingTriple(r, c, value))
    return Ratings(triples, row_map, col_map)


def serialize_ratings(triples: Iterable[RatingTriple], delimiter: str = ",") -> str:
    return "".join(f"{t.row}{delimiter}{t.col}{delimiter}{float(t.value)!r}\n" for t in triples)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HdiMatrix:
    """Known entries of a non-negative M x N matrix, dual-indexed.

    ``rows``, ``cols`` and ``values`` are sorted by (row, col). Entry ``i``
    of the matrix is ``(rows[i], cols[i], values[i])``; entry sets used by
    splits and evaluation are arrays of such positions.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_ptr: np.ndarray = field(repr=False)
    col_order: np.ndarray = field(repr=False)
    col_ptr: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, rows, cols, values, shape: tuple[int, int] | None = None) -> "HdiMatrix":
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (len(rows) == len(cols) == len(values)):
            raise DataError("rows, cols and values must have equal length")
        if len(rows) and (rows.min() < 0 or cols.min() < 0):
            raise DataError("indices must be non-negative")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise DataError("values must be finite and non-negative")
        if shape is None:
            shape = (int(rows.max()) + 1 if len(rows) else 0, int(cols.max()) + 1 if len(cols) else 0)
        n_rows, n_cols = int(shape[0]), int(shape[1])
        if len(rows) and (rows.max() >= n_rows or cols.max() >= n_cols):
            raise DataError(f"index out of range for shape {shape}")

        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if len(rows) > 1:
            dup = np.flatnonzero((rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1]))
            if len(dup):
                i = dup[0]
                raise DuplicateEntryError(int(rows[i]), int(cols[i]))

        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
        # stable sort on col keeps ascending row order inside each column
        col_order = np.argsort(cols, kind="stable")
        col_ptr = np.zeros(n_cols + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=n_cols), out=col_ptr[1:])
        return cls(
            n_rows, n_cols,
            _readonly(rows), _readonly(cols), _readonly(values),
            _readonly(row_ptr), _readonly(col_order), _readonly(col_ptr),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return self.nnz

    def row_entries(self, m: int) -> np.ndarray:
        """Entry positions of Λ(m), ascending by column."""
        return np.arange(self.row_ptr[m], self.row_ptr[m + 1])

    def col_entries(self, n: int) -> np.ndarray:
        """Entry positions of Λ(n), ascending by row."""
        return self.col_order[self.col_ptr[n]:self.col_ptr[n + 1]]

    def row_counts(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def col_counts(self) -> np.ndarray:
        return np.diff(self.col_ptr)

    def triples(self) -> list[RatingTriple]:
        return [RatingTriple(int(r), int(c), float(v)) for r, c, v in zip(self.rows, self.cols, self.values)]

    def restrict(self, entries) -> "HdiMatrix":
        """Sub-matrix holding only the given entry positions, same shape."""
        entries = np.asarray(entries, dtype=np.int64)
        return HdiMatrix.from_arrays(self.rows[entries], self.cols[entries], self.values[entries], self.shape)

    @cached_property
    def row_major(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.cols, self.row_ptr), shape=self.shape)

    @cached_property
    def col_major(self) -> sp.csr_matrix:
        """Transpose in CSR form (N x M)."""
        return sp.csr_matrix(
            (self.values[self.col_order], self.rows[self.col_order], self.col_ptr),
            shape=(self.n_cols, self.n_rows),
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.asarray(self.shape, dtype=np.int64).tobytes())
        for a in (self.rows, self.cols, self.values):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def build_hdi(triples: Iterable[RatingTriple]) -> HdiMatrix:
    triples = list(triples)
    if not triples:
        return HdiMatrix.from_arrays([], [], [], (0, 0))
    rows, cols, values = zip(*triples)
    if any(v < 0 for v in values):
        raise DataError("values must be non-negative")
    return HdiMatrix.from_arrays(rows, cols, values)


# -- splitting ---------------------------------------------------------------

N_FOLDS = 10
TRAIN_FOLDS = tuple(range(7))
VALIDATION_FOLDS = (7,)
TEST_FOLDS = (8, 9)
_MASK64 = (1 << 64) - 1


def splitmix64(state: int):
    """Infinite stream of 64-bit outputs from the SplitMix64 generator."""
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def portable_permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(n)`` driven by SplitMix64.

    Step ``i`` (from ``n-1`` down to 1) swaps position ``i`` with
    ``j = (u * (i + 1)) >> 64`` where ``u`` is the next 64-bit output.
    Only integer arithmetic is involved, so any language can reproduce it.
    """
    perm = list(range(n))
    gen = splitmix64(seed & _MASK64)
    for i in range(n - 1, 0, -1):
        j = (next(gen) * (i + 1)) >> 64
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    fold_of_entry: np.ndarray
    rotation: int
    seed: int
    train_set: np.ndarray
    validation_set: np.ndarray
    test_set: np.ndarray

    def fold_sizes(self) -> list[int]:
        return np.bincount(self.fold_of_entry, minlength=N_FOLDS).tolist()

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "rotation": self.rotation,
            "shuffle_seed": self.seed + self.rotation,
            "prng": "splitmix64-fisher-yates",
            "n_entries": int(len(self.fold_of_entry)),
            "fold_sizes": self.fold_sizes(),
            "train_folds": list(TRAIN_FOLDS),
            "validation_folds": list(VALIDATION_FOLDS),
            "test_folds": list(TEST_FOLDS),
            "train_size": int(len(self.train_set)),
            "validation_size": int(len(self.validation_set)),
            "test_size": int(len(self.test_set)),
        }

    def __eq__(self, other):
        if not isinstance(other, SplitAssignment):
            return NotImplemented
        return (
            self.rotation == other.rotation
            and self.seed == other.seed
            and np.array_equal(self.fold_of_entry, other.fold_of_entry)
        )


def split_tenfold(matrix: HdiMatrix | int, seed: int, rotation: int = 0) -> SplitAssignment:
    """Randomly assign entries to ten folds: 7 train, 1 validation, 2 test.

    Each rotation is an independent reshuffle using ``seed + rotation``.
    The entry at shuffled position ``p`` goes to fold ``p % 10``, so fold
    sizes differ by at most one.
    """
    n = matrix if isinstance(matrix, int) else matrix.nnz
    if n < N_FOLDS:
        raise DataError(f"need at least {N_FOLDS} entries to split, got {n}")
    if not 0 <= rotation <= 4:
        raise ValueError(f"rotation must be in 0..4, got {rotation}")
    perm = portable_permutation(n, seed + rotation)
    fold = np.empty(n, dtype=np.int64)
    fold[perm] = np.arange(n) % N_FOLDS

    def members(folds):
        return _readonly(np.flatnonzero(np.isin(fold, folds)))

    return SplitAssignment(
        _readonly(fold), rotation, seed,
        members(TRAIN_FOLDS), members(VALIDATION_FOLDS), members(TEST_FOLDS),
    )


def write_split_manifest(split: SplitAssignment, path, **extra) -> None:
    doc = split.manifest()
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ratings(path, fmt: FormatSpec) -> tuple[HdiMatrix, Ratings]:
    with open(path, encoding="utf-8") as fh:
        ratings = parse_ratings(fh, fmt)
    matrix = HdiMatrix.from_arrays(
        [t.row for t in ratings], [t.col for t in ratings], [t.value for t in ratings],
        (len(ratings.row_ids), len(ratings.col_ids)),
    )
    return matrix, ratings


def synthetic_low_rank(n_rows: int, n_cols: int, rank: int, density: float, seed: int = 0,
                       scale: float = 5.0, noise: float = 0.0) -> HdiMatrix:
    """Sampled entries of a random non-negative rank-``rank`` matrix.

    Exact factors are uniform on [0, 1) and the product is rescaled so that
    its largest entry equals ``scale``; optional Gaussian noise is clipped
    at zero. At least one entry per row and column is kept.
    """
    rng = np.random.default_rng(seed)
    u = rng.random((n_rows, rank))
    v = rng.random((n_cols, rank))
    full = u @ v.T
    full *= scale / full.max()
    mask = rng.random((n_rows, n_cols)) < density
    mask[np.arange(n_rows), rng.integers(0, n_cols, n_rows)] = True
    mask[rng.integers(0, n_rows, n_cols), np.arange(n_cols)] = True
    rows, cols = np.nonzero(mask)
    values = full[rows, cols]
    if noise:
        values = np.maximum(values + noise * rng.standard_normal(len(values)), 0.0)
    return HdiMatrix.from_arrays(rows, cols, values, (n_rows, n_cols))
