"""Non-negative latent factor analysis of sparse HDI matrices with
SLF-NMU and PI-refined (ISN) updates."""

from .data import (
    DataError, FormatSpec, HdiMatrix, RatingTriple, SplitAssignment,
    build_hdi, parse_ratings, split_tenfold,
)
from .factors import FactorPair, Hyperparams, init_factors, objective, predict, rmse
from .solvers import (
    DivergenceError, IncrementAccumulator, SolverConfig, SolverState, TrainReport,
    isn_iteration, nmu_expected_x, nmu_expected_y, refine_and_apply, slf_nmu_iteration, train,
)

__version__ = "0.1.0"
