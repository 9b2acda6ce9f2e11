"""Gradient-learning black-box optimizers with evolutionary importance weights."""

from .evo import CmaState, WeightMap, cma_run, cma_tr_run, weights_for
from .objectives import (BudgetExhausted, BudgetMeter, ConfigurationError, Problem, make_problem,
                         make_suite, problem_from_key)
from .optimizer import PRESETS, OptimizerConfig, adaptive_sizes, preset, run
from .records import RunRecord
from .surrogate import GradNet, LossConfig, PairBatch, TaylorPair, Trainer
from .trust_region import TrustRegion

__version__ = "0.1.0"

__all__ = [
    "BudgetExhausted", "BudgetMeter", "CmaState", "ConfigurationError", "GradNet", "LossConfig",
    "OptimizerConfig", "PRESETS", "PairBatch", "Problem", "RunRecord", "TaylorPair", "Trainer",
    "TrustRegion", "WeightMap", "adaptive_sizes", "cma_run", "cma_tr_run", "make_problem",
    "make_suite", "preset", "problem_from_key", "run", "weights_for",
]
