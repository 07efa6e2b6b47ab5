"""Numerical tools for studying the low-rank bias of deep L2-regularized networks."""
from .errors import RankscopeError
from .linalg import SingularSpectrum, numerical_rank, schatten_norm, singular_values, svd
from .network import NetworkParams, PiecewiseLinearFn
from .rank import RankReport, TspBound
from .training import TrainConfig, TrainHistory, train
from .datagen import Dataset

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "NetworkParams",
    "PiecewiseLinearFn",
    "RankReport",
    "RankscopeError",
    "SingularSpectrum",
    "TrainConfig",
    "TrainHistory",
    "TspBound",
    "numerical_rank",
    "schatten_norm",
    "singular_values",
    "svd",
    "train",
]
