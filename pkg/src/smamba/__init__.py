"""S-Mamba multivariate time-series forecasting on a small numpy autodiff engine."""

from .data import SyntheticSpec, TimeSeriesDataset, generate_synthetic, load_csv, split_and_standardize
from .estimator import LinearForecaster, PersistenceForecaster, SMambaForecaster
from .model import LinearBaseline, ModelConfig, SMambaModel, count_parameters
from .ssm import MambaBlockParams, SSMConfig
from .tensor import GradientTape, Tensor
from .training import TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "GradientTape",
    "LinearBaseline",
    "LinearForecaster",
    "MambaBlockParams",
    "ModelConfig",
    "PersistenceForecaster",
    "SMambaForecaster",
    "SMambaModel",
    "SSMConfig",
    "SyntheticSpec",
    "Tensor",
    "TimeSeriesDataset",
    "TrainConfig",
    "TrainReport",
    "count_parameters",
    "evaluate",
    "generate_synthetic",
    "load_csv",
    "split_and_standardize",
    "train",
]
