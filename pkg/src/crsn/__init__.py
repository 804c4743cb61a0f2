"""Swarm-interaction sequence model for carbon-aware wastewater treatment forecasting."""

from .errors import (
    ConfigError,
    ContractError,
    CrsnError,
    DegenerateInputError,
    MeasurementError,
    NumericError,
    ParseError,
    RangeError,
    SchemaError,
    ShapeError,
)
from .model import CrsnConfig, CrsnModel, MiniAttnModel, MlpModel, Prediction, build_model
from .numerics import Rng
from .objective import LossWeights, composite_loss, compute_metrics
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
