"""Built-in classifiers, attack losses and the synthetic dataset."""

from .data import SyntheticDataset
from .losses import (
    AttackGoal,
    LossOracle,
    OracleError,
    loss_nontargeted_margin,
    loss_targeted_ce,
)
from .model import (
    Affine,
    Conv2D,
    Flatten,
    Model,
    ModelFormatError,
    ReLU,
    build_mlp,
    build_small_conv,
    forward,
    load_model,
    save_model,
)
from .training import TrainingDiverged, TrainResult, accuracy, train_model

__all__ = [
    "Affine",
    "AttackGoal",
    "Conv2D",
    "Flatten",
    "LossOracle",
    "Model",
    "ModelFormatError",
    "OracleError",
    "ReLU",
    "SyntheticDataset",
    "TrainResult",
    "TrainingDiverged",
    "accuracy",
    "build_mlp",
    "build_small_conv",
    "forward",
    "load_model",
    "loss_nontargeted_margin",
    "loss_targeted_ce",
    "save_model",
    "train_model",
]
