"""
target-vae - unsupervised inference of object pose and semantics with a
rotation- and translation-equivariant variational autoencoder.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("target-vae")
except PackageNotFoundError:
    __version__ = "0.1.0"

from .config.settings import ExperimentConfig, ModelConfig, PriorConfig, TrainConfig, VariantId
from .core.exceptions import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    InvalidDimensionError,
    NumericError,
    ShapeError,
    TargetVAEError,
    TrainingAbortedError,
    UnknownVariantError,
)
from .core.model import TargetVAE, build_variant, load_checkpoint, save_checkpoint
from .core.training import Trainer, elbo_loss

__all__ = [
    "TargetVAE",
    "Trainer",
    "build_variant",
    "elbo_loss",
    "load_checkpoint",
    "save_checkpoint",
    "ExperimentConfig",
    "ModelConfig",
    "PriorConfig",
    "TrainConfig",
    "VariantId",
    "TargetVAEError",
    "ConfigurationError",
    "DegenerateInputError",
    "FormatError",
    "InvalidArgumentError",
    "InvalidDimensionError",
    "NumericError",
    "ShapeError",
    "TrainingAbortedError",
    "UnknownVariantError",
    "__version__",
]
