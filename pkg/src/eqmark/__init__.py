"""Unsupervised landmark discovery from pretrained equivariant pixel features.

The package trains a dense pixel-feature extractor with a contrastive
objective, then trains a small landmark head on top of the frozen features
with an equivariance objective. It ships the geometry/augmentation layer,
the losses, a feature-matching accuracy metric, a synthetic dataset
generator, the two training loops, a regression-based evaluation harness,
and a command line interface.
"""

from eqmark.errors import (
    ConfigurationError,
    DataError,
    EqmarkError,
    NumericError,
    SamplingError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "EqmarkError",
    "ConfigurationError",
    "DataError",
    "NumericError",
    "SamplingError",
    "TrainingError",
    "__version__",
]
