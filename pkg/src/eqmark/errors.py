"""Exception types shared across the package."""


class EqmarkError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(EqmarkError):
    """A config value or combination of values is invalid."""


class DataError(EqmarkError):
    """A dataset, index file, or checkpoint is missing or malformed."""


class NumericError(EqmarkError):
    """A computation cannot produce a well-defined value.

    Raised for things like a loss over zero valid terms or a cosine
    similarity of a zero-norm vector, and for divergence during training.
    """


class SamplingError(EqmarkError):
    """Rejection sampling exhausted its retry budget."""


class TrainingError(EqmarkError):
    """A training run violated one of its runtime contracts."""
