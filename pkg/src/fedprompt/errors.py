"""Exception types shared across the package."""


class FedPromptError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedPromptError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ParameterError(FedPromptError, ValueError):
    """A scalar hyperparameter is outside its legal range."""


class DegenerateInputError(FedPromptError, ValueError):
    """An input is numerically degenerate (e.g. a near-zero norm)."""


class ConfigError(FedPromptError, ValueError):
    """A configuration object, mode string, or config file is invalid."""


class OptimizerStateError(FedPromptError, RuntimeError):
    """Optimizer state is inconsistent with the parameters it manages."""


class ProtocolError(FedPromptError, RuntimeError):
    """A federated exchange violated the aggregation/broadcast contract."""


class DataError(FedPromptError, ValueError):
    """A dataset operation received an empty or undersized dataset."""
