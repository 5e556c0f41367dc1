"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class GenerationError(RuntimeError):
    """Synthetic scene placement could not be satisfied."""


class FreezeViolation(RuntimeError):
    """Frozen trunk parameters changed during fine-tuning."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or fail their checksum."""
