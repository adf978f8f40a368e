"""Exception hierarchy shared across the toolkit."""


class DehazeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DehazeError, ValueError):
    """Tensor shapes or extents are inconsistent."""


class NumericDomainError(DehazeError, ArithmeticError):
    """An input lies outside the numeric domain of an operation."""


class DomainError(DehazeError, ValueError):
    """A physical quantity is out of range (negative depth, beta <= 0, ...)."""


class ContractError(DehazeError, RuntimeError):
    """A caller violated a documented precondition."""


class ConfigError(DehazeError, ValueError):
    """Invalid configuration value or empty data split."""


class FormatError(DehazeError, ValueError):
    """A file exists but its content is malformed."""


class CheckpointMismatch(FormatError):
    """Checkpoint contents do not match the requested architecture."""


class TrainingDivergence(DehazeError, RuntimeError):
    """Loss became NaN or infinite during training."""

    def __init__(self, message: str, batch_index: int):
        super().__init__(message)
        self.batch_index = batch_index
