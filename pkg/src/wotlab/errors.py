"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes do not fit together."""


class TapeStateError(RuntimeError):
    """A gradient tape was used after being consumed."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary format."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or does not fit the model."""
