"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain of an operation (bad shape, empty input, unknown id)."""


class ConfigError(ValueError):
    """A scenario or experiment configuration is invalid."""


class NumericError(ArithmeticError):
    """A gradient, loss or parameter became non-finite; the update was refused."""


class CheckpointError(IOError):
    """A checkpoint is missing, corrupt, or has incompatible shapes."""
