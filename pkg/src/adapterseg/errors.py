"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes or widths do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An API precondition was violated (non-scalar output, bad mask, ...)."""


class ConfigError(ValueError):
    """A configuration value is invalid; the message names the field."""


class DataError(ValueError):
    """A dataset file or manifest record could not be used."""


class TrainingAbort(RuntimeError):
    """Training hit a non-recoverable numerical state (NaN loss)."""
