"""Exception hierarchy shared by every package, with CLI exit codes."""


class DPLDMError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(DPLDMError):
    """Invalid configuration value, unknown key, or unreachable setting."""

    exit_code = 2


class DataError(DPLDMError):
    """Dataset content is unusable (empty, mixed sizes, single class...)."""

    exit_code = 3


class FormatError(DataError):
    """A binary archive or checkpoint does not match its declared layout."""


class BudgetRefusal(DPLDMError):
    """The accountant disagrees with the configured privacy budget."""

    exit_code = 4


class StateError(DPLDMError):
    """A prerequisite artifact is missing or the output directory is locked."""


class CalibrationError(DPLDMError):
    """Noise calibration cannot reach the requested target."""


class NumericError(DPLDMError, ArithmeticError):
    """Non-finite values or a matrix that cannot be repaired to PSD."""


class DimensionError(DPLDMError, ValueError):
    """Tensor extents do not fit the operation."""


class ContractError(DPLDMError, ValueError):
    """An operation was called outside its preconditions."""
