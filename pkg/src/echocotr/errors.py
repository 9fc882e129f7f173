"""Exception hierarchy shared by every subsystem."""


class EchoCoTrError(Exception):
    pass


class DimensionError(EchoCoTrError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(EchoCoTrError, ValueError):
    """Invalid hyperparameter, mode or configuration value."""


class ContractError(EchoCoTrError, RuntimeError):
    """An operation was called outside of its preconditions."""


class DataError(EchoCoTrError, ValueError):
    """Bad input data: out of range indices, invalid manifest rows."""


class FormatError(DataError):
    """A file does not follow its declared binary or CSV layout."""


class NumericalError(EchoCoTrError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""
