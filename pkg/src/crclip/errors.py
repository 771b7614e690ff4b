"""Exception hierarchy shared across the package."""


class CRClipError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CRClipError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CRClipError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(CRClipError, ValueError):
    """A model or run configuration is internally inconsistent."""


class InputError(CRClipError, ValueError):
    """Input data is malformed (bad indices, missing markers, ...)."""


class NonFiniteError(CRClipError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""
