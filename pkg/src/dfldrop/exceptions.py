"""Exception hierarchy shared across the package."""


class DFLError(Exception):
    """Base class for all package errors."""


class ShapeError(DFLError, ValueError):
    pass


class NumericDomainError(DFLError, ArithmeticError):
    pass


class CapabilityError(DFLError, NotImplementedError):
    pass


class IngestionError(DFLError, ValueError):
    """CSV could not be parsed; message names the row/column."""


class PreconditionError(DFLError, ValueError):
    pass


class ConfigError(DFLError, ValueError):
    pass


class ProtocolError(DFLError, RuntimeError):
    pass


class StateError(DFLError, RuntimeError):
    pass


class DeadClientError(DFLError, PermissionError):
    """Raised when anything touches the private silo of a dropped client."""


class ReconstructionUnavailable(DFLError, RuntimeError):
    pass
