"""Exception hierarchy shared across the package."""


class MoESimVAEError(Exception):
    """Base class for all package errors."""


class DimensionError(MoESimVAEError, ValueError):
    pass


class DomainError(MoESimVAEError, ValueError):
    pass


class ParameterError(MoESimVAEError, ValueError):
    pass


class TapeError(MoESimVAEError, RuntimeError):
    pass


class OptimizerError(MoESimVAEError, RuntimeError):
    pass


class RoutingError(MoESimVAEError, IndexError):
    pass


class InputError(MoESimVAEError, ValueError):
    pass


class DataError(MoESimVAEError, ValueError):
    pass


class FormatError(DataError):
    pass


class ConfigError(MoESimVAEError, ValueError):
    pass


class IncompatibleCheckpointError(MoESimVAEError, ValueError):
    pass


class TrainingError(MoESimVAEError, RuntimeError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
