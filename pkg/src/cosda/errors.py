"""Exception hierarchy shared across the package."""


class CosdaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CosdaError, ValueError):
    pass


class DegenerateBatchError(CosdaError, ValueError):
    pass


class ConfigError(CosdaError, ValueError):
    pass


class DataError(CosdaError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(CosdaError, RuntimeError):
    pass


class ScheduleError(CosdaError, ValueError):
    pass


class DomainError(CosdaError, ValueError):
    """Argument outside the mathematical domain of a closed form."""


class HookContractError(CosdaError, ValueError):
    pass


class ProtocolError(CosdaError, ValueError):
    pass


class PreconditionError(CosdaError, ValueError):
    pass
