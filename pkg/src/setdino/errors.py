"""Exception hierarchy. Each class maps to one CLI exit code."""


class SetDinoError(Exception):
    exit_code = 1


class ConfigError(SetDinoError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(SetDinoError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    pass


class LookupFailure(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingControlsError(DataError):
    """A batch lacks the NTC cells (or NTC variance) a normalization needs."""


class MisuseError(DataError, ValueError):
    pass


class InfeasibleSamplingError(DataError):
    pass


class UndefinedMetricError(DataError, ValueError):
    pass


class NumericError(SetDinoError, FloatingPointError):
    exit_code = 4


class StorageError(SetDinoError, OSError):
    exit_code = 5
