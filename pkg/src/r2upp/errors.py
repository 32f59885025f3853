"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class R2UppError(Exception):
    exit_code = 1


class ConfigError(R2UppError, ValueError):
    exit_code = 2


class DataError(R2UppError, ValueError):
    exit_code = 3


class ShapeError(R2UppError, ValueError):
    exit_code = 4


class CheckpointError(R2UppError):
    exit_code = 5
