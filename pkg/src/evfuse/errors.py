"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so each class carries one.
"""


class EvfuseError(Exception):
    exit_code = 1


class ConfigError(EvfuseError, ValueError):
    """Invalid configuration, schema violation, or shape/dimension mismatch."""

    exit_code = 2


class IntegrityError(EvfuseError):
    """Malformed or inconsistent data on disk or in a record."""

    exit_code = 3


class ParseError(IntegrityError, ValueError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class FormatError(IntegrityError, ValueError):
    pass


class VocabularyError(IntegrityError, ValueError):
    pass


class IncompatibleCheckpointError(ConfigError):
    pass


class NumericError(EvfuseError, FloatingPointError):
    exit_code = 4
