"""Typed exceptions raised by the toolkit.

``DataError`` subclasses mean the input data was malformed or unusable (CLI
exit code 3); ``ConfigError`` subclasses mean the request itself was invalid
(exit code 2).
"""


class RecalibError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class DataError(RecalibError):
    pass


class ConfigError(RecalibError):
    pass


class InvariantViolation(RecalibError):
    pass


# calibration text
class MissingKey(DataError):
    def __init__(self, name):
        super().__init__(f"missing calibration key {name!r}")
        self.name = name


class MalformedNumber(DataError):
    def __init__(self, line, column, token=None):
        super().__init__(f"malformed number {token!r} at line {line}, column {column}")
        self.line = line
        self.column = column


class WrongArity(DataError):
    def __init__(self, key, expected, got):
        super().__init__(f"{key}: expected {expected} values, got {got}")
        self.key = key
        self.expected = expected
        self.got = got


class NotARotation(DataError):
    pass


class NotDecomposable(DataError):
    def __init__(self, residual):
        super().__init__(f"extrinsic rotation block is {residual:.3g} from the nearest rotation")
        self.residual = residual


# binary readers
class TruncatedFile(DataError):
    def __init__(self, byte_count):
        super().__init__(f"{byte_count} bytes is not a whole number of 16-byte records")
        self.byte_count = byte_count


class CountMismatch(DataError):
    def __init__(self, expected, got):
        super().__init__(f"expected {expected} labels, got {got}")
        self.expected = expected
        self.got = got


class BadMagic(DataError):
    pass


class BadHeader(DataError):
    pass


class TruncatedPixels(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class LengthMismatch(DataError):
    pass


# losses / search
class EmptyLabelClass(DataError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has projected points but no label points")
        self.class_id = class_id


class FormMismatch(ConfigError):
    pass


class NoInterestedPoints(DataError):
    pass


class DegenerateMask(DataError):
    pass


class BadRange(ConfigError):
    pass


class BadGrid(ConfigError):
    pass


# command line inputs
class SchemaError(DataError):
    """A JSON input is unparsable or lacks required fields."""

    def __init__(self, message, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class MissingInput(DataError):
    pass
