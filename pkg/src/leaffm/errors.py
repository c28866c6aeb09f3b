"""Exception hierarchy shared by every leaffm module."""


class LeafFMError(Exception):
    """Base class for all errors raised by leaffm."""


class ShapeError(LeafFMError, ValueError):
    pass


class ConfigError(LeafFMError, ValueError):
    pass


class ParseError(LeafFMError, ValueError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class LabelError(ParseError):
    pass


class ContractError(LeafFMError, RuntimeError):
    """A cache or state object was used with something it was not produced for."""


class NumericError(LeafFMError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FeatureLookupError(LeafFMError, IndexError):
    pass


class MetricUndefinedError(LeafFMError, ValueError):
    pass


class ModelFileError(LeafFMError, IOError):
    pass


class ChecksumError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


class DimensionError(ModelFileError):
    pass


class IntegrityError(LeafFMError, ValueError):
    pass
