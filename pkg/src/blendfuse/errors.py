"""Exception classes.

Each class carries the CLI exit code used when it escapes a subcommand:
1 for usage/parameter problems, 2 for data problems, 3 for numeric failures.
"""


class BlendFuseError(Exception):
    exit_code = 1


class ParameterError(BlendFuseError, ValueError):
    """An argument or config value is outside its allowed range."""


class DimensionError(BlendFuseError, ValueError):
    """Array shapes do not agree."""


class StateError(BlendFuseError, RuntimeError):
    """Operation not valid in the object's current state."""


class ContractError(BlendFuseError, ValueError):
    """A caller violated an operation precondition."""


class DataError(BlendFuseError):
    exit_code = 2


class InputError(DataError, ValueError):
    """Missing or malformed input records."""


class FormatError(DataError):
    """A file on disk does not match the expected layout."""


class SplitError(DataError, ValueError):
    pass


class NumericError(BlendFuseError, ArithmeticError):
    exit_code = 3
