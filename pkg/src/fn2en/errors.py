"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line maps it to.
"""


class FN2ENError(Exception):
    exit_code = 1


class ConfigError(FN2ENError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor extents do not agree with what an op or layer expects."""


class ContractError(FN2ENError, RuntimeError):
    """An API precondition was violated by the caller."""

    exit_code = 2


class DataError(FN2ENError, ValueError):
    exit_code = 3

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class FormatError(DataError):
    """A binary file (checkpoint or FNIM image) is malformed."""


class NumericError(FN2ENError, ArithmeticError):
    exit_code = 4


class UnknownTapError(ConfigError, LookupError):
    """A requested activation tap does not name a layer of the network."""
