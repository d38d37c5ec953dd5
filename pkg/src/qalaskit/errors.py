"""Exception hierarchy shared by all qalaskit modules.

CLI exit-code mapping: UsageError -> 2, ConfigError / FormatError /
ShapeError / DomainError -> 3, NumericError -> 4.
"""


class QalasError(Exception):
    """Base class for all toolkit errors."""


class UsageError(QalasError):
    """Bad command-line usage (unknown flag, missing required input)."""


class DomainError(QalasError):
    """A physical parameter is outside its valid domain."""


class ConfigError(QalasError):
    """A configuration is internally inconsistent or infeasible."""


class ShapeError(QalasError):
    """Array dimensions do not satisfy an operation's contract."""


class FormatError(QalasError):
    """A file or checkpoint is malformed, truncated, or incompatible."""


class NumericError(QalasError):
    """A numeric failure: singular steady state, degenerate variance, NaN loss."""
