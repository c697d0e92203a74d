"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes:
``DataError``/``ConfigError`` -> 1, ``DomainError`` -> 2, ``InvariantError`` -> 3.
"""


class QuantError(Exception):
    """Base class for all errors raised by quantpipe."""


class DataError(QuantError):
    """Bad or insufficient input data."""


class ConfigError(QuantError):
    """Invalid configuration or parameters."""


class DomainError(QuantError):
    """A well-formed request that has no valid answer (cycle, infeasible QP, ...)."""


class InvariantError(QuantError):
    """An internal post-condition check failed."""


# -- panel -----------------------------------------------------------------

class PanelParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateRecordError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class FieldNotFoundError(DataError):
    pass


class AlignmentError(DataError):
    pass


# -- dsl -------------------------------------------------------------------

class DslError(DataError):
    """Expression error carrying the byte offset of the offending token."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class LexError(DslError):
    pass


class ExprSyntaxError(DslError):
    pass


class ArityError(DslError):
    pass


class UnknownOperatorError(DslError):
    pass


class WindowError(DslError):
    pass


class ParameterError(DslError):
    pass


class DepthExceededError(DslError):
    pass


# -- metrics / combiner / portfolio ---------------------------------------

class DegenerateVarianceError(DomainError):
    pass


class EstimationError(DataError):
    pass


class FitError(DataError):
    pass


class InfeasibleError(DomainError):
    def __init__(self, message, family=None):
        self.family = family
        super().__init__(message)


# -- factor base -----------------------------------------------------------

class CycleError(DomainError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(map(str, self.cycle)))


class DuplicateFactorError(DomainError):
    pass


class UnresolvedDependencyError(DomainError):
    pass


class IntegrityError(DataError):
    pass


class CorruptRecordError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
