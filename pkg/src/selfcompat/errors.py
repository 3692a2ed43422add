"""Exception hierarchy shared by every module of the package."""


class SelfCompatError(Exception):
    """Base class for all errors raised by selfcompat."""


class ShapeError(SelfCompatError, ValueError):
    pass


class NonFiniteError(SelfCompatError, FloatingPointError):
    pass


class DomainError(SelfCompatError, ValueError):
    """An argument lies outside the domain of a function (e.g. digamma at x <= 0)."""


class ConfigError(SelfCompatError, ValueError):
    pass


class FormatError(SelfCompatError, ValueError):
    """A file could not be parsed.

    ``offset`` is a byte offset for binary formats and ``line`` a 1-based line
    number for text formats; either may be None.
    """

    def __init__(self, message, *, path=None, offset=None, line=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full)
        self.path = path
        self.offset = offset
        self.line = line


class CheckpointError(FormatError):
    pass


class NumericalAbort(SelfCompatError, FloatingPointError):
    """Training produced a non-finite loss; ``objective`` names the culprit."""

    def __init__(self, objective, step, detail=""):
        msg = f"non-finite value in objective {objective!r} at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.objective = objective
        self.step = step
