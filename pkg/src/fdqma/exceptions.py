"""Exception and warning classes raised across the package."""


class FdqmaError(Exception):
    """Base class for all package errors."""


class DegenerateDesign(FdqmaError):
    """Local-linear normal equations are singular, or too little data to smooth."""


class SingularSystem(FdqmaError):
    """The PACE covariance system could not be solved even after regularization."""


class LpFailure(FdqmaError):
    """The linear-programming solver did not reach an optimal solution."""


class DimensionMismatch(FdqmaError, ValueError):
    """Array lengths that must agree do not."""


class EmptyTestSet(FdqmaError, ValueError):
    pass


class NoFeasibleCandidate(FdqmaError, ValueError):
    """Every candidate needs more parameters than the CV folds can support."""


class SeriesTooShort(FdqmaError, ValueError):
    pass


class ParseError(FdqmaError, ValueError):
    """Malformed input file. ``line`` is the 1-based line number, if known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonPositivePrice(ParseError):
    pass


class InsufficientData(FdqmaError):
    pass


class RankDeficient(UserWarning):
    """Score columns are collinear; the LP solution is returned anyway."""


class PerfectFit(UserWarning):
    """In-sample check loss is zero, so log-loss criteria are -inf."""


class NoFeasibleJ(UserWarning):
    """FVE threshold not reached inside the allowed truncation range."""


class CandidateInfeasible(UserWarning):
    """A candidate has more parameters than a CV fold can support; it was dropped."""
