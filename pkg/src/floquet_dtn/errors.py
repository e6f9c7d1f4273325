"""Exception hierarchy shared by all solver modules."""


class FloquetDtNError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteCoefficient(FloquetDtNError):
    pass


class StepUnderflow(FloquetDtNError):
    pass


class WeightNotPositive(FloquetDtNError):
    pass


class DegenerateMultiplier(FloquetDtNError):
    pass


class VectorModeRequested(FloquetDtNError):
    """A scalar evaluation was requested for a mode with a two-dimensional
    solution space (W = I or W = -I)."""


class NearZeroDenominator(FloquetDtNError):
    def __init__(self, n, x2, message=None):
        self.n = n
        self.x2 = x2
        super().__init__(message or f"mode n={n} nearly vanishes at x2={x2}")


class AssumptionAViolated(FloquetDtNError):
    def __init__(self, indices, message=None):
        self.indices = list(indices)
        super().__init__(
            message
            or f"modes {self.indices} have W = +-I; the DtN map is undefined"
        )


class IndexMismatch(FloquetDtNError):
    pass


class SplitIndexTooSmall(FloquetDtNError):
    def __init__(self, smallest, message=None):
        self.smallest = smallest
        super().__init__(
            message or f"split index too small; smallest admissible is {smallest}"
        )


class BadGeometry(FloquetDtNError):
    pass


class BadResolution(FloquetDtNError):
    pass


class OperatorHeightMismatch(FloquetDtNError):
    pass


class SingularAssembly(FloquetDtNError):
    pass


class SingularMatrix(FloquetDtNError):
    def __init__(self, k, message=None):
        self.k = k
        super().__init__(
            message or f"system matrix is singular at k={k} (possible exceptional wavenumber)"
        )


class SingularBVP(FloquetDtNError):
    pass


class ObservableUndefined(FloquetDtNError):
    pass


class HypothesisViolated(FloquetDtNError):
    pass


class ParseError(FloquetDtNError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class ValidationError(FloquetDtNError):
    def __init__(self, field, message, line=None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{field}: {message}{where}")
