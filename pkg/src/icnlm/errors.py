"""Exception hierarchy shared by all icnlm modules."""


class ICNLMError(Exception):
    """Base class for every error raised by icnlm."""


class ValidationError(ICNLMError, ValueError):
    """Input violates a documented precondition."""


class InferenceError(ICNLMError, RuntimeError):
    """Posterior inference could not complete."""


class StorageError(ICNLMError):
    """A persisted artifact could not be read back."""


# marginal
class DegenerateSample(ValidationError):
    pass


class EmptySample(DegenerateSample):
    # fewer than two observations is also a degenerate sample
    pass


class NonPositiveBandwidth(ValidationError):
    pass


class ProbabilityOutOfRange(ValidationError):
    pass


# copula_model / vi / predictive
class SpecMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class SingularCovariance(ValidationError):
    pass


# hmc / vi
class NonFiniteTrajectory(InferenceError):
    pass


class AdaptationFailure(InferenceError):
    pass


class NonFiniteElbo(InferenceError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# diagnostics
class PitOutOfRange(ValidationError):
    pass


class MalformedInterval(ValidationError):
    pass


# data_io
class ParseError(ValidationError):
    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ShapeError(ValidationError):
    pass


class NonFiniteValue(ParseError):
    pass


class ZeroColumn(ValidationError):
    pass


class VersionMismatch(StorageError):
    pass


class ChecksumMismatch(StorageError):
    pass
