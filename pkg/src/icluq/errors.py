"""Exception hierarchy shared across the package."""


class IcluqError(Exception):
    """Base class for every error raised by icluq."""


class ValidationError(IcluqError, ValueError):
    """Input violates a documented precondition."""


class UpstreamError(IcluqError, RuntimeError):
    """A generation source (endpoint, trace, simulator) failed."""


# numeric core
class NotADistribution(ValidationError):
    pass


class AllZeroMass(ValidationError):
    pass


class DegenerateGrid(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


# answer extraction
class Unparseable(ValidationError):
    """No token in the sequence names a label of the label space."""


# prompting / datasets
class MalformedRecord(ValidationError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class UnknownLabel(ValidationError):
    pass


class NotEnoughInstances(ValidationError):
    pass


class ClassUnderrepresented(ValidationError):
    def __init__(self, label_id, label_name, available, required):
        super().__init__(
            f"class {label_id} ({label_name}) has {available} train instances, "
            f"{required} required"
        )
        self.label_id = label_id
        self.label_name = label_name


# gateway / traces
class EndpointUnreachable(UpstreamError):
    pass


class LogprobsUnsupported(UpstreamError):
    pass


class TruncatedResponse(UpstreamError):
    pass


class StorageFailure(UpstreamError):
    pass


class TraceMiss(UpstreamError):
    def __init__(self, fingerprint):
        super().__init__(f"no trace record for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


class TraceSchemaError(UpstreamError):
    pass


# baselines
class EmptySequence(ValidationError):
    pass


class MissingAlternatives(ValidationError):
    pass


# metrics / protocols
class SingleClass(ValidationError):
    pass


class NoPositives(ValidationError):
    pass


class AllLabelsMasked(ValidationError):
    pass
