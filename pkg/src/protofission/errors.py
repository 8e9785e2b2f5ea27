"""Exception types raised across the package.

Every error is a subclass of :class:`ProtoFissionError` so callers (and the
CLI) can catch the whole family. Config and data errors are split into their
own branches because the CLI maps them to distinct exit codes.
"""


class ProtoFissionError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ProtoFissionError):
    """Invalid configuration (bad field value, unknown key, missing field)."""


class DataError(ProtoFissionError):
    """Invalid or unreadable dataset input."""


class DegenerateNorm(ProtoFissionError):
    """A vector with norm below the safe floor entered normalization/cosine."""


class InvalidDistribution(ProtoFissionError):
    """A vector that should be a probability distribution is not one."""


class UnknownOp(ProtoFissionError):
    """Unrecognized primitive tag passed to the VJP dispatcher."""


class ShapeMismatch(ProtoFissionError):
    """Array shapes or lengths do not match the registered parameters."""


class BatchTooSmall(ProtoFissionError):
    """An operation needs more samples than the batch provides."""


class EmptyPartition(ProtoFissionError):
    """A required dataset partition has no samples."""


class RejectionExhausted(DataError):
    """Rejection sampling failed to satisfy a constraint within its budget."""


class BadMagic(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(DataError):
    """File ends before the payload promised by its header."""


class LabelOutOfRange(DataError):
    """A stored label falls outside the declared class range."""


class InsufficientSamples(DataError):
    """A split request asks for more samples than the dataset holds."""


class NonSquare(ProtoFissionError):
    """Assignment solver got a non-square cost matrix (pad it first)."""


class EmptySubset(ProtoFissionError):
    """A metric was asked to score an empty sample subset."""


class SingleClass(ProtoFissionError):
    """AUC needs both ID and OOD samples present."""


class GradMismatch(ProtoFissionError):
    """Analytic gradient disagrees with finite differences.

    Carries the offending parameter path and the relative error observed.
    """

    def __init__(self, param_path: str, rel_error: float):
        self.param_path = param_path
        self.rel_error = rel_error
        super().__init__(
            f"analytic gradient mismatch at {param_path}: rel error {rel_error:.3e}"
        )
