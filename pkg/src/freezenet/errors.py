"""Exception taxonomy. The CLI maps these onto exit codes:
usage 2, data 3, codec 4, numeric failure 5."""


class DimensionError(ValueError):
    """Tensor shapes do not compose."""


class ParameterError(ValueError):
    """An argument violates a documented precondition."""


class StaleCacheError(RuntimeError):
    """Activation cache does not belong to the current parameter state."""


class DegenerateGradientError(RuntimeError):
    """Gradient is identically zero; curvature scores are undefined."""


class DataError(RuntimeError):
    """Dataset ingestion failed (bad magic, truncation, out-of-range labels)."""


class NumericError(RuntimeError):
    """Loss became NaN/Inf; the run is aborted rather than silently continued."""


class CodecError(RuntimeError):
    """Checkpoint bytes could not be decoded."""


class TruncatedError(CodecError):
    """Checkpoint ends before a section is complete."""


class ChecksumError(CodecError):
    """File-level CRC mismatch."""


class IntegrityError(CodecError):
    """Reconstructed parameters disagree with what was encoded (e.g. the
    stored seed no longer regenerates the frozen weights)."""
