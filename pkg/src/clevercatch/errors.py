"""Exception types shared across the pipeline."""


class CleverCatchError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CleverCatchError):
    """Operands with incompatible shapes; nothing broadcasts silently."""


class ContractError(CleverCatchError):
    """A call violated an interface contract (stale cache, uninitialized state)."""


class NumericError(CleverCatchError):
    """Non-finite values or degenerate arithmetic encountered mid-computation."""


class ParseError(CleverCatchError):
    """Malformed input file; message carries the offending line where known."""


class ValidationError(CleverCatchError):
    """Well-formed input that violates a documented precondition."""


class ConfigError(CleverCatchError):
    """Unknown or ill-typed run configuration key."""


class FingerprintMismatch(CleverCatchError):
    """Artifacts bound to different rule sets were combined."""


class UndefinedMetricError(CleverCatchError):
    """A metric was requested on an input where it is undefined."""
