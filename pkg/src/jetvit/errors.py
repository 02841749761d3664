"""Exception taxonomy. Every raise in the package uses one of these."""


class JetvitError(Exception):
    """Base class for all package errors."""


class DimensionError(JetvitError):
    """Shapes or ranks that cannot be combined."""


class NumericError(JetvitError):
    """NaN/Inf where finite values are required, or a diverged computation."""


class ConfigError(JetvitError):
    """Invalid configuration value or combination."""


class StateError(JetvitError):
    """Operation invoked on an object in the wrong state (missing checkpoint, closed tape)."""


class FormatError(JetvitError):
    """Malformed serialized payload (bad magic, truncated file, unknown code)."""


class DataError(JetvitError):
    """Invalid data content (labels out of range, non-monotonic grid)."""


class ContractError(JetvitError):
    """Caller broke a documented precondition."""


class GuardError(JetvitError):
    """Refused to run: the request exceeds an explicit safety bound."""
