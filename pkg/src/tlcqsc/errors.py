class TlcQscError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(TlcQscError, ValueError):
    """Invalid configuration (bad thresholds, oversized delay set, ...)."""


class ProtocolError(TlcQscError):
    """A protocol operation was invoked out of order (double start, double propose)."""


class HarnessBug(TlcQscError):
    """An internal consistency check failed; impossible under fail-stop."""


class CausalGapError(HarnessBug):
    """A history query needed a record the store does not hold."""


class TraceFormatError(TlcQscError, ValueError):
    """A serialized trace could not be parsed."""
