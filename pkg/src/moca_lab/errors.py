"""Exception types raised across moca_lab."""


class MocaLabError(Exception):
    """Base class for all library errors."""


class DegenerateVector(MocaLabError, ValueError):
    """A vector that must be normalized has (near) zero norm."""


class DegenerateDeviation(DegenerateVector):
    """A class-conditional batch deviation vanished (e.g. single-example class)."""


class ShapeMismatch(MocaLabError, ValueError):
    pass


class StaleCache(MocaLabError, ValueError):
    """A forward cache does not match the parameters or gradient it is used with."""


class ConfigError(MocaLabError, ValueError):
    pass


class NumericalOverflow(MocaLabError, ArithmeticError):
    pass


class SamplerExhausted(MocaLabError, RuntimeError):
    """Rejection sampler hit its proposal cap."""


class IdxError(MocaLabError, ValueError):
    """Base class for IDX parse failures."""


class BadMagic(IdxError):
    pass


class TruncatedPayload(IdxError):
    pass


class SizeOverflow(IdxError):
    pass


class LabelOutOfRange(MocaLabError, ValueError):
    pass


class SchemaMismatch(MocaLabError, ValueError):
    pass
