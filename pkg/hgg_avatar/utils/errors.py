class HggError(Exception):
    """Base class for every error raised by hgg_avatar."""


class NonFiniteInput(HggError, ValueError):
    pass


class DimensionMismatch(HggError, ValueError):
    pass


class EmptyFrame(HggError, ValueError):
    pass


class EmptyVertexSet(HggError, ValueError):
    pass


class EmptySet(HggError, ValueError):
    pass


class CorruptContainer(HggError, ValueError):
    pass


class ConfigError(HggError, ValueError):
    pass


class NonFiniteGradient(HggError, ArithmeticError):
    pass


class Diverged(HggError, ArithmeticError):
    pass
