"""Exception hierarchy shared across the package."""


class KsoftmaxError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(KsoftmaxError):
    """Vector or matrix shapes do not agree."""


class HpbOutsideBall(KsoftmaxError):
    """A vector fed to the hyperbolic kernel has norm >= 1."""


class NonFiniteScore(KsoftmaxError):
    """A kernel score overflowed or otherwise became non-finite."""


class WrongKernelKind(KsoftmaxError):
    """Operation invoked with a kernel kind it does not support."""


class TargetOutOfRange(KsoftmaxError):
    """A target token id falls outside [0, V)."""


class TokenOutOfRange(KsoftmaxError):
    """A token id falls outside [0, V)."""


class EmptyCorpus(KsoftmaxError):
    """No usable lines were found when building a vocabulary."""


class DivergenceDetected(KsoftmaxError):
    """Training hit a non-finite loss or gradient.

    Carries the global step at which it happened and, when known, the
    mixture component that produced the non-finite value.
    """

    def __init__(self, message, step=None, component=None):
        super().__init__(message)
        self.step = step
        self.component = component
