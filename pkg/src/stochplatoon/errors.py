"""Exception hierarchy shared by every module."""


class PlatoonError(Exception):
    """Base class for all errors raised by stochplatoon."""


class EvaluationAtPole(PlatoonError):
    pass


class DegenerateLoop(PlatoonError):
    pass


class NotProper(PlatoonError):
    pass


class UnstableSystem(PlatoonError):
    pass


class AssumptionViolation(PlatoonError):
    """A plant/controller pair breaks a structural modelling assumption.

    ``item`` is the short label of the broken assumption (``"1a"`` for a
    closed loop that is not strictly proper, ``"1b"`` for missing double
    integral action).
    """

    def __init__(self, item: str, message: str):
        super().__init__(f"assumption {item}: {message}")
        self.item = item


class NotPSD(PlatoonError):
    pass


class NotMSS(PlatoonError):
    """The closed loop is not mean-square stable (spectral radius >= 1)."""


class NotStringStable(PlatoonError):
    pass


class NoFactorization(PlatoonError):
    pass


class IllConditioned(PlatoonError):
    pass


class CancellationFailure(PlatoonError):
    pass


class SlowConvergence(PlatoonError):
    pass


class HorizonTooShort(PlatoonError):
    pass


class ShapeMismatch(PlatoonError):
    pass


class ConfigError(PlatoonError):
    pass
