"""Exception types shared across the package."""


class CGInvError(Exception):
    pass


class InvalidParams(CGInvError, ValueError):
    pass


class CapExceeded(CGInvError):
    pass


class NonInvertibleGenerator(CGInvError, ValueError):
    pass


class DimensionMismatch(CGInvError, ValueError):
    pass


class NotASubgroup(CGInvError, ValueError):
    pass


class NotIdempotent(CGInvError, ValueError):
    pass


class FamilyTooLarge(CGInvError):
    pass


class MalformedInput(CGInvError, ValueError):
    pass


class ShapeMismatch(CGInvError, ValueError):
    pass


class OutOfVocabulary(CGInvError, ValueError):
    pass


class NormalityViolation(CGInvError):
    pass


class Diverged(CGInvError, FloatingPointError):
    pass


class ConfigError(CGInvError, ValueError):
    pass
