"""Exception types raised across the toolkit."""


class DimapError(Exception):
    """Base class for user-facing errors (CLI exit code 1)."""


class MalformedHeader(DimapError):
    pass


class OffsetError(DimapError):
    pass


class UnsupportedDtype(DimapError):
    pass


class NonFiniteValue(DimapError, ValueError):
    pass


class DuplicateName(DimapError):
    pass


class InvalidConfig(DimapError, ValueError):
    pass


class UnclassifiedTensor(DimapError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class EmptyModule(DimapError):
    pass


class RatioOutOfRange(DimapError, ValueError):
    pass


class ShapeMismatch(DimapError, ValueError):
    pass


class UnknownTensor(DimapError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class UnknownPreset(DimapError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class TooLarge(DimapError, ValueError):
    pass


class DimMismatch(DimapError, ValueError):
    pass


class BoundViolated(AssertionError):
    """The pruning distortion bound failed; this is a bug, never user error."""
