"""Exception hierarchy shared by every artikit module."""


class ArtikitError(Exception):
    """Base class for all library errors."""


class ParameterError(ArtikitError, ValueError):
    pass


class RangeError(ParameterError):
    """A normalized quantity fell outside its allowed interval."""


class ShapeError(ArtikitError, ValueError):
    pass


class StructuralError(ArtikitError, ValueError):
    """Kinematic tree / graph structure is broken (cycles, missing root, ...)."""


class GeometryError(ArtikitError, ValueError):
    pass


class MeshLookupError(ArtikitError, KeyError):
    pass


class ParseError(ArtikitError, ValueError):
    """Malformed input. ``path`` is a field path, ``offset`` a byte offset, when known."""

    def __init__(self, message, *, path=None, offset=None, payload=None, line=None):
        super().__init__(message)
        self.path = path
        self.offset = offset
        self.payload = payload
        self.line = line


class FormatError(ParseError):
    """Binary/versioned file format mismatch."""


class ProviderError(ArtikitError):
    """Structure-prior backend failed."""


class TransportError(ProviderError, OSError):
    """Network-level failure talking to a provider; safe to retry."""


class TrainingError(ArtikitError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
