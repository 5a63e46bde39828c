"""Exception hierarchy. Every domain failure derives from ``SP4DError`` so the
CLI can map it to exit code 1."""


class SP4DError(Exception):
    pass


class FormatError(SP4DError, ValueError):
    """Malformed file contents."""


class ShapeError(SP4DError, ValueError):
    pass


class DomainError(SP4DError, ValueError):
    """Input outside the operation's domain."""


class CollisionError(SP4DError, ValueError):
    pass


class DegenerateError(SP4DError, RuntimeError):
    """The operation produced no usable result (e.g. zero clusters)."""


class ConfigError(SP4DError, ValueError):
    pass


class TrainingError(SP4DError, RuntimeError):
    pass
