"""Exception hierarchy shared by all qpf modules."""


class QPFError(Exception):
    """Base class for every error raised by qpf."""


class NotHermitian(QPFError, ValueError):
    pass


class NotPSD(QPFError, ValueError):
    pass


class NotNormalized(QPFError, ValueError):
    """A density operator whose trace differs from one."""


class DimensionMismatch(QPFError, ValueError):
    pass


class VanishingTrace(QPFError, ArithmeticError):
    """Raised when a partial map sends a state to (numerically) zero trace."""


class OutcomeOutOfRange(QPFError, ValueError):
    pass


class NonPositiveDt(QPFError, ValueError):
    pass


class InvalidParameter(QPFError, ValueError):
    pass


class InvalidConfiguration(QPFError, ValueError):
    pass


class UnknownInitialState(QPFError, KeyError):
    pass


class NonScalarParameter(QPFError, TypeError):
    pass


class UnknownSuite(QPFError, ValueError):
    pass


class FormatError(QPFError, ValueError):
    """Bad magic, unsupported version or inconsistent header."""


class MalformedRecord(QPFError, ValueError):
    """A record is truncated or inconsistent; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
