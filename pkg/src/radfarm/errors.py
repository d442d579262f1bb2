"""Exception hierarchy shared across the package."""


class RadfarmError(Exception):
    """Base class for all package errors."""


class DomainError(RadfarmError):
    """Input outside an operation's documented domain."""


class ConfigError(RadfarmError):
    """Bad configuration (unknown key, invalid value, unsupported flag)."""


class DataError(RadfarmError):
    """Bad dataset or asset file contents."""


class StateError(RadfarmError):
    """Operation called in the wrong lifecycle state."""


class ConstructionError(RadfarmError):
    """Perfect-hash construction exhausted its retry budget."""

    def __init__(self, msg, attempted_sizes=None):
        super().__init__(msg)
        self.attempted_sizes = attempted_sizes or []


class TrainingError(RadfarmError):
    """Training diverged or produced non-finite values."""


class CapacityError(RadfarmError):
    """Scheduling demand exceeds farm capacity."""

    def __init__(self, msg, overflow=None):
        super().__init__(msg)
        self.overflow = overflow or []


class ProtocolError(RadfarmError):
    """Malformed or out-of-contract wire message."""


class DecodeError(ProtocolError):
    """Payload decode failure; carries the byte offset of the fault."""

    def __init__(self, msg, offset=0):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset
