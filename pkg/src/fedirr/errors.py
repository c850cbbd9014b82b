"""Exception hierarchy shared across the package."""


class FedIrrError(Exception):
    """Base class for all package errors."""


class InvalidInput(FedIrrError, ValueError):
    pass


class DimensionMismatch(FedIrrError, ValueError):
    pass


class EmptyDataset(FedIrrError, ValueError):
    pass


class Diverged(FedIrrError, ArithmeticError):
    """Local training produced non-finite weights (learning rate too high)."""


class EmptyUpdateSet(FedIrrError, ValueError):
    pass


class RoundMismatch(FedIrrError, ValueError):
    pass


class ConfigError(FedIrrError, ValueError):
    """Configuration failed validation; message names the offending field."""


# -- wire protocol -----------------------------------------------------------

class ProtocolError(FedIrrError):
    pass


class EncodeError(ProtocolError, ValueError):
    pass


class MalformedPayload(ProtocolError, ValueError):
    pass


class UnknownType(ProtocolError, ValueError):
    pass


class SchemaViolation(ProtocolError, ValueError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class ConnectionClosed(ProtocolError, ConnectionError):
    """Peer closed the stream in the middle of a frame."""


class CleanClose(ConnectionClosed):
    """Peer closed the stream on a frame boundary."""


# -- server ------------------------------------------------------------------

class NoParticipants(FedIrrError):
    pass


class BindError(FedIrrError, OSError):
    pass


class CorruptCheckpoint(FedIrrError, ValueError):
    pass


class ServerUnreachable(FedIrrError, ConnectionError):
    pass
