"""Exception types shared across the package."""


class EdgePipeError(Exception):
    """Base class for all errors raised by edgepipe."""


class ShapeMismatch(EdgePipeError, ValueError):
    pass


class LabelOutOfRange(EdgePipeError, ValueError):
    pass


class NotScalar(EdgePipeError, ValueError):
    pass


class GraphAlreadyConsumed(EdgePipeError, RuntimeError):
    pass


class InvalidPlan(EdgePipeError, ValueError):
    pass


class UnknownLane(EdgePipeError, KeyError):
    pass


class DuplicateLaneId(EdgePipeError, ValueError):
    pass


class EmptyLaneSet(EdgePipeError, ValueError):
    pass


class LaneFailure(EdgePipeError, RuntimeError):
    pass


class IncompleteTable(EdgePipeError, ValueError):
    pass


class TooLarge(EdgePipeError, ValueError):
    pass


class TooFewBlocks(EdgePipeError, ValueError):
    pass


class InvalidConfig(EdgePipeError, ValueError):
    pass


class StashMiss(EdgePipeError, RuntimeError):
    """Backward requested for a batch with no stashed weights."""


class TransportError(EdgePipeError):
    pass


class TransportClosed(TransportError):
    pass


class Timeout(TransportError):
    pass


class CrcMismatch(TransportError):
    pass


class ProtocolError(TransportError):
    """Malformed frame: bad magic, unknown message type, truncated body."""


class Oversize(TransportError, ValueError):
    pass
