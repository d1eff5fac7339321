"""Exception hierarchy shared across the harness.

Everything raised on purpose derives from :class:`HarnessError`, so callers
(and the CLI exit-code mapping) can distinguish "the input was bad" from a
genuine bug in this package.
"""

from __future__ import annotations


class HarnessError(Exception):
    """Base class for all errors raised deliberately by this package."""


class FormatError(HarnessError):
    """Stream does not carry the expected magic bytes or version."""


class CorruptStreamError(HarnessError):
    """Stream ended or became inconsistent mid-record.

    ``offset`` is the byte offset where the broken structure starts.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(HarnessError):
    """Frame contents disagree with the declared sensor table."""


class ConfigError(HarnessError):
    """Invalid campaign, perturbation, or predicate configuration."""


class EmptyTrajectoryError(HarnessError):
    """No ground-truth poses available where at least one is required."""


class NoOverlapError(HarnessError):
    """Two trajectories share no timestamps within the association gap."""


class InsufficientPairsError(HarnessError):
    """Fewer matched pose pairs than the operation needs."""


class DegenerateGeometryError(HarnessError):
    """Point configuration does not determine a unique rigid alignment."""


class MetricDomainError(HarnessError):
    """Input outside a metric's domain (too small, zero-length, too sparse)."""


class ProtocolError(HarnessError):
    """Wire-protocol violation. ``offset`` locates the first bad byte."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SpawnError(HarnessError):
    """Algorithm subprocess could not be started."""


class HandshakeError(HarnessError):
    """Algorithm did not complete the INIT/READY handshake."""


class InvalidPairsError(HarnessError):
    """Loop pairs that never form a loop closure even unperturbed."""

    def __init__(self, message: str, pairs: list[tuple[int, int]]):
        super().__init__(f"{message}: {pairs}")
        self.pairs = pairs
