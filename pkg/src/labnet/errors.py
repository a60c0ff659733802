"""Exception types shared across the stack."""


class LabnetError(Exception):
    """Base class for all labnet errors."""


class ParseError(LabnetError):
    """Malformed wire input. Carries the byte offset (column) of the failure."""

    def __init__(self, reason: str, offset: int):
        super().__init__(f"offset {offset}: {reason}")
        self.reason = reason
        self.offset = offset

    @property
    def column(self) -> int:
        return self.offset


class InvalidIdentifier(LabnetError):
    """Room/device/measurement identifier outside the allowed charset."""


class OversizePayload(LabnetError):
    """Encoded node payload would not fit in a single datagram."""


class MissingTimestamp(LabnetError):
    """Operation requires a stamped point."""


class ValidationError(LabnetError):
    """Value-level invariant violation (bad point, bad rule, bad config)."""


class DiskFull(LabnetError):
    """Storage device out of space."""


class IoError(LabnetError):
    """Storage file damaged or unreadable."""


class StorageUnavailable(LabnetError):
    """Write sink is down; caller should queue and retry."""


class UnknownCouplingSource(LabnetError):
    """Coupled sensor references a scenario signal that does not exist."""


class CyclicCoupling(LabnetError):
    """Scenario coupling graph contains a cycle."""


class NoOverlap(LabnetError):
    """Input series share no common time range."""


class SingletonSeries(LabnetError):
    """Series has fewer than two points; cannot interpolate."""


class ZeroVariance(LabnetError):
    """Constant input where a correlation is requested."""

    def __init__(self, name: str = ""):
        super().__init__(f"zero variance{': ' + name if name else ''}")
        self.name = name


class TooShort(LabnetError):
    """Input vector shorter than the method requires."""


class InsufficientData(LabnetError):
    """Not enough samples in the window."""
