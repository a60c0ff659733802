"""Wall-clock and accelerated clocks.

Every component that needs time takes a Clock so simulations can run
faster than real time while keeping all intervals and timestamps in
simulated seconds/nanoseconds.
"""

from __future__ import annotations

import time


class Clock:
    """Nanosecond clock. sleep() and timeouts are in simulated seconds."""

    timescale: float = 1.0

    def now_ns(self) -> int:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError

    def wall_seconds(self, sim_seconds: float) -> float:
        """Wall-clock duration corresponding to a simulated duration."""
        return sim_seconds / self.timescale


class SystemClock(Clock):
    def now_ns(self) -> int:
        return time.time_ns()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class ScaledClock(Clock):
    """Simulated time = epoch + timescale * elapsed wall time."""

    def __init__(self, timescale: float = 1.0, epoch_ns: int | None = None):
        if timescale <= 0:
            raise ValueError("timescale must be positive")
        self.timescale = float(timescale)
        self._wall0 = time.time_ns()
        self._epoch = time.time_ns() if epoch_ns is None else int(epoch_ns)

    def now_ns(self) -> int:
        return self._epoch + int((time.time_ns() - self._wall0) * self.timescale)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds / self.timescale)


class ManualClock(Clock):
    """Test clock advanced by hand; sleep() advances simulated time."""

    def __init__(self, start_ns: int = 0):
        self._now = int(start_ns)

    def now_ns(self) -> int:
        return self._now

    def sleep(self, seconds: float) -> None:
        self._now += int(seconds * 1e9)

    def advance(self, seconds: float) -> None:
        self._now += int(seconds * 1e9)
