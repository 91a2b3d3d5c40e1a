"""Time sources: the system monotonic clock and a virtual clock for tests."""

from __future__ import annotations

import time
from typing import Callable, Protocol


class Clock(Protocol):
    epoch_offset_ns: int

    def monotonic_ns(self) -> int: ...


class SystemClock:
    """CLOCK_MONOTONIC, with the offset to Unix time sampled once at creation."""

    def __init__(self) -> None:
        self.epoch_offset_ns = time.time_ns() - time.monotonic_ns()

    def monotonic_ns(self) -> int:
        return time.monotonic_ns()


class VirtualClock:
    """Manually advanced clock. Listeners run after every advance."""

    def __init__(self, start_ns: int = 0, epoch_offset_ns: int = 1_700_000_000 * 10**9) -> None:
        self._now = start_ns
        self.epoch_offset_ns = epoch_offset_ns
        self._listeners: list[Callable[[int], None]] = []

    def monotonic_ns(self) -> int:
        return self._now

    def subscribe(self, listener: Callable[[int], None]) -> None:
        self._listeners.append(listener)
        listener(self._now)

    def advance_to(self, t_ns: int) -> None:
        if t_ns < self._now:
            raise ValueError(f"virtual clock cannot go back ({t_ns} < {self._now})")
        self._now = t_ns
        for listener in self._listeners:
            listener(t_ns)

    def advance(self, dt_ns: int) -> None:
        self.advance_to(self._now + dt_ns)
