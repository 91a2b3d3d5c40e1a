"""Counter sources: the uniform surface the polling loop reads from."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, Union

from .domains import DomainId, MechanismKind


@dataclass
class Channel:
    """One readable counter with everything needed to correct and convert it."""

    domain: DomainId
    mechanism: MechanismKind
    wrap_constant: int
    unit_joules: float
    read: Callable[[], int] | None = None


@dataclass(frozen=True)
class Reading:
    """Raw values for every channel at one instant, in channel order.

    A value may be an exception instance when that channel's read failed.
    """

    timestamp_ns: int
    values: tuple[Union[int, Exception], ...]


class CounterSource(Protocol):
    channels: Sequence[Channel]

    def poll(self, now_ns: int) -> list[Reading]:
        """Return the readings available at ``now_ns`` (usually exactly one)."""
        ...

    def close(self) -> None:
        ...


class DirectSource:
    """Reads every channel synchronously on each poll."""

    def __init__(self, channels: Sequence[Channel],
                 on_close: Callable[[], None] | None = None) -> None:
        if not channels:
            raise ValueError("a source needs at least one channel")
        self.channels = list(channels)
        self._readers = [c.read for c in self.channels]
        self._on_close = on_close

    def poll(self, now_ns: int) -> list[Reading]:
        values: list[int | Exception] = []
        for read in self._readers:
            try:
                values.append(read())
            except Exception as exc:  # noqa: BLE001 - surfaced as an invalid sample
                values.append(exc)
        return [Reading(now_ns, tuple(values))]

    def close(self) -> None:
        if self._on_close is not None:
            self._on_close()
            self._on_close = None
