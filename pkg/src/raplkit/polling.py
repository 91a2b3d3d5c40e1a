"""Drift-free polling loop.

Deadlines are absolute, ``origin + k * period``, so per-tick processing time
never accumulates into drift. On Linux the loop sleeps on a periodic timerfd
armed with an absolute first expiry; the expiration count it returns tells how
many deadlines passed, and every deadline beyond the first is a missed tick.

The loop never touches files. Samples go into a bounded in-memory queue that a
writer thread drains into the CSV output, flushing once per flush interval.
"""

from __future__ import annotations

import ctypes
import logging
import os
import statistics
import struct
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

from .clock import Clock, SystemClock, VirtualClock
from .correction import CounterState, CorruptedCounterError, EnergySample, correct_delta, first_wrap_seconds
from .domains import DomainId, MechanismKind
from .errors import UsageError
from .output import write_csv
from .source import CounterSource

LOGGER = logging.getLogger(__name__)

MAX_FREQUENCY_HZ = 1000.0
MAX_PLAUSIBLE_WATTS = 400.0
GIL_SWITCH_INTERVAL_S = 0.0002


@dataclass(frozen=True)
class PollingConfig:
    frequency_hz: float
    domains: frozenset[DomainId]
    mechanism: MechanismKind
    output: Path
    flush_interval_s: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.frequency_hz <= MAX_FREQUENCY_HZ:
            raise UsageError(
                f"frequency must be in (0, {MAX_FREQUENCY_HZ:g}] Hz, got {self.frequency_hz}"
            )
        if not self.domains:
            raise UsageError("at least one domain is required")
        if self.flush_interval_s <= 0:
            raise UsageError("flush interval must be positive")

    @property
    def period_ns(self) -> int:
        return round(1e9 / self.frequency_hz)


def check_wrap_budget(period_s: float, channels, max_watts: float = MAX_PLAUSIBLE_WATTS) -> list[str]:
    """Warn about counters that could wrap twice between two polls."""
    warnings = []
    for ch in channels:
        wrap_s = first_wrap_seconds(ch.wrap_constant, ch.unit_joules, max_watts)
        if period_s >= wrap_s:
            msg = (f"{ch.domain} via {ch.mechanism.token}: polling every {period_s:g}s but the "
                   f"counter can wrap every {wrap_s:.3g}s at {max_watts:g} W")
            LOGGER.warning(msg)
            warnings.append(msg)
    return warnings


@dataclass
class TickSchedule:
    origin: int
    period_ns: int
    next_index: int = 1
    missed_ticks: int = 0

    def deadline(self, k: int) -> int:
        return self.origin + k * self.period_ns


# --- timers -----------------------------------------------------------------

class Timer(Protocol):
    def wait(self) -> int:
        """Block until the next deadline; return how many deadlines elapsed (>= 1)."""
        ...

    def close(self) -> None: ...


class _Timespec(ctypes.Structure):
    _fields_ = [("tv_sec", ctypes.c_long), ("tv_nsec", ctypes.c_long)]


class _Itimerspec(ctypes.Structure):
    _fields_ = [("it_interval", _Timespec), ("it_value", _Timespec)]


_CLOCK_MONOTONIC = 1
_TFD_CLOEXEC = 0o2000000
_TFD_TIMER_ABSTIME = 1


class TimerFd:
    """Periodic Linux timerfd on CLOCK_MONOTONIC, first expiry at an absolute time."""

    def __init__(self, schedule: TickSchedule) -> None:
        libc = ctypes.CDLL(None, use_errno=True)
        self._fd = libc.timerfd_create(_CLOCK_MONOTONIC, _TFD_CLOEXEC)
        if self._fd < 0:
            raise OSError(ctypes.get_errno(), "timerfd_create failed")
        first = schedule.deadline(schedule.next_index)
        spec = _Itimerspec(
            _Timespec(schedule.period_ns // 10**9, schedule.period_ns % 10**9),
            _Timespec(first // 10**9, first % 10**9),
        )
        if libc.timerfd_settime(self._fd, _TFD_TIMER_ABSTIME, ctypes.byref(spec), None) != 0:
            err = ctypes.get_errno()
            os.close(self._fd)
            raise OSError(err, "timerfd_settime failed")

    def wait(self) -> int:
        return struct.unpack("=Q", os.read(self._fd, 8))[0]

    def close(self) -> None:
        os.close(self._fd)


class SleepTimer:
    """Portable fallback: sleeps toward the absolute deadline and counts overruns."""

    def __init__(self, schedule: TickSchedule, clock: Clock) -> None:
        self.origin, self.period_ns = schedule.origin, schedule.period_ns
        self.clock = clock
        self._index = schedule.next_index - 1

    def wait(self) -> int:
        deadline = self.origin + (self._index + 1) * self.period_ns
        while (remaining := deadline - self.clock.monotonic_ns()) > 0:
            time.sleep(remaining / 1e9)
        reached = (self.clock.monotonic_ns() - self.origin) // self.period_ns
        n = reached - self._index
        self._index = reached
        return n

    def close(self) -> None:
        pass


class VirtualTimer:
    """Advances a virtual clock straight to the next deadline unless it is already past it."""

    def __init__(self, schedule: TickSchedule, clock: VirtualClock) -> None:
        self.schedule, self.clock = schedule, clock
        self._index = schedule.next_index - 1

    def wait(self) -> int:
        target = self.schedule.deadline(self._index + 1)
        if self.clock.monotonic_ns() < target:
            self.clock.advance_to(target)
        reached = (self.clock.monotonic_ns() - self.schedule.origin) // self.schedule.period_ns
        n = reached - self._index
        self._index = reached
        return n

    def close(self) -> None:
        pass


def make_timer(schedule: TickSchedule, clock: Clock) -> Timer:
    if isinstance(clock, VirtualClock):
        return VirtualTimer(schedule, clock)
    if sys.platform.startswith("linux") and isinstance(clock, SystemClock):
        try:
            return TimerFd(schedule)
        except (OSError, AttributeError) as exc:
            LOGGER.warning("timerfd unavailable (%s); using sleep-based deadlines", exc)
    return SleepTimer(schedule, clock)


# --- loop <-> writer queue ----------------------------------------------------

class BoundedQueue:
    """Single-producer single-consumer queue that drops the newest item when full."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise UsageError("queue capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self.dropped = 0

    def offer(self, item) -> bool:
        if len(self._items) >= self.capacity:
            self.dropped += 1
            return False
        self._items.append(item)
        return True

    def drain(self) -> list:
        out = []
        pop = self._items.popleft
        try:
            while True:
                out.append(pop())
        except IndexError:
            return out

    def __len__(self) -> int:
        return len(self._items)

    def stream(self, stop: threading.Event, idle_s: float = 0.01) -> Iterator:
        """Yield queued items until ``stop`` is set and the queue is empty.

        Yields ``None`` after each idle wait so consumers can do periodic work.
        """
        while True:
            items = self.drain()
            yield from items
            if not items:
                if stop.is_set() and not self._items:
                    return
                yield None
                stop.wait(idle_s)


class ListSink:
    """Unbounded sink collecting samples in memory."""

    def __init__(self) -> None:
        self.samples: list[EnergySample] = []
        self.dropped = 0

    def offer(self, item: EnergySample) -> bool:
        self.samples.append(item)
        return True


# --- the loop ------------------------------------------------------------------

@dataclass
class RunSummary:
    ticks: int = 0
    missed_ticks: int = 0
    samples: int = 0
    invalid_samples: int = 0
    dropped_samples: int = 0
    duration_s: float = 0.0
    overflows: dict[DomainId, int] = field(default_factory=dict)


def run_polling(frequency_hz: float, source: CounterSource, sink, stop: threading.Event,
                clock: Clock | None = None, duration_s: float | None = None) -> RunSummary:
    """Poll ``source`` at ``frequency_hz`` until ``stop`` is set or ``duration_s`` elapses.

    The first reading primes the correction state and emits nothing. Every
    later reading becomes one :class:`EnergySample` per channel, offered to
    ``sink`` without ever blocking.
    """
    if not 0 < frequency_hz <= MAX_FREQUENCY_HZ:
        raise UsageError(f"frequency must be in (0, {MAX_FREQUENCY_HZ:g}] Hz")
    clock = clock or SystemClock()
    channels = list(source.channels)
    states = [CounterState(c.wrap_constant, c.unit_joules) for c in channels]
    summary = RunSummary()
    if stop.is_set():
        return summary

    period_ns = round(1e9 / frequency_hz)
    last_index = None if duration_s is None else int(round(duration_s * 1e9) // period_ns)
    origin = clock.monotonic_ns()
    schedule = TickSchedule(origin, period_ns)
    offer = sink.offer

    def consume(readings) -> None:
        for reading in readings:
            ts = reading.timestamp_ns
            for ch, state, value in zip(channels, states, reading.values):
                if isinstance(value, Exception):
                    sample = EnergySample(ts, ch.domain, ch.mechanism, 0.0, False, valid=False)
                elif not state.initialized:
                    try:
                        state.prime(value)
                    except CorruptedCounterError:
                        pass
                    continue
                else:
                    try:
                        delta, wrapped = correct_delta(state, value)
                    except CorruptedCounterError:
                        sample = EnergySample(ts, ch.domain, ch.mechanism, 0.0, False, valid=False)
                    else:
                        sample = EnergySample(ts, ch.domain, ch.mechanism,
                                              delta * ch.unit_joules, wrapped)
                if not sample.valid:
                    summary.invalid_samples += 1
                if offer(sample):
                    summary.samples += 1
                else:
                    summary.dropped_samples += 1

    consume(source.poll(origin))
    timer = make_timer(schedule, clock)
    try:
        while not stop.is_set():
            if last_index is not None and schedule.next_index > last_index:
                break
            elapsed = timer.wait()
            if stop.is_set():
                break
            if elapsed > 1:
                # Service only the latest passed deadline; the others are missed.
                target = schedule.next_index + elapsed - 1
                if last_index is not None:
                    target = min(target, last_index)
                schedule.missed_ticks += target - schedule.next_index
                schedule.next_index = target
            consume(source.poll(clock.monotonic_ns()))
            summary.ticks += 1
            schedule.next_index += 1
    finally:
        timer.close()
    summary.missed_ticks = schedule.missed_ticks
    summary.duration_s = (clock.monotonic_ns() - origin) / 1e9
    summary.overflows = {c.domain: s.overflow_count for c, s in zip(channels, states)}
    return summary


def measure(config: PollingConfig, source: CounterSource, clock: Clock | None = None,
            duration_s: float | None = None, stop: threading.Event | None = None,
            loop_frequency_hz: float | None = None,
            samples_per_second: float | None = None) -> RunSummary:
    """Run the loop in this thread and a CSV writer thread until stopped.

    ``loop_frequency_hz`` overrides how often the source is polled (the eBPF
    source is drained more slowly than its sampler runs); ``samples_per_second``
    sizes the queue when it differs from ``frequency x channels``.

    Raises:
        OSError: if the writer fails; the queue is drained first.
    """
    clock = clock or SystemClock()
    stop = stop or threading.Event()
    loop_hz = loop_frequency_hz or config.frequency_hz
    rate = samples_per_second or config.frequency_hz * len(source.channels)
    queue = BoundedQueue(max(16, int(2 * rate * config.flush_interval_s)))
    check_wrap_budget(1.0 / config.frequency_hz, source.channels)

    writer_done = threading.Event()
    errors: list[BaseException] = []

    def writer() -> None:
        try:
            write_csv(queue.stream(writer_done), config.output, config.flush_interval_s,
                      clock.epoch_offset_ns)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors.append(exc)
            stop.set()

    thread = threading.Thread(target=writer, name="csv-writer", daemon=True)
    # The writer must not hold the interpreter lock across a whole tick.
    switch = sys.getswitchinterval()
    sys.setswitchinterval(min(switch, GIL_SWITCH_INTERVAL_S))
    thread.start()
    try:
        summary = run_polling(loop_hz, source, queue, stop, clock, duration_s)
    finally:
        writer_done.set()
        thread.join()
        sys.setswitchinterval(switch)
    if errors:
        raise errors[0]
    return summary


def idle_run(config: PollingConfig | None, output: Path, duration_s: float | None,
             stop: threading.Event, clock: Clock | None = None) -> RunSummary:
    """The zero-frequency run: no measurement, header-only output."""
    clock = clock or SystemClock()
    write_csv((), output)
    start = clock.monotonic_ns()
    stop.wait(duration_s)
    return RunSummary(duration_s=(clock.monotonic_ns() - start) / 1e9)


def achieved_rate(timestamps_ns: Sequence[int], trim_edges: bool = True) -> tuple[float, float]:
    """Mean and sample standard deviation of measurements per wall-clock second.

    Seconds are epoch-aligned buckets; empty seconds inside the span count as 0.
    With ``trim_edges`` the first and last (usually partial) seconds are dropped.

    Raises:
        UsageError: with fewer than three distinct seconds of data.
    """
    if not timestamps_ns:
        raise UsageError("no timestamps")
    buckets: dict[int, int] = {}
    for ts in timestamps_ns:
        sec = ts // 1_000_000_000
        buckets[sec] = buckets.get(sec, 0) + 1
    first, last = min(buckets), max(buckets)
    if last - first + 1 < 3:
        raise UsageError("need at least three seconds of data")
    counts = [buckets.get(s, 0) for s in range(first, last + 1)]
    if trim_edges:
        counts = counts[1:-1]
    return rate_stats(counts)


def rate_stats(counts: Sequence[int]) -> tuple[float, float]:
    mean = statistics.fmean(counts)
    std = statistics.stdev(counts) if len(counts) > 1 else 0.0
    return mean, std
