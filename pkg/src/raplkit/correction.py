"""Overflow-corrected counter deltas and raw-to-joule conversion.

Every mechanism publishes a raw counter that eventually wraps. A delta between
two successive readings is corrected by adding a mechanism-specific constant
``C`` whenever the current reading is below the previous one. The readings must
be close enough in time that at most one wrap happened in between; nothing in
the hardware signals a wrap, so a slow poller silently loses energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .domains import DomainId, MechanismKind
from .errors import CorruptedCounterError, UsageError

U32_MAX = (1 << 32) - 1
U64_MAX = (1 << 64) - 1


@dataclass
class CounterState:
    """Correction state of one (domain, mechanism) counter.

    Owned by a single polling loop; not thread-safe.
    """

    wrap_constant: int
    unit_joules: float
    prev_raw: int = 0
    initialized: bool = False
    overflow_count: int = 0

    def __post_init__(self) -> None:
        if not self.unit_joules > 0:
            raise UsageError(f"unit must be positive, got {self.unit_joules}")
        if not 0 < self.wrap_constant <= U64_MAX:
            raise UsageError(f"wrap constant out of range: {self.wrap_constant}")

    def prime(self, raw: int) -> None:
        """Record the first reading. It yields no delta."""
        _check_range(raw, self.wrap_constant)
        self.prev_raw = raw
        self.initialized = True


@dataclass(frozen=True)
class EnergySample:
    timestamp_ns: int
    domain: DomainId
    mechanism: MechanismKind
    joules: float
    overflowed: bool = False
    valid: bool = True


def _check_range(raw: int, wrap_constant: int) -> None:
    if raw < 0 or raw > wrap_constant:
        raise CorruptedCounterError(
            f"raw value {raw} outside [0, {wrap_constant}]; wrong wrap constant?"
        )


def correct_delta(state: CounterState, current_raw: int) -> tuple[int, bool]:
    """Return ``(delta_raw, overflowed)`` and advance ``state`` to ``current_raw``.

    Raises:
        UsageError: if the state has not been primed with a first reading.
        CorruptedCounterError: if ``current_raw`` exceeds the wrap constant.
    """
    if not state.initialized:
        raise UsageError("counter state not initialized; call prime() first")
    _check_range(current_raw, state.wrap_constant)
    prev = state.prev_raw
    state.prev_raw = current_raw
    if current_raw < prev:
        state.overflow_count += 1
        # Reordered so the intermediate stays non-negative in fixed-width arithmetic.
        return state.wrap_constant - prev + current_raw, True
    return current_raw - prev, False


def wrap_constant_for(
    mechanism: MechanismKind,
    powercap_max: int | None = None,
    simulated: int | None = None,
) -> int:
    """Correction constant ``C`` for a mechanism.

    Powercap has no fixed width: its constant is the domain's
    ``max_energy_range_uj`` and must be supplied.
    """
    if mechanism is MechanismKind.POWERCAP:
        if powercap_max is None:
            raise UsageError("powercap needs the domain's max_energy_range_uj")
        return int(powercap_max)
    if powercap_max is not None:
        raise UsageError(f"powercap_max is meaningless for {mechanism.token}")
    if mechanism is MechanismKind.MSR:
        return U32_MAX
    if mechanism in (MechanismKind.PERF_USER, MechanismKind.PERF_EBPF):
        return U64_MAX
    if simulated is None:
        raise UsageError("simulated mechanism needs a configured wrap constant")
    return int(simulated)


def raw_to_joules(delta_raw: int, unit_joules: float) -> float:
    return delta_raw * unit_joules


def first_wrap_seconds(wrap_constant: int, unit_joules: float, max_watts: float) -> float:
    """Shortest time for a counter to wrap at ``max_watts``."""
    if max_watts <= 0:
        return math.inf
    return (wrap_constant + 1) * unit_joules / max_watts
