import math

import pytest
from hypothesis import given, strategies as st

from raplkit.correction import (U32_MAX, U64_MAX, CounterState, correct_delta, first_wrap_seconds,
                                raw_to_joules, wrap_constant_for)
from raplkit.domains import MechanismKind
from raplkit.errors import CorruptedCounterError, UsageError


def primed(c, prev, unit=1e-6):
    s = CounterState(c, unit)
    s.prime(prev)
    return s


@pytest.mark.parametrize("prev, cur, c, expected", [
    (100, 150, U32_MAX, (50, False)),
    (U32_MAX - 1, 5, U32_MAX, (6, True)),
    (U32_MAX - 3, 5, U32_MAX, (8, True)),
    (262_143_328_000, 1000, 262_143_328_850, (1850, True)),
    (U64_MAX - 1, 1, U64_MAX, (2, True)),
])
def test_correct_delta_examples(prev, cur, c, expected):
    assert correct_delta(primed(c, prev), cur) == expected


def test_overflow_counter_and_state_advance():
    s = primed(U32_MAX, 10)
    correct_delta(s, 5)
    correct_delta(s, 7)
    correct_delta(s, 1)
    assert s.overflow_count == 2
    assert s.prev_raw == 1


def test_unprimed_state_is_rejected():
    with pytest.raises(UsageError):
        correct_delta(CounterState(U32_MAX, 1.0), 1)


def test_out_of_range_reading_is_corrupted():
    with pytest.raises(CorruptedCounterError):
        correct_delta(primed(1000, 0), 1001)
    with pytest.raises(CorruptedCounterError):
        primed(1000, -1)


@pytest.mark.parametrize("mech, kwargs, expected", [
    (MechanismKind.MSR, {}, 4_294_967_295),
    (MechanismKind.PERF_USER, {}, 18_446_744_073_709_551_615),
    (MechanismKind.PERF_EBPF, {}, 18_446_744_073_709_551_615),
    (MechanismKind.POWERCAP, {"powercap_max": 65_532_610_987}, 65_532_610_987),
    (MechanismKind.SIMULATED, {"simulated": 999}, 999),
])
def test_wrap_constants(mech, kwargs, expected):
    assert wrap_constant_for(mech, **kwargs) == expected


def test_powercap_needs_max():
    with pytest.raises(UsageError):
        wrap_constant_for(MechanismKind.POWERCAP)
    with pytest.raises(UsageError):
        wrap_constant_for(MechanismKind.MSR, powercap_max=5)


@pytest.mark.parametrize("delta, unit", [
    (1_000_000, 1e-6),
    (65_536, math.ldexp(1, -16)),
    (4_294_967_296, 2.3283064365386962890625e-10),
])
def test_raw_to_joules_one_joule(delta, unit):
    assert raw_to_joules(delta, unit) == 1.0


def test_first_wrap_seconds():
    assert first_wrap_seconds(999_999, 1e-6, 50) == pytest.approx(0.02)
    assert first_wrap_seconds(U32_MAX, 1.0, 0) == math.inf


@given(st.integers(2, U64_MAX).flatmap(
    lambda c: st.tuples(st.just(c), st.integers(0, c), st.integers(0, c))))
def test_delta_is_bounded_and_consistent_modulo_c(args):
    c, prev, cur = args
    delta, wrapped = correct_delta(primed(c, prev), cur)
    assert 0 <= delta <= c
    assert wrapped == (cur < prev)
    assert (prev + delta - cur) % c == 0
