import pytest

from conftest import DRAM0, PKG0
from raplkit.clock import VirtualClock
from raplkit.domains import DomainId, DomainKind, Topology
from raplkit.ebpf import (MAX_DOMAINS, ProducerKind, RecordRing, SampleRecord, SimulatedProducer,
                          bpf_program_source, build_record, default_capacity, drain, start_sampler)
from raplkit.errors import SessionLostError, UnsupportedMechanismError, UsageError
from raplkit.simhost import EbpfFixture


def counting(index, t_ns):
    return t_ns // 1_000_000 + index


def test_drain_after_one_second():
    clock = VirtualClock()
    session = start_sampler([PKG0], 1000, sample_fn=counting, clock=clock)
    records = []
    for _ in range(10):
        clock.advance(100_000_000)
        records += drain(session)
    assert abs(len(records) - 1000) <= 1
    assert session.dropped == 0
    assert drain(session) == []


def test_undrained_second_overflows_default_buffer():
    clock = VirtualClock()
    session = start_sampler([PKG0], 1000, sample_fn=counting, clock=clock)
    clock.advance(1_000_000_000)
    assert len(drain(session)) == 400
    assert session.dropped == 600


def test_records_carry_one_value_per_domain():
    clock = VirtualClock()
    session = start_sampler([PKG0, DRAM0], 1000, sample_fn=counting, clock=clock)
    clock.advance(5_000_000)
    assert {len(r.values) for r in drain(session)} == {2}


def test_domain_count_limits():
    with pytest.raises(UsageError):
        start_sampler([], 1000, sample_fn=counting)
    nine = [DomainId(DomainKind.PACKAGE, s) for s in range(MAX_DOMAINS + 1)]
    with pytest.raises(UsageError):
        start_sampler(nine, 1000, sample_fn=counting)
    with pytest.raises(UsageError):
        start_sampler([PKG0], 1000)


def test_ring_overwrites_oldest():
    ring = RecordRing(10)
    for i in range(25):
        ring.push(SampleRecord(i, (i,)))
    assert [r.timestamp_ns for r in ring.take_all()] == list(range(15, 25))
    assert ring.dropped == 15 and ring.appended == 25


def test_small_buffer_reports_drops(caplog):
    clock = VirtualClock()
    session = start_sampler([PKG0], 1000, sample_fn=counting, clock=clock, buffer_capacity=10)
    assert "drop" in caplog.text
    clock.advance(25_000_000)
    assert len(drain(session)) == 10
    assert session.dropped == 15


@pytest.mark.parametrize("n", range(1, MAX_DOMAINS + 1))
def test_build_record_reads_each_domain_once(n):
    calls = []
    rec = build_record(7, lambda i: calls.append(i) or i * 10, n)
    assert calls == list(range(n)) and rec.values == tuple(i * 10 for i in range(n))


def test_build_record_bounds():
    with pytest.raises(UsageError):
        build_record(0, lambda i: 0, 0)


def test_default_capacity():
    assert default_capacity(1000, 10) == 400


def test_lost_producer():
    clock = VirtualClock()
    session = start_sampler([PKG0], 1000, sample_fn=counting, clock=clock)
    session.producer.terminated = True
    with pytest.raises(SessionLostError):
        drain(session)


def test_closed_session_drains_remaining():
    clock = VirtualClock()
    session = start_sampler([PKG0], 1000, sample_fn=counting, clock=clock)
    clock.advance(3_000_000)
    session.close()
    assert len(drain(session)) == 3


def test_real_time_producer_thread():
    from raplkit.clock import SystemClock
    session = start_sampler([PKG0], 200, sample_fn=counting, clock=SystemClock())
    import time
    time.sleep(0.3)
    session.close()
    records = drain(session)
    assert 30 <= len(records) <= 70
    ts = [r.timestamp_ns for r in records]
    assert ts == sorted(ts)


def test_kernel_producer_via_factory():
    made = []

    def factory(domains, rate):
        p = SimulatedProducer(counting, len(domains), rate, VirtualClock())
        made.append(p)
        return p

    session = start_sampler([PKG0], 1000, ProducerKind.KERNEL, kernel_producer_factory=factory)
    assert session.producer is made[0]


def test_kernel_producer_unavailable_without_bcc():
    pytest.importorskip("raplkit")
    try:
        import bcc  # noqa: F401
        pytest.skip("bcc installed")
    except ImportError:
        pass
    with pytest.raises(UnsupportedMechanismError):
        start_sampler([PKG0], 1000, ProducerKind.KERNEL)


def test_program_source_has_fixed_dispatch():
    src = bpf_program_source(2)
    assert "#define NB_DOMAINS 2" in src
    assert src.count("case ") == MAX_DOMAINS
    with pytest.raises(UsageError):
        bpf_program_source(9)


def test_fixture_counters_follow_profile(constant50):
    clock = VirtualClock()
    fx = EbpfFixture(constant50, Topology.single(), clock)
    session = fx.start([PKG0], 1000, buffer_capacity=1000)
    clock.advance(1_000_000_000)
    last = drain(session)[-1]
    assert last.timestamp_ns == 1_000_000_000
    assert last.values[0] == 50 << 32
