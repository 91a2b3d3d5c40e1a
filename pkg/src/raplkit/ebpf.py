"""perf-events read from kernel space by a clock-triggered sampler.

A sampler fires at ``kernel_rate_hz``, reads every registered RAPL counter and
pushes one :class:`SampleRecord` into a bounded buffer. User space drains the
buffer at a slower, independent rate. The buffer overwrites its oldest record
when full and counts each overwrite as a drop.

Two producers implement the protocol: a simulated one (always available, used
by tests and the ``sim`` host) and a kernel one that needs bcc and the BPF and
PERFMON capabilities.
"""

from __future__ import annotations

import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

from .clock import Clock, SystemClock, VirtualClock
from .correction import U64_MAX
from .domains import DomainId, MechanismKind
from .errors import SessionLostError, UnsupportedMechanismError, UsageError
from .source import Channel, Reading

LOGGER = logging.getLogger(__name__)

MAX_DOMAINS = 8
DEFAULT_KERNEL_RATE_HZ = 1000
DEFAULT_DRAIN_RATE_HZ = 10.0


@dataclass(frozen=True)
class SampleRecord:
    timestamp_ns: int
    values: tuple[int, ...]


class RecordRing:
    """Bounded single-producer single-consumer buffer that overwrites the oldest record."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise UsageError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[SampleRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.appended = 0
        self.dropped = 0

    def push(self, record: SampleRecord) -> None:
        with self._lock:
            if len(self._buf) == self.capacity:
                self.dropped += 1
            self._buf.append(record)
            self.appended += 1

    def take_all(self) -> list[SampleRecord]:
        with self._lock:
            out = list(self._buf)
            self._buf.clear()
        return out

    def __len__(self) -> int:
        return len(self._buf)


def build_record(timestamp_ns: int, read: Callable[[int], int], count: int) -> SampleRecord:
    """Read ``count`` counters into a record.

    Fixed dispatch on the domain count, the same shape the kernel-side program
    needs because older verifiers reject loops.
    """
    match count:
        case 1:
            values = (read(0),)
        case 2:
            values = (read(0), read(1))
        case 3:
            values = (read(0), read(1), read(2))
        case 4:
            values = (read(0), read(1), read(2), read(3))
        case 5:
            values = (read(0), read(1), read(2), read(3), read(4))
        case 6:
            values = (read(0), read(1), read(2), read(3), read(4), read(5))
        case 7:
            values = (read(0), read(1), read(2), read(3), read(4), read(5), read(6))
        case 8:
            values = (read(0), read(1), read(2), read(3), read(4), read(5), read(6), read(7))
        case _:
            raise UsageError(f"domain count must be 1..{MAX_DOMAINS}, got {count}")
    return SampleRecord(timestamp_ns, values)


class ProducerKind(enum.Enum):
    KERNEL = "kernel"
    SIMULATED = "simulated"


class Producer(Protocol):
    terminated: bool

    def start(self, ring: RecordRing) -> None: ...

    def pump(self, now_ns: int) -> None: ...

    def stop(self) -> None: ...


class SimulatedProducer:
    """Deterministic producer: one record per tick at ``t0 + k * period``.

    ``sample_fn(index, t_ns)`` returns the raw counter of domain ``index`` at
    ``t_ns``. Under a virtual clock the producer follows clock advances; under
    the system clock it runs in its own thread.
    """

    def __init__(self, sample_fn: Callable[[int, int], int], count: int, rate_hz: int,
                 clock: Clock | None = None) -> None:
        self.sample_fn = sample_fn
        self.count = count
        self.period_ns = round(1e9 / rate_hz)
        self.clock = clock or SystemClock()
        self.terminated = False
        self._ring: RecordRing | None = None
        self._t0 = 0
        self._next = 1
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    def start(self, ring: RecordRing) -> None:
        self._ring = ring
        self._t0 = self.clock.monotonic_ns()
        if isinstance(self.clock, VirtualClock):
            self.clock.subscribe(self.pump)
        else:
            self._thread = threading.Thread(target=self._run, name="sim-sampler", daemon=True)
            self._thread.start()

    def pump(self, now_ns: int) -> None:
        """Append every record whose tick time is at or before ``now_ns``."""
        if self._ring is None or self.terminated:
            return
        with self._lock:
            while True:
                t = self._t0 + self._next * self.period_ns
                if t > now_ns:
                    break
                self._ring.push(build_record(t, lambda i: self.sample_fn(i, t), self.count))
                self._next += 1

    def _run(self) -> None:
        try:
            while not self._stop.wait(self.period_ns / 1e9):
                self.pump(self.clock.monotonic_ns())
        except Exception:  # noqa: BLE001
            LOGGER.exception("simulated sampler died")
            self.terminated = True

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.terminated = True


@dataclass
class SamplerSession:
    domain_order: list[DomainId]
    kernel_rate_hz: int
    buffer_capacity: int
    producer: Producer
    ring: RecordRing = field(repr=False)
    clock: Clock = field(repr=False)
    closed: bool = False

    @property
    def dropped(self) -> int:
        return self.ring.dropped

    def close(self) -> None:
        if not self.closed:
            self.producer.stop()
            self.closed = True


def default_capacity(kernel_rate_hz: float, drain_rate_hz: float) -> int:
    return max(2, int(4 * kernel_rate_hz / drain_rate_hz))


def start_sampler(
    domains: Sequence[DomainId],
    kernel_rate_hz: int = DEFAULT_KERNEL_RATE_HZ,
    producer_kind: ProducerKind = ProducerKind.SIMULATED,
    *,
    sample_fn: Callable[[int, int], int] | None = None,
    clock: Clock | None = None,
    drain_rate_hz: float = DEFAULT_DRAIN_RATE_HZ,
    buffer_capacity: int | None = None,
    kernel_producer_factory: Callable[[Sequence[DomainId], int], Producer] | None = None,
) -> SamplerSession:
    """Start a sampler over ``domains`` (at most eight) and return its session.

    Raises:
        UsageError: no domains, more than eight, or a simulated producer
            without ``sample_fn``.
        UnsupportedMechanismError: kernel producer on a platform without eBPF support.
    """
    domains = list(domains)
    if not domains:
        raise UsageError("the sampler needs at least one domain")
    if len(domains) > MAX_DOMAINS:
        raise UsageError(f"at most {MAX_DOMAINS} domains per sampler, got {len(domains)}")
    if kernel_rate_hz <= 0:
        raise UsageError("kernel rate must be positive")
    clock = clock or SystemClock()
    capacity = buffer_capacity or default_capacity(kernel_rate_hz, drain_rate_hz)
    if capacity < 2 * kernel_rate_hz / drain_rate_hz:
        LOGGER.warning("buffer of %d records will drop at %d Hz drained at %g Hz",
                       capacity, kernel_rate_hz, drain_rate_hz)

    if producer_kind is ProducerKind.SIMULATED:
        if sample_fn is None:
            raise UsageError("a simulated producer needs sample_fn")
        producer: Producer = SimulatedProducer(sample_fn, len(domains), kernel_rate_hz, clock)
    else:
        factory = kernel_producer_factory or _kernel_producer
        producer = factory(domains, kernel_rate_hz)

    ring = RecordRing(capacity)
    producer.start(ring)
    return SamplerSession(domains, kernel_rate_hz, capacity, producer, ring, clock)


def drain(session: SamplerSession) -> list[SampleRecord]:
    """Every record appended since the previous drain, oldest first.

    Raises:
        SessionLostError: if the producer has terminated.
    """
    if session.producer.terminated and not session.closed:
        raise SessionLostError("sampler producer terminated")
    session.producer.pump(session.clock.monotonic_ns())
    return session.ring.take_all()


class EbpfSource:
    """Adapts a sampler session to the polling loop: each poll drains the buffer."""

    def __init__(self, session: SamplerSession, units: Sequence[float]) -> None:
        self.session = session
        self.channels = [
            Channel(d, MechanismKind.PERF_EBPF, U64_MAX, u)
            for d, u in zip(session.domain_order, units)
        ]

    def poll(self, now_ns: int) -> list[Reading]:
        return [Reading(r.timestamp_ns, r.values) for r in drain(self.session)]

    def close(self) -> None:
        self.session.close()


def bpf_program_source(count: int) -> str:
    """C source of the kernel-side sampler for ``count`` domains."""
    if not 1 <= count <= MAX_DOMAINS:
        raise UsageError(f"domain count must be 1..{MAX_DOMAINS}")
    cases = []
    for n in range(1, MAX_DOMAINS + 1):
        reads = "\n".join(f"        READ({i});" for i in range(n))
        cases.append(f"    case {n}:\n{reads}\n        break;")
    body = "\n".join(cases)
    return f"""#include <uapi/linux/bpf_perf_event.h>
#define NB_DOMAINS {count}
BPF_PERF_ARRAY(counters, {MAX_DOMAINS});
BPF_PERF_OUTPUT(records);
struct record {{ u64 ts; u64 values[{MAX_DOMAINS}]; }};
#define READ(i) do {{ struct bpf_perf_event_value v = {{}}; \\
    bpf_perf_event_read_value(&counters, i, &v, sizeof(v)); rec.values[i] = v.counter; }} while (0)
int on_tick(struct bpf_perf_event_data *ctx) {{
    struct record rec = {{}};
    rec.ts = bpf_ktime_get_ns();
    switch (NB_DOMAINS) {{
{body}
    }}
    records.perf_submit(ctx, &rec, sizeof(rec));
    return 0;
}}
"""


def _kernel_producer(domains: Sequence[DomainId], rate_hz: int) -> Producer:
    try:
        import bcc  # noqa: F401
    except ImportError:
        raise UnsupportedMechanismError(
            "kernel eBPF sampler needs bcc and CAP_BPF + CAP_PERFMON; "
            "use the simulated producer or the perf mechanism"
        ) from None
    if any(d.socket not in (None, 0) for d in domains):
        raise UnsupportedMechanismError("kernel eBPF sampler only reads socket 0 domains")
    return _BccProducer(domains, rate_hz)


class _BccProducer:  # pragma: no cover - needs a privileged kernel with bcc
    """Kernel sampler attached to a CPU-clock software event on CPU 0."""

    def __init__(self, domains: Sequence[DomainId], rate_hz: int) -> None:
        from bcc import BPF, PerfSWConfig, PerfType

        from pathlib import Path

        from .perf import DEFAULT_EVENTS_DIR, discover_perf_events

        specs = {s.kind: s for s in discover_perf_events()}
        pmu_type = int((Path(DEFAULT_EVENTS_DIR).parent / "type").read_text())
        self.count = len(domains)
        self.terminated = False
        self._bpf = BPF(text=bpf_program_source(self.count))
        table = self._bpf["counters"]
        for i, dom in enumerate(domains):
            table.open_perf_event(pmu_type, specs[dom.kind].config_code)
        self._bpf.attach_perf_event(ev_type=PerfType.SOFTWARE, ev_config=PerfSWConfig.CPU_CLOCK,
                                    fn_name="on_tick", sample_freq=rate_hz, cpu=0)
        self._ring: RecordRing | None = None

    def start(self, ring: RecordRing) -> None:
        self._ring = ring

        def on_record(cpu, data, size):
            rec = self._bpf["records"].event(data)
            ring.push(SampleRecord(rec.ts, tuple(rec.values[: self.count])))

        self._bpf["records"].open_perf_buffer(on_record)

    def pump(self, now_ns: int) -> None:
        try:
            self._bpf.perf_buffer_poll(timeout=0)
        except Exception:
            self.terminated = True
            raise

    def stop(self) -> None:
        self._bpf.cleanup()
        self.terminated = True
