"""Deterministic fake RAPL host.

A :class:`PowerProfile` gives power over time. Its closed-form integral is the
ground truth that every backend's reconstructed energy is checked against. The
profile can be exposed as a powercap tree, MSR device images, a perf-events
PMU or an eBPF sampler, all driven by the same clock.

Profile descriptor format, one directive per line (``#`` starts a comment)::

    waveform constant <watts>
    waveform square <period_s> <low_watts> <high_watts>
    waveform ramp <start_watts> <end_watts> <duration_s>
    weight <domain> <fraction>
    <duration_s> <watts>            # piecewise-constant segment

Segment lines and a ``waveform`` line are mutually exclusive. Weights scale the
profile per domain kind; core and uncore are shares of the package.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .clock import Clock, SystemClock, VirtualClock
from .correction import U32_MAX, U64_MAX
from .domains import DomainId, DomainKind, MechanismKind, Topology, Vendor
from .ebpf import SamplerSession, start_sampler
from .errors import HostEnvironmentError, UsageError
from .msr import msr_layout_for, unit_for_domain
from .perf import EVENT_KINDS, PerfEventSpec
from .source import Channel, DirectSource


@dataclass(frozen=True)
class Constant:
    watts: float

    def energy(self, t: float) -> float:
        return self.watts * t

    def peak(self) -> float:
        return self.watts


@dataclass(frozen=True)
class Square:
    """``low`` for the first half of each period, ``high`` for the second."""

    period: float
    low: float
    high: float

    def energy(self, t: float) -> float:
        half = self.period / 2
        n = math.floor(t / self.period)
        r = t - n * self.period
        return (n * (self.low + self.high) * half
                + self.low * min(r, half) + self.high * max(0.0, r - half))

    def peak(self) -> float:
        return max(self.low, self.high)


@dataclass(frozen=True)
class Ramp:
    """Linear from ``start`` to ``end`` over ``duration``, then holds ``end``."""

    start: float
    end: float
    duration: float

    def energy(self, t: float) -> float:
        d = self.duration
        if t <= d:
            return self.start * t + (self.end - self.start) * t * t / (2 * d)
        return (self.start + self.end) * d / 2 + self.end * (t - d)

    def peak(self) -> float:
        return max(self.start, self.end)


@dataclass(frozen=True)
class Segments:
    """Piecewise-constant power; the last level holds after the final segment."""

    segments: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise UsageError("at least one segment is required")
        for duration, watts in self.segments:
            if duration <= 0 or watts < 0:
                raise UsageError(f"bad segment ({duration}, {watts})")

    def energy(self, t: float) -> float:
        ends = list(accumulate(d for d, _ in self.segments))
        i = bisect_right(ends, t)
        done = sum(d * w for d, w in self.segments[:i])
        if i == len(self.segments):
            return done + self.segments[-1][1] * (t - ends[-1])
        start = ends[i - 1] if i else 0.0
        return done + self.segments[i][1] * (t - start)

    def peak(self) -> float:
        return max(w for _, w in self.segments)


Waveform = Constant | Square | Ramp | Segments

DEFAULT_WEIGHTS = {
    DomainKind.PACKAGE: 1.0,
    DomainKind.CORE: 0.6,
    DomainKind.UNCORE: 0.1,
    DomainKind.DRAM: 0.25,
    DomainKind.PSYS: 1.5,
}


@dataclass(frozen=True)
class PowerProfile:
    waveform: Waveform
    weights: Mapping[DomainKind, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights.values()):
            raise UsageError("domain weights must be non-negative")
        sub = self.weights.get(DomainKind.CORE, 0.0) + self.weights.get(DomainKind.UNCORE, 0.0)
        if sub > 1.0 + 1e-12:
            raise UsageError("core + uncore weights cannot exceed the package")

    def weight(self, kind: DomainKind) -> float:
        return self.weights.get(kind, 0.0)

    def energy_at(self, domain: DomainId, t: float) -> float:
        return self.weight(domain.kind) * self.waveform.energy(t)

    def peak_watts(self) -> float:
        return max(self.weights.values(), default=0.0) * self.waveform.peak()


def ground_truth_energy(profile: PowerProfile, domain: DomainId, t0: float, t1: float) -> float:
    """Exact energy of ``domain`` over ``[t0, t1]`` seconds."""
    if t0 < 0 or t1 < t0:
        raise UsageError(f"need 0 <= t0 <= t1, got [{t0}, {t1}]")
    return profile.energy_at(domain, t1) - profile.energy_at(domain, t0)


def counter_value(profile: PowerProfile, domain: DomainId, t: float, unit: float,
                  modulus: int) -> int:
    """Raw counter a device would show at ``t``: ``floor(energy / unit) mod modulus``."""
    if modulus < 2:
        raise UsageError("modulus must be >= 2")
    if t < 0:
        raise UsageError("t must be non-negative")
    # Rounding first keeps exact decimal products (2.5 J / 1e-6) from landing one LSB low.
    ticks = math.floor(round(profile.energy_at(domain, t) / unit, 6))
    return ticks % modulus


def parse_profile(text: str) -> PowerProfile:
    waveform = None
    segments: list[tuple[float, float]] = []
    weights = dict(DEFAULT_WEIGHTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "waveform":
                shape, args = parts[1], [float(a) for a in parts[2:]]
                waveform = {"constant": Constant, "square": Square, "ramp": Ramp}[shape](*args)
            elif parts[0] == "weight":
                weights[DomainKind.from_token(parts[1])] = float(parts[2])
            elif len(parts) == 2:
                segments.append((float(parts[0]), float(parts[1])))
            else:
                raise ValueError("unrecognized directive")
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise UsageError(f"profile line {lineno}: {raw!r}: {exc}") from None
    if waveform is not None and segments:
        raise UsageError("profile has both a waveform and segments")
    if waveform is None:
        if not segments:
            raise UsageError("profile defines no power")
        waveform = Segments(tuple(segments))
    return PowerProfile(waveform, weights)


def load_profile(path: str | Path) -> PowerProfile:
    return parse_profile(Path(path).read_text())


class Surface(enum.Enum):
    POWERCAP_TREE = "powercap"
    MSR_IMAGE = "msr"
    PERF_SIM = "perf"
    EBPF_SIM = "ebpf"


class _Fixture:
    """Base: maps clock time to profile time from the fixture's creation."""

    def __init__(self, profile: PowerProfile, topology: Topology, clock: Clock) -> None:
        self.profile = profile
        self.topology = topology
        self.clock = clock
        self.t0_ns = clock.monotonic_ns()

    def seconds(self, t_ns: int) -> float:
        return max(0, t_ns - self.t0_ns) / 1e9

    def ground_truth(self, domain: DomainId, t0_ns: int, t1_ns: int) -> float:
        return ground_truth_energy(self.profile, domain, self.seconds(t0_ns), self.seconds(t1_ns))

    def raw(self, domain: DomainId, t_ns: int, unit: float, modulus: int) -> int:
        return counter_value(self.profile, domain, self.seconds(t_ns), unit, modulus)


def write_host_info(root: str | Path, topology: Topology) -> Path:
    """Write ``proc/cpuinfo`` and per-CPU package ids under ``root``."""
    root = Path(root)
    vendor_id = {Vendor.INTEL: "GenuineIntel", Vendor.AMD: "AuthenticAMD"}.get(
        topology.vendor, "SimVendor")
    family, model = 6, 0x55
    if topology.model_id:
        fam, mod = topology.model_id.split("_")
        family, model = int(fam, 16), int(mod, 16)
    cpus = topology.cpus_per_socket or {s: (s,) for s in range(topology.socket_count)}
    lines = []
    for socket, ids in sorted(cpus.items()):
        for cpu in ids:
            lines += [f"processor\t: {cpu}", f"vendor_id\t: {vendor_id}",
                      f"cpu family\t: {family}", f"model\t\t: {model}",
                      f"physical id\t: {socket}", ""]
            topo_dir = root / "sys" / "devices" / "system" / "cpu" / f"cpu{cpu}" / "topology"
            topo_dir.mkdir(parents=True, exist_ok=True)
            (topo_dir / "physical_package_id").write_text(f"{socket}\n")
    (root / "proc").mkdir(parents=True, exist_ok=True)
    (root / "proc" / "cpuinfo").write_text("\n".join(lines))
    return root


class PowercapFixture(_Fixture):
    """Powercap sysfs tree. ``energy_uj`` files are rewritten on every clock advance
    (virtual clock) or on :meth:`sync`."""

    def __init__(self, profile: PowerProfile, topology: Topology, root: Path, clock: Clock,
                 kinds: Iterable[DomainKind] = (DomainKind.PACKAGE, DomainKind.CORE, DomainKind.DRAM),
                 max_energy_range_uj: int = 262_143_328_850) -> None:
        super().__init__(profile, topology, clock)
        self.root = Path(root)
        self.max_energy_range_uj = max_energy_range_uj
        self.files: dict[DomainId, int] = {}
        kinds = set(kinds)
        children = [k for k in (DomainKind.CORE, DomainKind.UNCORE, DomainKind.DRAM) if k in kinds]
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            for s in range(topology.socket_count):
                pkg = self.root / f"intel-rapl:{s}"
                if DomainKind.PACKAGE in kinds:
                    self._zone(pkg, f"package-{s}", DomainId(DomainKind.PACKAGE, s))
                for i, kind in enumerate(children):
                    self._zone(pkg / f"intel-rapl:{s}:{i}", kind.value, DomainId(kind, s))
            if DomainKind.PSYS in kinds:
                psys_dir = self.root / f"intel-rapl:{topology.socket_count}"
                self._zone(psys_dir, "psys", DomainId(DomainKind.PSYS))
        except OSError as exc:
            raise HostEnvironmentError(f"cannot build powercap fixture: {exc}", str(root)) from exc
        if isinstance(clock, VirtualClock):
            clock.subscribe(self.sync)
        else:
            self.sync()

    def _zone(self, path: Path, name: str, domain: DomainId) -> None:
        path.mkdir(parents=True, exist_ok=True)
        (path / "name").write_text(f"{name}\n")
        (path / "max_energy_range_uj").write_text(f"{self.max_energy_range_uj}\n")
        energy = path / "energy_uj"
        energy.write_text("0\n")
        self.files[domain] = os.open(energy, os.O_RDWR)

    def sync(self, t_ns: int | None = None) -> None:
        t_ns = self.clock.monotonic_ns() if t_ns is None else t_ns
        for domain, fd in self.files.items():
            value = self.raw(domain, t_ns, 1e-6, self.max_energy_range_uj + 1)
            data = f"{value}\n".encode()
            os.pwrite(fd, data, 0)
            os.ftruncate(fd, len(data))

    def close(self) -> None:
        for fd in self.files.values():
            os.close(fd)
        self.files.clear()


class MsrFixture(_Fixture):
    """Sparse files standing in for ``/dev/cpu/<N>/msr`` of each socket's first CPU."""

    def __init__(self, profile: PowerProfile, topology: Topology, root: Path, clock: Clock,
                 esu: int = 16, unit_register_extra: int = 0, high_bits: int = 0) -> None:
        super().__init__(profile, topology, clock)
        self.root = Path(root)
        self.layout = msr_layout_for(topology)
        self.unit_register_value = (esu << 8) | unit_register_extra
        self.high_bits = high_bits & 0xFFFF_FFFF
        decoded = math.ldexp(1.0, -esu)
        self.units = {k: unit_for_domain(self.layout, topology, k, decoded)
                      for k in self.layout.counter_addresses}
        self.fds: dict[int, int] = {}
        try:
            for s in range(topology.socket_count):
                cpu = topology.first_cpu(s)
                path = self.root / str(cpu) / "msr"
                path.parent.mkdir(parents=True, exist_ok=True)
                fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
                self.fds[s] = fd
                os.pwrite(fd, struct.pack("<Q", self.unit_register_value), self.layout.unit_register)
        except OSError as exc:
            raise HostEnvironmentError(f"cannot build MSR image: {exc}", str(root)) from exc
        if isinstance(clock, VirtualClock):
            clock.subscribe(self.sync)
        else:
            self.sync()

    def domains(self) -> list[DomainId]:
        return self.topology.domain_ids(self.layout.counter_addresses)

    def sync(self, t_ns: int | None = None) -> None:
        t_ns = self.clock.monotonic_ns() if t_ns is None else t_ns
        for dom in self.domains():
            fd = self.fds[dom.socket or 0]
            low = self.raw(dom, t_ns, self.units[dom.kind], U32_MAX + 1)
            value = (self.high_bits << 32) | low
            os.pwrite(fd, struct.pack("<Q", value), self.layout.counter_addresses[dom.kind])

    def close(self) -> None:
        for fd in self.fds.values():
            os.close(fd)
        self.fds.clear()


PERF_SCALE_TEXT = "2.3283064365386962890625e-10"
_EVENT_CODES = {
    DomainKind.CORE: 0x01, DomainKind.PACKAGE: 0x02, DomainKind.DRAM: 0x03,
    DomainKind.UNCORE: 0x04, DomainKind.PSYS: 0x05,
}


class _SimPerfHandle:
    def __init__(self, fixture: PerfFixture, domain: DomainId, scale: float) -> None:
        self.fixture, self.domain, self.scale = fixture, domain, scale
        self.closed = False

    def read(self) -> int:
        f = self.fixture
        return f.raw(self.domain, f.clock.monotonic_ns(), self.scale, U64_MAX + 1)

    def close(self) -> None:
        self.closed = True


class PerfFixture(_Fixture):
    """A power PMU directory (``type`` + ``events/``) and an opener serving its counters."""

    def __init__(self, profile: PowerProfile, topology: Topology, root: Path, clock: Clock,
                 kinds: Iterable[DomainKind] = tuple(DomainKind),
                 scale_text: str = PERF_SCALE_TEXT, pmu_type: int = 13) -> None:
        super().__init__(profile, topology, clock)
        self.events_dir = Path(root) / "events"
        self.events_dir.mkdir(parents=True, exist_ok=True)
        (Path(root) / "type").write_text(f"{pmu_type}\n")
        names = {kind: name for name, kind in EVENT_KINDS.items()}
        for kind in kinds:
            name = names[kind]
            (self.events_dir / name).write_text(f"event=0x{_EVENT_CODES[kind]:02x}\n")
            (self.events_dir / f"{name}.scale").write_text(f"{scale_text}\n")
            (self.events_dir / f"{name}.unit").write_text("Joules\n")
        self.opened: list[tuple[str, int]] = []
        self._socket_of = {cpu: s for s, cpus in topology.cpus_per_socket.items() for cpu in cpus}

    def opener(self, spec: PerfEventSpec, cpu: int) -> _SimPerfHandle:
        socket = self._socket_of.get(cpu, cpu)
        self.opened.append((spec.event_name, cpu))
        domain = DomainId(spec.kind, None if spec.kind is DomainKind.PSYS else socket)
        return _SimPerfHandle(self, domain, spec.scale_joules)


class EbpfFixture(_Fixture):
    """Builds simulated sampler sessions whose counters follow the profile."""

    def __init__(self, profile: PowerProfile, topology: Topology, clock: Clock,
                 scale: float = math.ldexp(1.0, -32)) -> None:
        super().__init__(profile, topology, clock)
        self.scale = scale

    def start(self, domains: Sequence[DomainId], kernel_rate_hz: int = 1000,
              **kwargs) -> SamplerSession:
        domains = list(domains)

        def sample(index: int, t_ns: int) -> int:
            return self.raw(domains[index], t_ns, self.scale, U64_MAX + 1)

        return start_sampler(domains, kernel_rate_hz, sample_fn=sample, clock=self.clock, **kwargs)


def materialize(profile: PowerProfile, surface: Surface, dir: str | Path | None = None, *,
                topology: Topology | None = None, clock: Clock | None = None, **options):
    """Expose ``profile`` through one measurement surface.

    Returns the fixture object; file-backed surfaces are written under ``dir``.
    """
    topology = topology or Topology.single()
    clock = clock or SystemClock()
    if surface is Surface.EBPF_SIM:
        return EbpfFixture(profile, topology, clock, **options)
    if dir is None:
        raise UsageError(f"{surface.value} fixture needs a directory")
    dir = Path(dir)
    if surface is Surface.POWERCAP_TREE:
        return PowercapFixture(profile, topology, dir, clock, **options)
    if surface is Surface.MSR_IMAGE:
        return MsrFixture(profile, topology, dir, clock, **options)
    return PerfFixture(profile, topology, dir, clock, **options)


class SimSource(DirectSource):
    """In-memory counters for the ``sim`` mechanism; no files involved."""

    def __init__(self, profile: PowerProfile, domains: Sequence[DomainId], clock: Clock,
                 unit: float = 1e-6, modulus: int = 1 << 32) -> None:
        self.fixture = _Fixture(profile, Topology.single(), clock)
        channels = [
            Channel(
                domain=d,
                mechanism=MechanismKind.SIMULATED,
                wrap_constant=modulus - 1,
                unit_joules=unit,
                read=lambda d=d: self.fixture.raw(d, clock.monotonic_ns(), unit, modulus),
            )
            for d in domains
        ]
        super().__init__(channels)
