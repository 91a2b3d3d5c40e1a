"""RAPL as perf-events counting events, read from user space.

The kernel accumulates the hardware counter into 64 bits, so wraps are all but
impossible; the 64-bit wrap constant still applies. Each event must be opened
exactly once per socket, on any CPU of that socket.
"""

from __future__ import annotations

import ctypes
import errno
import logging
import math
import os
import platform
import re
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .correction import wrap_constant_for
from .domains import DomainId, DomainKind, MechanismKind, Topology
from .errors import CounterIOError, HostEnvironmentError, PrivilegeError, UsageError
from .source import Channel, DirectSource

LOGGER = logging.getLogger(__name__)

DEFAULT_EVENTS_DIR = Path("/sys/devices/power/events")
CAPABILITY = "CAP_PERFMON or kernel.perf_event_paranoid <= 0"

EVENT_KINDS = {
    "energy-pkg": DomainKind.PACKAGE,
    "energy-cores": DomainKind.CORE,
    "energy-gpu": DomainKind.UNCORE,
    "energy-ram": DomainKind.DRAM,
    "energy-psys": DomainKind.PSYS,
}


@dataclass(frozen=True)
class PerfEventSpec:
    event_name: str
    config_code: int
    scale_joules: float
    unit_label: str
    kind: DomainKind


def _parse_config(text: str) -> int:
    fields = dict(part.split("=", 1) for part in text.strip().split(",") if "=" in part)
    if "event" not in fields:
        raise ValueError(f"no event= term in {text!r}")
    config = int(fields["event"], 0)
    if "umask" in fields:
        config |= int(fields["umask"], 0) << 8
    return config


def parse_scale(text: str) -> float:
    """Parse a ``.scale`` file, checking power-of-two scales survive exactly."""
    text = text.strip()
    value = float(text)
    if not value > 0:
        raise ValueError(f"scale must be positive: {text!r}")
    mantissa, _ = math.frexp(value)
    if mantissa == 0.5 and Decimal(text) != Decimal(value):
        LOGGER.warning("scale %s is not an exact power of two; using %r", text, value)
    return value


def discover_perf_events(events_dir: str | Path = DEFAULT_EVENTS_DIR) -> list[PerfEventSpec]:
    """Read the energy events listed in the power PMU's ``events`` directory."""
    events_dir = Path(events_dir)
    try:
        names = sorted(p.name for p in events_dir.iterdir())
    except OSError as exc:
        raise HostEnvironmentError(f"cannot read {events_dir}: {exc}", str(events_dir)) from exc

    specs = []
    for name in names:
        if not re.fullmatch(r"energy-[a-z0-9]+", name):
            continue
        kind = EVENT_KINDS.get(name)
        if kind is None:
            LOGGER.warning("skipping unknown perf energy event %s", name)
            continue
        try:
            config = _parse_config((events_dir / name).read_text())
            scale = parse_scale((events_dir / f"{name}.scale").read_text())
            unit = (events_dir / f"{name}.unit").read_text().strip()
        except (OSError, ValueError) as exc:
            LOGGER.warning("skipping perf event %s: %s", name, exc)
            continue
        if unit != "Joules":
            LOGGER.warning("skipping perf event %s with unit %r", name, unit)
            continue
        specs.append(PerfEventSpec(name, config, scale, unit, kind))
    specs.sort(key=lambda s: s.kind.order)
    return specs


def perf_domains(specs: Iterable[PerfEventSpec], topology: Topology) -> list[DomainId]:
    return topology.domain_ids(s.kind for s in specs)


class CounterHandle(Protocol):
    def read(self) -> int: ...

    def close(self) -> None: ...


Opener = Callable[[PerfEventSpec, int], CounterHandle]


@dataclass
class PerfRegistry:
    """Tracks which (event, socket) pairs are open so none is opened twice."""

    topology: Topology
    opener: Opener
    handles: dict[tuple[str, int], CounterHandle] = field(default_factory=dict)

    def close(self) -> None:
        for handle in self.handles.values():
            handle.close()
        self.handles.clear()


def open_perf_counter(spec: PerfEventSpec, socket: int, registry: PerfRegistry) -> CounterHandle:
    """Open ``spec`` on the lowest CPU of ``socket``.

    Raises:
        UsageError: on a duplicate open, a socket out of range, or psys on a
            socket other than 0 (psys is system-wide and lives on socket 0).
    """
    topo = registry.topology
    if not 0 <= socket < topo.socket_count:
        raise UsageError(f"socket {socket} out of range for {topo.socket_count} socket(s)")
    if spec.kind is DomainKind.PSYS and socket != 0:
        raise UsageError("psys is system-wide; it is opened once, on socket 0")
    key = (spec.event_name, socket)
    if key in registry.handles:
        raise UsageError(f"{spec.event_name} already open on socket {socket}")
    handle = registry.opener(spec, topo.first_cpu(socket))
    registry.handles[key] = handle
    return handle


def read_perf_counter(handle: CounterHandle) -> int:
    return handle.read()


class PerfFdHandle:
    """Counting-event file descriptor; each read returns the accumulated count."""

    def __init__(self, fd: int) -> None:
        self.fd = fd

    def read(self) -> int:
        try:
            data = os.read(self.fd, 8)
        except OSError as exc:
            raise CounterIOError(f"perf read failed: {exc}") from exc
        if len(data) != 8:
            raise CounterIOError(f"short perf read: {len(data)} bytes")
        return struct.unpack("=Q", data)[0]

    def fileno(self) -> int:
        return self.fd

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


_SYSCALL_NR = {"x86_64": 298, "i686": 336, "aarch64": 241}
_ATTR_SIZE = 128
_PERF_FLAG_FD_CLOEXEC = 8


class SyscallOpener:
    """Opens events with the perf_event_open system call."""

    def __init__(self, events_dir: str | Path = DEFAULT_EVENTS_DIR) -> None:
        type_file = Path(events_dir).parent / "type"
        try:
            self.pmu_type = int(type_file.read_text().strip())
        except (OSError, ValueError) as exc:
            raise HostEnvironmentError(f"cannot read PMU type from {type_file}: {exc}",
                                       str(type_file)) from exc
        nr = _SYSCALL_NR.get(platform.machine())
        if nr is None:
            raise HostEnvironmentError(f"perf_event_open unknown on {platform.machine()}")
        self._nr = nr
        self._libc = ctypes.CDLL(None, use_errno=True)

    def __call__(self, spec: PerfEventSpec, cpu: int) -> PerfFdHandle:
        attr = struct.pack("<IIQ", self.pmu_type, _ATTR_SIZE, spec.config_code)
        buf = ctypes.create_string_buffer(attr.ljust(_ATTR_SIZE, b"\0"), _ATTR_SIZE)
        fd = self._libc.syscall(self._nr, buf, -1, cpu, -1, _PERF_FLAG_FD_CLOEXEC)
        if fd < 0:
            err = ctypes.get_errno()
            if err in (errno.EACCES, errno.EPERM):
                raise PrivilegeError(f"perf_event_open({spec.event_name}) denied", CAPABILITY)
            raise HostEnvironmentError(
                f"perf_event_open({spec.event_name}, cpu {cpu}): {os.strerror(err)}"
            )
        return PerfFdHandle(fd)


def open_perf(specs: Iterable[PerfEventSpec], domains: Iterable[DomainId],
              topology: Topology, opener: Opener,
              mechanism: MechanismKind = MechanismKind.PERF_USER) -> tuple[DirectSource, PerfRegistry]:
    """Open the events backing ``domains`` and return a source plus its registry."""
    by_kind = {s.kind: s for s in specs}
    registry = PerfRegistry(topology, opener)
    channels = []
    try:
        for dom in sorted(set(domains)):
            spec = by_kind.get(dom.kind)
            if spec is None:
                raise UsageError(f"no perf event for {dom}")
            handle = open_perf_counter(spec, dom.socket or 0, registry)
            channels.append(Channel(
                domain=dom,
                mechanism=mechanism,
                wrap_constant=wrap_constant_for(mechanism),
                unit_joules=spec.scale_joules,
                read=handle.read,
            ))
    except Exception:
        registry.close()
        raise
    return DirectSource(channels, on_close=registry.close), registry
