"""RAPL domain taxonomy, CPU topology and cross-mechanism consistency checks."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import HostEnvironmentError, UsageError

LOGGER = logging.getLogger(__name__)


class DomainKind(enum.Enum):
    PACKAGE = "package"
    CORE = "core"
    UNCORE = "uncore"
    DRAM = "dram"
    PSYS = "psys"

    @property
    def order(self) -> int:
        return _KIND_ORDER[self]

    @classmethod
    def from_token(cls, token: str) -> DomainKind:
        """Parse a user-facing token such as ``pkg`` or ``dram``."""
        try:
            return _KIND_TOKENS[token.strip().lower()]
        except KeyError:
            valid = ", ".join(sorted(_KIND_TOKENS))
            raise UsageError(f"unknown domain {token!r}; valid: {valid}") from None


_KIND_ORDER = {kind: i for i, kind in enumerate(DomainKind)}
_KIND_TOKENS = {
    "pkg": DomainKind.PACKAGE,
    "package": DomainKind.PACKAGE,
    "core": DomainKind.CORE,
    "cores": DomainKind.CORE,
    "uncore": DomainKind.UNCORE,
    "dram": DomainKind.DRAM,
    "ram": DomainKind.DRAM,
    "psys": DomainKind.PSYS,
}

_PARENT = {
    DomainKind.CORE: DomainKind.PACKAGE,
    DomainKind.UNCORE: DomainKind.PACKAGE,
    DomainKind.PACKAGE: DomainKind.PSYS,
    DomainKind.DRAM: DomainKind.PSYS,
    DomainKind.PSYS: None,
}


def domain_parent(kind: DomainKind) -> DomainKind | None:
    """Return the enclosing domain of ``kind``, or None for psys (the root)."""
    return _PARENT[kind]


@dataclass(frozen=True)
class DomainId:
    """One measurable domain instance: a kind plus the socket it belongs to.

    Psys is system-wide and carries no socket; every other kind must have one.
    """

    kind: DomainKind
    socket: int | None = None

    def __post_init__(self) -> None:
        if self.kind is DomainKind.PSYS:
            if self.socket is not None:
                raise UsageError("psys is system-wide and takes no socket")
        elif self.socket is None or self.socket < 0:
            raise UsageError(f"{self.kind.value} requires a non-negative socket")

    @property
    def sort_key(self) -> tuple[int, int]:
        socket = self.socket if self.socket is not None else 1 << 30
        return (socket, self.kind.order)

    def __lt__(self, other: DomainId) -> bool:
        return self.sort_key < other.sort_key

    def __str__(self) -> str:
        if self.socket is None:
            return self.kind.value
        return f"{self.kind.value}-{self.socket}"


PSYS = DomainId(DomainKind.PSYS)


class Vendor(enum.Enum):
    INTEL = "intel"
    AMD = "amd"
    OTHER = "other"


class MechanismKind(enum.Enum):
    MSR = "msr"
    POWERCAP = "powercap"
    PERF_USER = "perf"
    PERF_EBPF = "ebpf"
    SIMULATED = "sim"

    @property
    def token(self) -> str:
        """Short name used on the command line and in CSV output."""
        return self.value

    @property
    def label(self) -> str:
        """Name used in statistical reports."""
        return _MECH_LABELS[self]

    @property
    def is_hardware(self) -> bool:
        return self is not MechanismKind.SIMULATED

    @classmethod
    def from_token(cls, token: str) -> MechanismKind:
        key = token.strip().lower()
        for mech in cls:
            if key in (mech.value, mech.label.lower()):
                return mech
        valid = ", ".join(m.value for m in cls)
        raise UsageError(f"unknown mechanism {token!r}; valid: {valid}")


_MECH_LABELS = {
    MechanismKind.MSR: "msr",
    MechanismKind.POWERCAP: "powercap",
    MechanismKind.PERF_USER: "perf-events",
    MechanismKind.PERF_EBPF: "eBPF",
    MechanismKind.SIMULATED: "sim",
}


@dataclass(frozen=True)
class Topology:
    socket_count: int
    vendor: Vendor
    model_id: str = ""
    cpus_per_socket: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.socket_count < 1:
            raise UsageError("socket_count must be >= 1")
        seen: set[int] = set()
        for socket, cpus in self.cpus_per_socket.items():
            if not 0 <= socket < self.socket_count:
                raise UsageError(f"socket {socket} out of range")
            dup = seen.intersection(cpus)
            if dup:
                raise UsageError(f"cpus {sorted(dup)} listed under several sockets")
            seen.update(cpus)

    @classmethod
    def single(cls, vendor: Vendor = Vendor.INTEL, sockets: int = 1,
               cpus_per_socket: int = 1, model_id: str = "") -> Topology:
        """Build a regular topology, handy for fixtures."""
        cpus = {
            s: tuple(range(s * cpus_per_socket, (s + 1) * cpus_per_socket))
            for s in range(sockets)
        }
        return cls(sockets, vendor, model_id, cpus)

    def first_cpu(self, socket: int) -> int:
        """Lowest-numbered logical CPU of ``socket``."""
        cpus = self.cpus_per_socket.get(socket)
        if not cpus:
            if socket < self.socket_count and not self.cpus_per_socket:
                return socket
            raise UsageError(f"no CPU known for socket {socket}")
        return min(cpus)

    def domain_ids(self, kinds) -> list[DomainId]:
        """Expand kinds to per-socket ids (psys once), sorted."""
        out = set()
        for kind in kinds:
            if kind is DomainKind.PSYS:
                out.add(PSYS)
            else:
                out.update(DomainId(kind, s) for s in range(self.socket_count))
        return sorted(out)


def expected_domains(topology: Topology) -> set[DomainKind]:
    """Candidate domain kinds for the vendor; runtime discovery narrows it."""
    if topology.vendor is Vendor.AMD:
        return {DomainKind.PACKAGE, DomainKind.CORE}
    if topology.vendor is Vendor.INTEL:
        return set(DomainKind)
    return set()


@dataclass(frozen=True)
class Discrepancy:
    domain: DomainId
    present_in: frozenset[MechanismKind]
    missing_from: frozenset[MechanismKind]

    def __str__(self) -> str:
        have = ",".join(sorted(m.token for m in self.present_in))
        lack = ",".join(sorted(m.token for m in self.missing_from))
        return f"{self.domain}: listed by {have}; missing from {lack}"


def check_domain_consistency(
    lists: Mapping[MechanismKind, set[DomainId]],
) -> list[Discrepancy]:
    """Report every domain that some mechanisms list and others do not."""
    if len(lists) < 2:
        raise UsageError("consistency check needs at least two mechanisms")
    universe = set().union(*lists.values())
    out = []
    for dom in sorted(universe):
        present = frozenset(m for m, doms in lists.items() if dom in doms)
        if len(present) != len(lists):
            out.append(Discrepancy(dom, present, frozenset(lists) - present))
    return out


_VENDOR_IDS = {"GenuineIntel": Vendor.INTEL, "AuthenticAMD": Vendor.AMD}


def read_topology(host_root: str | Path = "/") -> Topology:
    """Read vendor, model and socket layout from ``proc`` and ``sys`` under host_root.

    The root is overridable so fixture trees can stand in for the real host.
    """
    root = Path(host_root)
    cpuinfo = root / "proc" / "cpuinfo"
    try:
        text = cpuinfo.read_text()
    except OSError as exc:
        raise HostEnvironmentError(f"cannot read {cpuinfo}: {exc}", str(cpuinfo)) from exc

    vendor = Vendor.OTHER
    family = model = None
    physical: dict[int, int] = {}
    cpu = None
    for line in text.splitlines():
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "processor":
            cpu = int(value)
        elif key == "vendor_id" and vendor is Vendor.OTHER:
            vendor = _VENDOR_IDS.get(value, Vendor.OTHER)
        elif key == "cpu family" and family is None:
            family = int(value)
        elif key == "model" and model is None:
            model = int(value)
        elif key == "physical id" and cpu is not None:
            physical[cpu] = int(value)
        if cpu is not None and cpu not in physical and key == "processor":
            physical[cpu] = 0

    sysfs_cpus = root / "sys" / "devices" / "system" / "cpu"
    if sysfs_cpus.is_dir():
        for entry in sysfs_cpus.iterdir():
            m = re.fullmatch(r"cpu(\d+)", entry.name)
            pkg_file = entry / "topology" / "physical_package_id"
            if m and pkg_file.is_file():
                physical[int(m.group(1))] = int(pkg_file.read_text().strip())

    if not physical:
        physical = {0: 0}
    package_ids = sorted(set(physical.values()))
    renumber = {pid: i for i, pid in enumerate(package_ids)}
    cpus: dict[int, list[int]] = {}
    for c, pid in sorted(physical.items()):
        cpus.setdefault(renumber[pid], []).append(c)

    model_id = ""
    if family is not None and model is not None:
        model_id = f"{family:02X}_{model:02X}"
    topo = Topology(
        socket_count=len(package_ids),
        vendor=vendor,
        model_id=model_id,
        cpus_per_socket={s: tuple(c) for s, c in cpus.items()},
    )
    LOGGER.debug("topology: %s", topo)
    return topo
