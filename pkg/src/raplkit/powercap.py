"""RAPL through the Linux powercap sysfs tree.

Each zone directory carries ``name``, ``energy_uj`` and ``max_energy_range_uj``.
The kernel nests the dram zone inside its package zone; the returned model puts
it back beside the package (dram energy is not part of package energy) and
keeps the physical nesting as metadata.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path

from .correction import wrap_constant_for
from .domains import DomainId, DomainKind, MechanismKind, Topology
from .errors import CorruptedCounterError, CounterIOError, HostEnvironmentError, PrivilegeError
from .source import Channel, DirectSource

LOGGER = logging.getLogger(__name__)

DEFAULT_ROOT = Path("/sys/devices/virtual/powercap/intel-rapl")
UNIT_JOULES = 1e-6

_ZONE_RE = re.compile(r"intel-rapl:(\d+)(?::(\d+))?")
_CHILD_KINDS = {
    "core": DomainKind.CORE,
    "uncore": DomainKind.UNCORE,
    "dram": DomainKind.DRAM,
    "psys": DomainKind.PSYS,
}


@dataclass(frozen=True)
class PowercapNode:
    dir_path: Path
    name: str
    energy_file: Path
    max_energy_range: int
    domain: DomainId
    nested_under_package: bool = False

    @property
    def wrap_constant(self) -> int:
        return wrap_constant_for(MechanismKind.POWERCAP, powercap_max=self.max_energy_range)


def _zone_dirs(root: Path) -> dict[str, Path]:
    """Collect zone directories by name, whether flat (class view) or nested."""
    zones: dict[str, Path] = {}
    for entry in sorted(root.iterdir()):
        if not (_ZONE_RE.fullmatch(entry.name) and entry.is_dir()):
            continue
        zones.setdefault(entry.name, entry)
        for sub in sorted(entry.iterdir()):
            if _ZONE_RE.fullmatch(sub.name) and sub.is_dir():
                zones.setdefault(sub.name, sub)
    return zones


def _kind_for(name: str) -> tuple[DomainKind, int | None] | None:
    m = re.fullmatch(r"package-(\d+)", name)
    if m:
        return DomainKind.PACKAGE, int(m.group(1))
    kind = _CHILD_KINDS.get(name)
    if kind is None:
        return None
    return kind, None


def discover_powercap(root: str | Path = DEFAULT_ROOT,
                      topology: Topology | None = None) -> list[PowercapNode]:
    """List the RAPL zones under ``root`` as domain nodes, sorted by socket then kind.

    Unknown zone names are logged and skipped.

    Raises:
        HostEnvironmentError: if ``root`` is missing or unreadable.
    """
    root = Path(root)
    try:
        zones = _zone_dirs(root)
    except OSError as exc:
        raise HostEnvironmentError(f"cannot read powercap root {root}: {exc}", str(root)) from exc

    nodes: dict[DomainId, PowercapNode] = {}
    for zone_name, path in zones.items():
        m = _ZONE_RE.fullmatch(zone_name)
        top_index, child_index = int(m.group(1)), m.group(2)
        try:
            name = (path / "name").read_text().strip()
            max_range = int((path / "max_energy_range_uj").read_text().strip())
        except (OSError, ValueError) as exc:
            LOGGER.warning("skipping powercap zone %s: %s", path, exc)
            continue

        mapped = _kind_for(name)
        if mapped is None:
            LOGGER.warning("skipping powercap zone %s with unrecognized name %r", path, name)
            continue
        kind, socket = mapped
        nested = False
        if kind is DomainKind.PSYS:
            socket = None
        elif socket is None:
            socket = top_index
            nested = child_index is not None and kind is DomainKind.DRAM
        if topology is not None and socket is not None and socket >= topology.socket_count:
            LOGGER.warning("skipping powercap zone %s: socket %d beyond topology", path, socket)
            continue

        domain = DomainId(kind, socket)
        if domain in nodes:
            LOGGER.warning("duplicate powercap zone for %s at %s; keeping %s",
                           domain, path, nodes[domain].dir_path)
            continue
        nodes[domain] = PowercapNode(
            dir_path=path,
            name=name,
            energy_file=path / "energy_uj",
            max_energy_range=max_range,
            domain=domain,
            nested_under_package=nested,
        )
    return [nodes[d] for d in sorted(nodes)]


def _parse(node: PowercapNode, text: str) -> int:
    try:
        value = int(text.strip())
    except ValueError:
        raise CorruptedCounterError(f"{node.energy_file}: not an integer: {text!r}") from None
    if not 0 <= value <= node.max_energy_range:
        raise CorruptedCounterError(
            f"{node.energy_file}: {value} outside [0, {node.max_energy_range}]"
        )
    return value


def read_powercap(node: PowercapNode) -> int:
    """Raw energy of ``node`` in microjoules."""
    try:
        text = node.energy_file.read_text()
    except PermissionError as exc:
        raise PrivilegeError(f"cannot read {node.energy_file}",
                             "read access on the intel-rapl directory") from exc
    except OSError as exc:
        raise CounterIOError(f"cannot read {node.energy_file}: {exc}") from exc
    return _parse(node, text)


class _ZoneReader:
    """Keeps ``energy_uj`` open and re-reads it from offset 0."""

    def __init__(self, node: PowercapNode) -> None:
        self.node = node
        try:
            self.fd = os.open(node.energy_file, os.O_RDONLY)
        except PermissionError as exc:
            raise PrivilegeError(f"cannot open {node.energy_file}",
                                 "read access on the intel-rapl directory") from exc
        except OSError as exc:
            raise HostEnvironmentError(f"cannot open {node.energy_file}: {exc}",
                                       str(node.energy_file)) from exc

    def __call__(self) -> int:
        try:
            data = os.pread(self.fd, 32, 0)
        except OSError as exc:
            raise CounterIOError(f"cannot read {self.node.energy_file}: {exc}") from exc
        return _parse(self.node, data.decode("ascii", "replace"))

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


def open_powercap(nodes: list[PowercapNode]) -> DirectSource:
    """Open every node once and return a source reading them all per poll."""
    readers = [_ZoneReader(n) for n in nodes]
    channels = [
        Channel(
            domain=r.node.domain,
            mechanism=MechanismKind.POWERCAP,
            wrap_constant=r.node.wrap_constant,
            unit_joules=UNIT_JOULES,
            read=r,
        )
        for r in readers
    ]

    def close() -> None:
        for r in readers:
            r.close()

    return DirectSource(channels, on_close=close)
