"""RAPL through model-specific registers read from ``/dev/cpu/<N>/msr``.

Register addresses and unit exceptions come from ``data/msr_layouts.json``.
Energy status registers hold a 32-bit counter in their low half, so the
32-bit wrap constant applies.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .correction import wrap_constant_for
from .domains import DomainId, DomainKind, MechanismKind, Topology, Vendor, expected_domains
from .errors import CounterIOError, HostEnvironmentError, PrivilegeError, UnsupportedMechanismError, UsageError
from .source import Channel, DirectSource

LOGGER = logging.getLogger(__name__)

DEFAULT_ROOT = Path("/dev/cpu")
CAPABILITY = "CAP_SYS_RAWIO or root"
ENERGY_MASK = 0xFFFF_FFFF


@dataclass(frozen=True)
class MsrLayout:
    vendor: Vendor
    unit_register: int
    counter_addresses: Mapping[DomainKind, int]
    energy_unit_override: Mapping[str, Mapping[DomainKind, float]] = field(default_factory=dict)


@lru_cache(maxsize=None)
def _load_tables() -> dict:
    text = resources.files("raplkit").joinpath("data/msr_layouts.json").read_text()
    return json.loads(text)


def msr_layout_for(topology: Topology) -> MsrLayout:
    """Register table for the topology's vendor.

    Raises:
        UnsupportedMechanismError: for vendors without a known RAPL layout.
    """
    if topology.vendor not in (Vendor.INTEL, Vendor.AMD):
        raise UnsupportedMechanismError(
            f"no MSR layout for vendor {topology.vendor.value!r}"
        )
    table = _load_tables()[topology.vendor.value]
    counters = {DomainKind(k): int(v, 16) for k, v in table["counters"].items()}
    overrides: dict[str, dict[DomainKind, float]] = {}
    for kind, spec in table.get("energy_unit_override", {}).items():
        for model in spec["models"]:
            overrides.setdefault(model.upper(), {})[DomainKind(kind)] = float(spec["joules"])
    layout = MsrLayout(topology.vendor, int(table["unit_register"], 16), counters, overrides)
    assert set(counters) <= expected_domains(topology)
    return layout


def decode_energy_unit(unit_register_value: int) -> float:
    """Joules per LSB encoded in bits 12:8 (the energy status unit) of the unit register."""
    esu = (unit_register_value >> 8) & 0x1F
    return math.ldexp(1.0, -esu)


def unit_for_domain(layout: MsrLayout, topology: Topology, kind: DomainKind,
                    decoded_unit: float) -> float:
    override = layout.energy_unit_override.get(topology.model_id.upper(), {})
    return override.get(kind, decoded_unit)


def _fileno(device) -> int:
    return device if isinstance(device, int) else device.fileno()


def read_msr(device, address: int) -> int:
    """Full 64-bit register value at ``address``."""
    try:
        data = os.pread(_fileno(device), 8, address)
    except PermissionError as exc:
        raise PrivilegeError(f"cannot read MSR {address:#x}", CAPABILITY) from exc
    except OSError as exc:
        raise CounterIOError(f"cannot read MSR {address:#x}: {exc}") from exc
    if len(data) != 8:
        raise CounterIOError(f"short read of MSR {address:#x}: {len(data)} bytes")
    return struct.unpack("<Q", data)[0]


def read_msr_counter(device, address: int) -> int:
    """Energy status counter at ``address``: the register's low 32 bits."""
    return read_msr(device, address) & ENERGY_MASK


def open_msr_device(root: str | Path, cpu: int) -> int:
    path = Path(root) / str(cpu) / "msr"
    try:
        return os.open(path, os.O_RDONLY)
    except PermissionError as exc:
        raise PrivilegeError(f"cannot open {path}", CAPABILITY) from exc
    except FileNotFoundError as exc:
        raise HostEnvironmentError(
            f"{path} not found; is the msr kernel module loaded?", str(path)
        ) from exc
    except OSError as exc:
        raise HostEnvironmentError(f"cannot open {path}: {exc}", str(path)) from exc


def msr_domains(topology: Topology) -> list[DomainId]:
    """Domains addressable through the layout; the MSR has no discovery of its own."""
    return topology.domain_ids(msr_layout_for(topology).counter_addresses)


def open_msr(topology: Topology, domains: Iterable[DomainId],
             root: str | Path = DEFAULT_ROOT) -> DirectSource:
    """Open one device per socket (its lowest CPU) and build a source for ``domains``.

    Psys is read through socket 0's device.
    """
    layout = msr_layout_for(topology)
    domains = sorted(set(domains))
    for dom in domains:
        if dom.kind not in layout.counter_addresses:
            raise UsageError(f"{dom} has no MSR on {topology.vendor.value} processors")

    fds: dict[int, int] = {}
    units: dict[int, float] = {}

    def close() -> None:
        for fd in fds.values():
            os.close(fd)
        fds.clear()

    try:
        for dom in domains:
            socket = dom.socket if dom.socket is not None else 0
            if socket not in fds:
                fds[socket] = open_msr_device(root, topology.first_cpu(socket))
                units[socket] = decode_energy_unit(read_msr(fds[socket], layout.unit_register))
    except Exception:
        close()
        raise

    channels = []
    for dom in domains:
        socket = dom.socket if dom.socket is not None else 0
        fd, address = fds[socket], layout.counter_addresses[dom.kind]
        channels.append(Channel(
            domain=dom,
            mechanism=MechanismKind.MSR,
            wrap_constant=wrap_constant_for(MechanismKind.MSR),
            unit_joules=unit_for_domain(layout, topology, dom.kind, units[socket]),
            read=lambda fd=fd, address=address: read_msr_counter(fd, address),
        ))
    return DirectSource(channels, on_close=close)
