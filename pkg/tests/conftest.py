from __future__ import annotations

import contextlib
from pathlib import Path

import pytest

from raplkit.domains import DomainId, DomainKind, Topology, Vendor
from raplkit.simhost import parse_profile, write_host_info

PKG0 = DomainId(DomainKind.PACKAGE, 0)
CORE0 = DomainId(DomainKind.CORE, 0)
DRAM0 = DomainId(DomainKind.DRAM, 0)
PKG1 = DomainId(DomainKind.PACKAGE, 1)
PSYS = DomainId(DomainKind.PSYS)

GOLDEN = Path(__file__).parent / "golden"

_acceptance: list[tuple[str, bool, str]] = []


@contextlib.contextmanager
def criterion(name: str):
    """Record a pass/fail line for an acceptance criterion; failures still propagate."""
    try:
        yield
    except BaseException as exc:
        _acceptance.append((name, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"))
        raise
    _acceptance.append((name, True, ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, why in _acceptance:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  ({why})" if why else ""))


@pytest.fixture
def constant50():
    return parse_profile("waveform constant 50\n")


@pytest.fixture
def intel_host(tmp_path):
    topo = Topology.single(Vendor.INTEL, sockets=1, cpus_per_socket=2, model_id="06_55")
    write_host_info(tmp_path / "host", topo)
    return topo, tmp_path / "host"
