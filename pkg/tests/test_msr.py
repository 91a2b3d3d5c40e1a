import math
import os
import struct

import pytest

from conftest import PKG0, PSYS
from raplkit.clock import VirtualClock
from raplkit.domains import DomainId, DomainKind, Topology, Vendor
from raplkit.errors import CounterIOError, HostEnvironmentError, UnsupportedMechanismError
from raplkit.msr import (decode_energy_unit, msr_layout_for, open_msr, open_msr_device, read_msr,
                         read_msr_counter, unit_for_domain)
from raplkit.simhost import MsrFixture


def test_intel_layout():
    layout = msr_layout_for(Topology.single(Vendor.INTEL))
    assert layout.unit_register == 0x606
    assert layout.counter_addresses[DomainKind.PACKAGE] == 0x611
    assert layout.counter_addresses[DomainKind.DRAM] == 0x619
    assert layout.counter_addresses[DomainKind.CORE] == 0x639
    assert layout.counter_addresses[DomainKind.UNCORE] == 0x641
    assert layout.counter_addresses[DomainKind.PSYS] == 0x64D


def test_amd_layout():
    layout = msr_layout_for(Topology.single(Vendor.AMD))
    assert set(layout.counter_addresses) == {DomainKind.PACKAGE, DomainKind.CORE}
    assert layout.unit_register == 0xC0010299


def test_other_vendor_unsupported():
    with pytest.raises(UnsupportedMechanismError):
        msr_layout_for(Topology.single(Vendor.OTHER))


@pytest.mark.parametrize("reg, esu", [(0x1000, 16), (0x0, 0), (0x0E00, 14), (0xA1003, 16)])
def test_decode_energy_unit(reg, esu):
    assert decode_energy_unit(reg) == math.ldexp(1.0, -esu)


def test_dram_unit_override():
    generic = Topology.single(Vendor.INTEL, model_id="06_9E")
    server = Topology.single(Vendor.INTEL, model_id="06_3F")
    amd = Topology.single(Vendor.AMD, model_id="17_31")
    u16, u14 = math.ldexp(1, -16), math.ldexp(1, -14)
    assert unit_for_domain(msr_layout_for(generic), generic, DomainKind.DRAM, u16) == u16
    assert unit_for_domain(msr_layout_for(server), server, DomainKind.DRAM, u16) == 1.53e-5
    assert unit_for_domain(msr_layout_for(server), server, DomainKind.PACKAGE, u16) == u16
    assert unit_for_domain(msr_layout_for(amd), amd, DomainKind.PACKAGE, u14) == u14


def _image(tmp_path, offset, value):
    path = tmp_path / "msr"
    with open(path, "wb") as fh:
        fh.seek(offset)
        fh.write(struct.pack("<Q", value))
    return os.open(path, os.O_RDONLY)


@pytest.mark.parametrize("value, low", [(0x0000_0001_0000_00FF, 0xFF), (0xFFFF_FFFF, 0xFFFF_FFFF)])
def test_counter_keeps_low_32_bits(tmp_path, value, low):
    fd = _image(tmp_path, 0x611, value)
    try:
        assert read_msr(fd, 0x611) == value
        assert read_msr_counter(fd, 0x611) == low
    finally:
        os.close(fd)


def test_truncated_device_is_io_error(tmp_path):
    fd = _image(tmp_path, 0x600, 1)
    try:
        with pytest.raises(CounterIOError):
            read_msr_counter(fd, 0x611)
    finally:
        os.close(fd)


def test_missing_device(tmp_path):
    with pytest.raises(HostEnvironmentError, match="msr"):
        open_msr_device(tmp_path, 0)


def test_source_over_fixture(tmp_path, constant50):
    clock = VirtualClock()
    topo = Topology.single(Vendor.INTEL, sockets=2, cpus_per_socket=4)
    fx = MsrFixture(constant50, topo, tmp_path, clock, esu=14, unit_register_extra=0xA0003,
                    high_bits=0xDEAD)
    doms = [PKG0, DomainId(DomainKind.PACKAGE, 1), PSYS]
    source = open_msr(topo, doms, tmp_path)
    assert [c.unit_joules for c in source.channels] == [math.ldexp(1, -14)] * 3
    clock.advance(2_000_000_000)
    (reading,) = source.poll(clock.monotonic_ns())
    assert reading.values == (100 * 2**14, 100 * 2**14, 150 * 2**14)
    assert sorted(os.listdir(tmp_path)) == ["0", "4"]
    source.close()
    fx.close()
