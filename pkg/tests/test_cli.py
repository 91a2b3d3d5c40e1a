import io

import pytest
from hypothesis import given, settings, strategies as st

from raplkit import cli
from raplkit.clock import SystemClock, VirtualClock
from raplkit.domains import DomainKind, Topology, Vendor
from raplkit.errors import PrivilegeError, UsageError
from raplkit.output import HEADER, read_csv
from raplkit.simhost import MsrFixture, PerfFixture, PowercapFixture, parse_profile, write_host_info


def run(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture
def host(tmp_path):
    topo = Topology.single(Vendor.INTEL, cpus_per_socket=2, model_id="06_55")
    write_host_info(tmp_path / "host", topo)
    return topo, tmp_path


def test_valid_measure_invocation():
    args = cli.parse_args(["measure", "--mechanism", "powercap", "--domains", "pkg",
                           "--frequency", "10", "--output", "out.csv"])
    assert args.mechanism.token == "powercap" and args.frequency == 10 and args.domains == ["pkg"]


@pytest.mark.parametrize("argv", [
    ["measure", "--mechanism", "foo", "--frequency", "1", "--output", "o"],
    ["measure", "--mechanism", "sim", "--frequency", "1001", "--output", "o"],
    ["measure", "--mechanism", "sim", "--frequency", "-1", "--output", "o"],
    ["measure", "--mechanism", "sim", "--frequency", "1", "--output", "o", "--domains", "gpu"],
    ["measure", "--mechanism", "sim", "--frequency", "1", "--output", "o", "--domains", "all,pkg"],
    ["measure", "--mechanism", "sim", "--output", "o"],
    ["bogus"],
    [],
])
def test_usage_errors_exit_64(argv, capsys):
    assert cli.main(argv) == 64
    assert "error" in capsys.readouterr().err


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(
    st.sampled_from(["measure", "list-domains", "check-consistency", "bench-latency", "analyze",
                     "--mechanism", "--domains", "--frequency", "--output", "--duration",
                     "sim", "msr", "pkg,dram", "all", "0", "10", "1e9", "nan", "-v"]),
    st.text(max_size=8)), max_size=8))
def test_parse_args_is_total(argv):
    try:
        cli.parse_args(argv)
    except UsageError:
        pass
    except SystemExit as exc:  # --help style exits only
        assert exc.code == 0


def test_frequency_zero_is_header_only(tmp_path):
    out = tmp_path / "o.csv"
    code, text = run("measure", "--mechanism", "sim", "--frequency", "0", "--duration", "0.2",
                     "--output", str(out))
    assert code == 0 and out.read_text() == HEADER and "no measurement" in text


def test_measure_unreadable_sysfs_exits_3(tmp_path):
    code, _ = run("measure", "--mechanism", "powercap", "--frequency", "10", "--duration", "0.1",
                  "--sysfs-root", str(tmp_path / "absent"), "--output", str(tmp_path / "o.csv"))
    assert code == 3


def test_privilege_error_exits_2(tmp_path, monkeypatch, capsys):
    def denied(*a, **k):
        raise PrivilegeError("cannot open /dev/cpu/0/msr", "CAP_SYS_RAWIO or root")

    monkeypatch.setattr(cli, "open_source", denied)
    code, _ = run("measure", "--mechanism", "sim", "--frequency", "10", "--duration", "0.1",
                  "--output", str(tmp_path / "o.csv"))
    assert code == 2
    assert "CAP_SYS_RAWIO" in capsys.readouterr().err


def test_measure_sim(tmp_path):
    out = tmp_path / "o.csv"
    code, text = run("measure", "--mechanism", "sim", "--domains", "pkg,dram", "--frequency",
                     "100", "--duration", "0.5", "--output", str(out))
    assert code == 0 and "ticks=" in text
    kinds = {s.domain.kind for _, s in read_csv(out)}
    assert kinds == {DomainKind.PACKAGE, DomainKind.DRAM}


def test_measure_powercap_fixture(tmp_path):
    profile = parse_profile("waveform constant 20")
    fx = PowercapFixture(profile, Topology.single(), tmp_path / "rapl", SystemClock())
    out = tmp_path / "o.csv"
    code, _ = run("measure", "--mechanism", "powercap", "--domains", "all", "--frequency", "50",
                  "--duration", "0.3", "--sysfs-root", str(tmp_path / "rapl"),
                  "--host-root", str(tmp_path / "nohost"), "--output", str(out))
    fx.close()
    assert code == 0
    assert {str(s.domain) for _, s in read_csv(out)} <= {"package-0", "core-0", "dram-0"}


def test_measure_msr_fixture(host):
    topo, tmp = host
    fx = MsrFixture(parse_profile("waveform constant 20"), topo, tmp / "msr", VirtualClock())
    out = tmp / "o.csv"
    code, _ = run("measure", "--mechanism", "msr", "--domains", "pkg", "--frequency", "50",
                  "--duration", "0.2", "--msr-root", str(tmp / "msr"),
                  "--host-root", str(tmp / "host"), "--output", str(out))
    fx.close()
    assert code == 0
    rows = list(read_csv(out))
    assert rows and all(s.valid and s.joules == 0 for _, s in rows)


def test_unavailable_domain_is_usage_error(tmp_path):
    PowercapFixture(parse_profile("waveform constant 1"), Topology.single(), tmp_path / "rapl",
                    VirtualClock(), kinds=(DomainKind.PACKAGE,)).close()
    code, _ = run("measure", "--mechanism", "powercap", "--domains", "dram", "--frequency", "1",
                  "--sysfs-root", str(tmp_path / "rapl"), "--output", str(tmp_path / "o"))
    assert code == 64


def test_measure_ebpf_simulated(host):
    topo, tmp = host
    PerfFixture(parse_profile("waveform constant 10"), topo, tmp / "pmu", VirtualClock(),
                kinds=(DomainKind.PACKAGE,))
    out = tmp / "o.csv"
    code, text = run("measure", "--mechanism", "ebpf", "--ebpf-producer", "simulated",
                     "--frequency", "200", "--duration", "0.5",
                     "--perf-events-dir", str(tmp / "pmu" / "events"),
                     "--host-root", str(tmp / "host"), "--output", str(out))
    assert code == 0 and "dropped=0" in text
    rows = [s for _, s in read_csv(out)]
    assert len(rows) >= 50
    # default sim profile: 50 W on the package
    assert sum(s.joules for s in rows) == pytest.approx(50 * len(rows) / 200, rel=1e-6)


def test_list_domains_sim_is_sorted():
    code, text = run("list-domains", "--mechanism", "sim")
    assert code == 0
    assert text == "sim: package-0 core-0 uncore-0 dram-0 psys\n"


def test_list_domains_reports_unavailable(tmp_path):
    code, text = run("list-domains", "--mechanism", "powercap",
                     "--sysfs-root", str(tmp_path / "absent"))
    assert code == 0 and "unavailable" in text


def _consistency_fixture(tmp, topo):
    profile = parse_profile("waveform constant 1")
    PowercapFixture(profile, topo, tmp / "rapl", VirtualClock(),
                    kinds=(DomainKind.PACKAGE, DomainKind.CORE)).close()
    PerfFixture(profile, topo, tmp / "pmu", VirtualClock())


def test_check_consistency_finds_three(host):
    topo, tmp = host
    _consistency_fixture(tmp, topo)
    code, text = run("check-consistency", "--sysfs-root", str(tmp / "rapl"),
                     "--perf-events-dir", str(tmp / "pmu" / "events"),
                     "--host-root", str(tmp / "host"))
    assert code == 1
    lines = text.splitlines()
    assert lines[-1] == "3 discrepancies"
    assert [l.split(":")[0] for l in lines[:-1]] == ["uncore-0", "dram-0", "psys"]


def test_check_consistency_clean(host):
    topo, tmp = host
    code, text = run("check-consistency", "--mechanisms", "sim,sim")
    assert code == 64
    PowercapFixture(parse_profile("waveform constant 1"), Topology.single(), tmp / "rapl",
                    VirtualClock(), kinds=tuple(DomainKind)).close()
    code, text = run("check-consistency", "--mechanisms", "powercap,sim",
                     "--sysfs-root", str(tmp / "rapl"), "--host-root", str(tmp / "host"))
    assert code == 0 and text.strip() == "0 discrepancies"


def test_bench_latency_sim():
    code, text = run("bench-latency", "--mechanism", "sim", "--warmup", "10", "--iters", "100",
                     "--batch", "2")
    assert code == 0 and text.startswith("sim package-0: [")


def test_analyze_cli(tmp_path):
    runs = tmp_path / "runs.csv"
    lines = ["workload,mechanism,freq,domain_set,run_id,value"]
    lines += [f"ep.E,none,0,pkg,b{i},{100 + i}" for i in range(5)]
    lines += [f"ep.E,msr,1000,pkg,m{i},{110 + i}" for i in range(5)]
    runs.write_text("\n".join(lines) + "\n")
    report = tmp_path / "report.txt"
    code, _ = run("analyze", "--runs", str(runs), "--report", str(report))
    assert code == 0
    assert report.read_text().splitlines()[1] == r"ep.E & msr & 1000.00 & < 0.01 & < 0.01 & 10.00 \\"
    code, text = run("analyze", "--runs", str(runs), "--format", "csv")
    assert text.startswith("workload,mechanism,freq,pvalue,adj.pvalue,shift\n")
    assert run("analyze", "--runs", str(tmp_path / "absent.csv"))[0] == 64
