import math

import pytest

from raplkit.bench import (Combination, LatencyReport, RunRecord, StatReport, analyze,
                           bootstrap_mean_ci, build_combinations, emit_report, latency_microbench,
                           read_runs, schedule_repetitions)
from raplkit.domains import MechanismKind
from raplkit.errors import UsageError


def test_full_factor_product():
    combos = build_combinations()
    assert len(combos) == 96
    assert len(build_combinations(domain_sets=("pkg", "pkg+dram"))) == 192
    assert len(set(combos)) == 96


@pytest.mark.parametrize("combos, reps, passes, order", [
    ("AB", 3, 2, "AAABBBAAABBB"),
    ("A", 1, 5, "AAAAA"),
    ("ABC", 2, 1, "AABBCC"),
])
def test_schedule(combos, reps, passes, order):
    assert "".join(schedule_repetitions(combos, reps, passes)) == order


def test_schedule_length_and_errors():
    combos = build_combinations()
    assert len(schedule_repetitions(combos, 3, 4)) == 96 * 12
    with pytest.raises(UsageError):
        schedule_repetitions([], 3, 1)
    with pytest.raises(UsageError):
        schedule_repetitions("A", 0, 1)


def test_negative_frequency_rejected():
    with pytest.raises(UsageError):
        Combination("ep", MechanismKind.MSR, -1, "pkg")


class _VirtualCost:
    """read() costs exactly 1 us of virtual time."""

    def __init__(self):
        self.now = 0

    def read(self):
        self.now += 1000

    def clock(self):
        return self.now


def test_latency_with_fixed_virtual_cost():
    v = _VirtualCost()
    report = latency_microbench(v.read, warmup_iters=10, sample_iters=200, clock_ns=v.clock)
    assert report.low_us <= 1.0 <= report.high_us
    assert report.high_us - report.low_us < 0.1
    assert not report.partial and report.batches == 200


def test_latency_minimum_iterations():
    with pytest.raises(UsageError):
        latency_microbench(lambda: None, sample_iters=99)


def test_latency_failure_gives_partial_report():
    v = _VirtualCost()
    count = 0

    def flaky():
        nonlocal count
        count += 1
        if count > 10 + 50 * 10:
            raise OSError("device vanished")
        v.read()

    report = latency_microbench(flaky, warmup_iters=10, sample_iters=100, clock_ns=v.clock)
    assert report.partial and report.batches == 50 and "vanished" in report.error


def test_bootstrap_ci_is_deterministic_and_brackets_mean():
    data = [1.0, 2.0, 3.0, 4.0, 5.0] * 10
    a = bootstrap_mean_ci(data, seed=1)
    assert a == bootstrap_mean_ci(data, seed=1)
    assert a[0] < 3.0 < a[1]


def test_report_reference_row():
    row = StatReport("ep.E", "msr", 1000, 0.0006, 0.004, 1.94)
    text = emit_report([row], "table")
    header, line = text.splitlines()
    assert header == r"workload & mechanism & freq & pvalue & adj.pvalue & shift \\"
    assert line == r"ep.E & msr & 1000.00 & < 0.01 & < 0.01 & 1.94 \\"


def test_report_empty_and_csv():
    assert emit_report([], "table").count("\n") == 1
    assert emit_report([], "csv") == "workload,mechanism,freq,pvalue,adj.pvalue,shift\n"
    csv_text = emit_report([StatReport("ep.E", "msr", 1000, 0.0006, 0.004, 1.94)], "csv")
    assert csv_text.splitlines()[1] == "ep.E,msr,1000,0.0006,0.004,1.94"


def test_report_validation():
    with pytest.raises(UsageError):
        StatReport("a", "b", 1, 1.5, 1.5, 0)
    with pytest.raises(UsageError):
        emit_report([], "xml")


def _runs(baseline, measured):
    out = [RunRecord("ep", "none", 0, "pkg", f"b{i}", v) for i, v in enumerate(baseline)]
    out += [RunRecord("ep", "msr", 1000, "pkg", f"m{i}", v) for i, v in enumerate(measured)]
    return out


def test_analyze_detects_shift():
    rows = analyze(_runs([100, 101, 102, 103, 104], [110, 111, 112, 113, 114]))
    (row,) = rows
    assert (row.workload, row.mechanism, row.freq) == ("ep", "msr", 1000)
    assert row.pvalue == pytest.approx(1 / math.comb(10, 5))
    assert row.shift == 10
    assert row.method == "exact"


def test_analyze_holm_across_rows():
    records = _runs([1, 2, 3, 4], [5, 6, 7, 8])
    records += [RunRecord("ep", "powercap", 10, "pkg", f"p{i}", v) for i, v in enumerate([1, 2, 3, 4.5])]
    rows = analyze(records)
    assert [r.mechanism for r in rows] == ["msr", "powercap"]
    assert rows[0].adj_pvalue == pytest.approx(2 * rows[0].pvalue)


def test_analyze_needs_baseline():
    with pytest.raises(UsageError):
        analyze([RunRecord("ep", "msr", 1, "pkg", "1", 1.0)] * 3)


def test_read_runs(tmp_path):
    path = tmp_path / "runs.csv"
    path.write_text("workload,mechanism,freq,domain_set,run_id,value\nep,msr,10,pkg,r1,3.5\n")
    assert read_runs(path) == [RunRecord("ep", "msr", 10.0, "pkg", "r1", 3.5)]
    path.write_text("workload,value\nep,1\n")
    with pytest.raises(UsageError, match="lacks"):
        read_runs(path)
    path.write_text("workload,mechanism,freq,domain_set,run_id,value\nep,msr,x,pkg,r1,3.5\n")
    with pytest.raises(UsageError):
        read_runs(path)
