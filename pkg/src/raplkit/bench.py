"""Benchmark protocol: combinations, run scheduling, read latency and reports."""

from __future__ import annotations

import csv
import itertools
import math
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from .domains import MechanismKind
from .errors import UsageError
from .stats import holm_bonferroni, iqr_filter, location_shift, wilcoxon_rank_sum_one_sided

WORKLOADS = ("bt", "cg", "ep", "sleep")
MECHANISMS = (MechanismKind.MSR, MechanismKind.POWERCAP, MechanismKind.PERF_USER,
              MechanismKind.PERF_EBPF)
FREQUENCIES = (0.0, 0.1, 1.0, 10.0, 100.0, 1000.0)
DOMAIN_SETS = ("pkg",)

MIN_SAMPLE_ITERS = 100
BOOTSTRAP_RESAMPLES = 10_000


@dataclass(frozen=True)
class Combination:
    workload: str
    mechanism: MechanismKind
    frequency_hz: float
    domain_set: str

    def __post_init__(self) -> None:
        if self.frequency_hz < 0:
            raise UsageError("frequency must be >= 0")


def build_combinations(
    workloads: Sequence[str] = WORKLOADS,
    mechanisms: Sequence[MechanismKind] = MECHANISMS,
    frequencies: Sequence[float] = FREQUENCIES,
    domain_sets: Sequence[str] = DOMAIN_SETS,
) -> list[Combination]:
    return [Combination(w, m, f, d)
            for w, m, f, d in itertools.product(workloads, mechanisms, frequencies, domain_sets)]


def schedule_repetitions(combinations: Sequence, reps_per_pass: int, passes: int) -> list:
    """Spread repetitions over time: each pass runs every combination ``reps_per_pass`` times in a row.

    >>> "".join(schedule_repetitions("AB", 3, 2))
    'AAABBBAAABBB'
    """
    if not combinations:
        raise UsageError("no combinations to schedule")
    if reps_per_pass < 1 or passes < 1:
        raise UsageError("reps_per_pass and passes must be >= 1")
    return [c for _ in range(passes) for c in combinations for _ in range(reps_per_pass)]


# --- read latency --------------------------------------------------------------

@dataclass
class LatencyReport:
    low_us: float
    high_us: float
    mean_us: float
    batches: int
    batch_size: int
    partial: bool = False
    error: str | None = None


def bootstrap_mean_ci(values: Sequence[float], confidence: float = 0.95,
                      resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``values``."""
    data = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), size=(resamples, len(data)))
    means = data[idx].mean(axis=1)
    tail = (1 - confidence) / 2 * 100
    low, high = np.percentile(means, [tail, 100 - tail])
    return float(low), float(high)


def latency_microbench(
    read_fn: Callable[[], object],
    warmup_iters: int = 1000,
    sample_iters: int = 1000,
    batch_size: int = 10,
    clock_ns: Callable[[], int] = time.perf_counter_ns,
    cpu: int | None = None,
    seed: int = 0,
) -> LatencyReport:
    """Time ``sample_iters`` batches of ``batch_size`` reads after a warmup.

    The interval is a 95% bootstrap CI over per-read batch means, in
    microseconds. ``cpu`` pins the calling thread for the duration. A failing
    read ends the run and the report covers the batches completed so far.
    """
    if sample_iters < MIN_SAMPLE_ITERS:
        raise UsageError(f"sample_iters must be >= {MIN_SAMPLE_ITERS}")
    if batch_size < 1 or warmup_iters < 0:
        raise UsageError("batch_size must be >= 1 and warmup_iters >= 0")
    saved = None
    if cpu is not None:
        saved = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {cpu})
    means: list[float] = []
    error = None
    try:
        for _ in range(warmup_iters):
            read_fn()
        for _ in range(sample_iters):
            t0 = clock_ns()
            for _ in range(batch_size):
                read_fn()
            means.append((clock_ns() - t0) / batch_size / 1000)
    except Exception as exc:  # noqa: BLE001 - reported as a partial result
        error = f"{type(exc).__name__}: {exc}"
    finally:
        if saved is not None:
            os.sched_setaffinity(0, saved)
    if len(means) >= 2:
        low, high = bootstrap_mean_ci(means, seed=seed)
        mean = float(np.mean(means))
    else:
        low = high = mean = means[0] if means else math.nan
    return LatencyReport(low, high, mean, len(means), batch_size, error is not None, error)


# --- reports ---------------------------------------------------------------------

@dataclass(frozen=True)
class StatReport:
    workload: str
    mechanism: str
    freq: float
    pvalue: float
    adj_pvalue: float
    shift: float
    method: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not (0 <= self.pvalue <= 1 and 0 <= self.adj_pvalue <= 1):
            raise UsageError("p-values must lie in [0, 1]")


COLUMNS = ("workload", "mechanism", "freq", "pvalue", "adj.pvalue", "shift")


def _table_p(p: float) -> str:
    return "< 0.01" if p < 0.01 else f"{p:.2f}"


def emit_report(rows: Iterable[StatReport], fmt: Literal["csv", "table"] = "table") -> str:
    rows = list(rows)
    if fmt == "table":
        lines = [" & ".join(COLUMNS) + r" \\"]
        for r in rows:
            cells = (r.workload, r.mechanism, f"{r.freq:.2f}", _table_p(r.pvalue),
                     _table_p(r.adj_pvalue), f"{r.shift:.2f}")
            lines.append(" & ".join(cells) + r" \\")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        lines = [",".join(COLUMNS)]
        for r in rows:
            lines.append(",".join((r.workload, r.mechanism, repr(r.freq), repr(r.pvalue),
                                   repr(r.adj_pvalue), repr(r.shift))))
        return "\n".join(lines) + "\n"
    raise UsageError(f"unknown report format {fmt!r}")


@dataclass(frozen=True)
class RunRecord:
    workload: str
    mechanism: str
    freq: float
    domain_set: str
    run_id: str
    value: float


def read_runs(path: str | Path) -> list[RunRecord]:
    """Load a runs-metadata CSV: ``workload,mechanism,freq,domain_set,run_id,value``."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {f for f in RunRecord.__dataclass_fields__} - set(reader.fieldnames or ())
        if missing:
            raise UsageError(f"runs CSV lacks columns: {', '.join(sorted(missing))}")
        for line, row in enumerate(reader, start=2):
            try:
                records.append(RunRecord(row["workload"], row["mechanism"], float(row["freq"]),
                                         row["domain_set"], row["run_id"], float(row["value"])))
            except ValueError as exc:
                raise UsageError(f"{path}:{line}: {exc}") from None
    return records


def _mechanism_label(token: str) -> str:
    try:
        return MechanismKind.from_token(token).label
    except UsageError:
        return token


def analyze(records: Sequence[RunRecord], filter_outliers: bool = True) -> list[StatReport]:
    """Compare every measured group against the unmeasured baseline of its workload.

    Runs with ``freq == 0`` form the baseline and are pooled across mechanisms.
    One report row per (workload, mechanism, freq > 0); Holm correction is
    applied across all rows.
    """
    baseline: dict[str, list[float]] = defaultdict(list)
    groups: dict[tuple[str, str, float], list[float]] = defaultdict(list)
    for r in records:
        if r.freq == 0:
            baseline[r.workload].append(r.value)
        else:
            groups[(r.workload, _mechanism_label(r.mechanism), r.freq)].append(r.value)

    def clean(values: list[float]) -> list[float]:
        return iqr_filter(values).kept if filter_outliers else values

    partial = []
    for (workload, mech, freq), values in sorted(groups.items()):
        base = clean(baseline.get(workload, []))
        x = clean(values)
        if len(base) < 2 or len(x) < 2:
            raise UsageError(f"{workload}/{mech}/{freq:g}: need >= 2 runs and >= 2 baseline runs")
        test = wilcoxon_rank_sum_one_sided(x, base)
        partial.append((workload, mech, freq, test, location_shift(x, base)))
    adjusted = holm_bonferroni([t.pvalue for *_, t, _ in partial])
    return [StatReport(w, m, f, t.pvalue, adj, s, t.method)
            for (w, m, f, t, s), adj in zip(partial, adjusted)]
