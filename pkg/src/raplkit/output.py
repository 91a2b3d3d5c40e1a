"""CSV output of energy samples.

Format: header ``timestamp_ms,mechanism,domain,socket,joules,overflowed``;
``timestamp_ms`` in integer milliseconds since the Unix epoch, ``socket``
empty for psys, joules with 9 fractional digits (empty for an invalid
sample), LF line endings.
"""

from __future__ import annotations

import csv
import os
import time
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .correction import EnergySample
from .domains import DomainId, DomainKind, MechanismKind

HEADER = "timestamp_ms,mechanism,domain,socket,joules,overflowed\n"


def format_row(sample: EnergySample, epoch_offset_ns: int) -> str:
    ts_ms = (sample.timestamp_ns + epoch_offset_ns) // 1_000_000
    socket = "" if sample.domain.socket is None else str(sample.domain.socket)
    joules = f"{sample.joules:.9f}" if sample.valid else ""
    return (f"{ts_ms},{sample.mechanism.token},{sample.domain.kind.value},{socket},"
            f"{joules},{int(sample.overflowed)}\n")


def write_csv(samples: Iterable[EnergySample | None], output: str | Path,
              flush_interval_s: float = 1.0, epoch_offset_ns: int = 0,
              now: Callable[[], float] = time.monotonic) -> int:
    """Write ``samples`` to ``output`` and make them durable every ``flush_interval_s``.

    ``None`` items are heartbeats: they write nothing but let a flush happen
    while the stream is idle. Returns the number of rows written.
    """
    rows = 0
    with open(output, "w", newline="") as fh:
        fh.write(HEADER)
        _durable(fh)
        last = now()
        for sample in samples:
            if sample is not None:
                fh.write(format_row(sample, epoch_offset_ns))
                rows += 1
            t = now()
            if t - last >= flush_interval_s:
                _durable(fh)
                last = t
        _durable(fh)
    return rows


def _durable(fh) -> None:
    fh.flush()
    os.fsync(fh.fileno())


def read_csv(path: str | Path) -> Iterator[tuple[int, EnergySample]]:
    """Parse a file written by :func:`write_csv`.

    Yields ``(timestamp_ms, sample)``; the sample's own timestamp is the same
    instant in nanoseconds since the epoch.
    """
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts_ms = int(row["timestamp_ms"])
            kind = DomainKind(row["domain"])
            socket = int(row["socket"]) if row["socket"] else None
            valid = row["joules"] != ""
            yield ts_ms, EnergySample(
                timestamp_ns=ts_ms * 1_000_000,
                domain=DomainId(kind, socket),
                mechanism=MechanismKind.from_token(row["mechanism"]),
                joules=float(row["joules"]) if valid else float("nan"),
                overflowed=row["overflowed"] == "1",
                valid=valid,
            )
