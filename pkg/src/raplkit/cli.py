"""Command-line front end.

Exit codes: 0 success, 1 domain discrepancies found, 2 missing privilege,
3 host environment problem, 64 usage error.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

from . import msr, perf, powercap
from .bench import analyze, emit_report, latency_microbench, read_runs
from .clock import SystemClock
from .domains import (DomainId, DomainKind, MechanismKind, Topology, check_domain_consistency,
                      expected_domains, read_topology)
from .ebpf import (DEFAULT_DRAIN_RATE_HZ, EbpfSource, ProducerKind, SamplerSession,
                   start_sampler)
from .errors import (HostEnvironmentError, PrivilegeError, RaplError, SessionLostError,
                     UnsupportedMechanismError, UsageError)
from .polling import MAX_FREQUENCY_HZ, PollingConfig, idle_run, measure
from .simhost import EbpfFixture, PowerProfile, SimSource, load_profile, parse_profile
from .source import CounterSource

EXIT_OK = 0
EXIT_DISCREPANCY = 1
EXIT_PRIVILEGE = 2
EXIT_ENVIRONMENT = 3
EXIT_USAGE = 64

DEFAULT_PROFILE = "waveform constant 50\n"
SIM_KINDS = tuple(DomainKind)

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _frequency(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if value == 0:
        return 0.0
    if not 0 < value <= MAX_FREQUENCY_HZ:
        raise argparse.ArgumentTypeError(
            f"{text} Hz outside the supported range (0, {MAX_FREQUENCY_HZ:g}]; 0 disables measurement"
        )
    return value


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def _mechanism(text: str) -> MechanismKind:
    try:
        return MechanismKind.from_token(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _mechanism_list(text: str) -> list[MechanismKind]:
    return [_mechanism(t) for t in text.split(",") if t.strip()]


def _domain_tokens(text: str) -> list[str]:
    tokens = [t.strip().lower() for t in text.split(",") if t.strip()]
    if not tokens:
        raise argparse.ArgumentTypeError("empty domain list")
    if "all" in tokens:
        if len(tokens) > 1:
            raise argparse.ArgumentTypeError("'all' cannot be combined with other domains")
        return tokens
    for t in tokens:
        try:
            DomainKind.from_token(t)
        except UsageError as exc:
            raise argparse.ArgumentTypeError(f"{exc}, all") from None
    return tokens


def _add_roots(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sysfs-root", type=Path, default=powercap.DEFAULT_ROOT,
                   help="powercap intel-rapl directory")
    p.add_argument("--msr-root", type=Path, default=msr.DEFAULT_ROOT,
                   help="directory holding <cpu>/msr device files")
    p.add_argument("--perf-events-dir", type=Path, default=perf.DEFAULT_EVENTS_DIR,
                   help="perf power PMU events directory")
    p.add_argument("--host-root", type=Path, default=Path("/"),
                   help="root under which proc/cpuinfo and sys/devices/system/cpu are read")
    p.add_argument("--profile", type=Path, help="sim mechanism: power profile file")
    p.add_argument("--ebpf-producer", choices=[k.value for k in ProducerKind],
                   default=ProducerKind.KERNEL.value,
                   help="ebpf mechanism: kernel sampler or a simulated one driven by --profile")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="raplkit", description="Read RAPL energy counters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("measure", help="poll counters and write a CSV")
    m.add_argument("--mechanism", type=_mechanism, required=True,
                   help="msr, powercap, perf, ebpf or sim")
    m.add_argument("--domains", type=_domain_tokens, default=["pkg"],
                   help="comma-separated: pkg,core,uncore,dram,psys, or all")
    m.add_argument("--frequency", type=_frequency, required=True,
                   help=f"polling rate in Hz, up to {MAX_FREQUENCY_HZ:g}; 0 measures nothing")
    m.add_argument("--output", type=Path, required=True)
    m.add_argument("--duration", type=_positive, help="seconds; default runs until interrupted")
    m.add_argument("--flush-interval", type=_positive, default=1.0)
    _add_roots(m)

    ls = sub.add_parser("list-domains", help="show the domains each mechanism exposes")
    ls.add_argument("--mechanism", type=_mechanism_list,
                    default=[MechanismKind.POWERCAP, MechanismKind.PERF_USER, MechanismKind.MSR])
    _add_roots(ls)

    cc = sub.add_parser("check-consistency", help="compare domain lists across mechanisms")
    cc.add_argument("--mechanisms", type=_mechanism_list,
                    default=[MechanismKind.POWERCAP, MechanismKind.PERF_USER])
    _add_roots(cc)

    bl = sub.add_parser("bench-latency", help="time single counter reads")
    bl.add_argument("--mechanism", type=_mechanism, required=True)
    bl.add_argument("--domains", type=_domain_tokens, default=["pkg"])
    bl.add_argument("--warmup", type=int, default=1000)
    bl.add_argument("--iters", type=int, default=1000, help="timed batches (>= 100)")
    bl.add_argument("--batch", type=int, default=10, help="reads per batch")
    bl.add_argument("--cpu", type=int, help="pin to this CPU")
    _add_roots(bl)

    an = sub.add_parser("analyze", help="rank-sum overhead report from a runs CSV")
    an.add_argument("--runs", type=Path, required=True,
                    help="CSV with workload,mechanism,freq,domain_set,run_id,value")
    an.add_argument("--format", choices=("table", "csv"), default="table")
    an.add_argument("--report", type=Path, help="write here instead of standard output")
    an.add_argument("--no-filter", action="store_true", help="keep IQR outliers")
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


# --- wiring -------------------------------------------------------------------

def _topology(args, mechanism: MechanismKind) -> Topology | None:
    """Host topology; None for powercap when the host files are absent.

    powercap names its own sockets, so it can run without a topology.
    """
    if mechanism is MechanismKind.SIMULATED:
        return Topology.single()
    if mechanism is MechanismKind.POWERCAP and not (args.host_root / "proc" / "cpuinfo").exists():
        return None
    return read_topology(args.host_root)


def _profile(args) -> PowerProfile:
    if args.profile is None:
        return parse_profile(DEFAULT_PROFILE)
    try:
        return load_profile(args.profile)
    except OSError as exc:
        raise UsageError(f"cannot read profile {args.profile}: {exc}") from None


def available_domains(args, mechanism: MechanismKind) -> list[DomainId]:
    """Domains the host exposes through ``mechanism``."""
    if mechanism is MechanismKind.SIMULATED:
        return Topology.single().domain_ids(SIM_KINDS)
    topology = _topology(args, mechanism)
    if mechanism is MechanismKind.POWERCAP:
        return [n.domain for n in powercap.discover_powercap(args.sysfs_root, topology)]
    if mechanism is MechanismKind.MSR:
        return msr.msr_domains(topology)
    specs = perf.discover_perf_events(args.perf_events_dir)
    domains = perf.perf_domains(specs, topology)
    return domains


def resolve_domains(args, mechanism: MechanismKind, tokens: list[str]) -> list[DomainId]:
    available = available_domains(args, mechanism)
    if tokens == ["all"]:
        if mechanism is MechanismKind.SIMULATED:
            return available
        topology = _topology(args, mechanism)
        expected = set(DomainKind) if topology is None else expected_domains(topology)
        chosen = [d for d in available if d.kind in expected]
        if not chosen:
            raise HostEnvironmentError(f"no expected domain is available via {mechanism.token}")
        return chosen
    kinds = {DomainKind.from_token(t) for t in tokens}
    chosen = [d for d in available if d.kind in kinds]
    missing = kinds - {d.kind for d in chosen}
    if missing:
        have = ", ".join(str(d) for d in available) or "none"
        raise UsageError(f"{', '.join(sorted(k.value for k in missing))} not available via "
                         f"{mechanism.token} (available: {have})")
    return chosen


def open_source(args, mechanism: MechanismKind, domains: list[DomainId],
                frequency_hz: float) -> CounterSource:
    clock = SystemClock()
    if mechanism is MechanismKind.SIMULATED:
        return SimSource(_profile(args), domains, clock)
    topology = _topology(args, mechanism)
    if mechanism is MechanismKind.POWERCAP:
        nodes = [n for n in powercap.discover_powercap(args.sysfs_root, topology)
                 if n.domain in domains]
        return powercap.open_powercap(nodes)
    if mechanism is MechanismKind.MSR:
        return msr.open_msr(topology, domains, args.msr_root)
    specs = perf.discover_perf_events(args.perf_events_dir)
    if mechanism is MechanismKind.PERF_USER:
        source, _ = perf.open_perf(specs, domains, topology, perf.SyscallOpener(args.perf_events_dir))
        return source
    rate = max(1, round(frequency_hz))
    units = [{s.kind: s.scale_joules for s in specs}[d.kind] for d in domains]
    session: SamplerSession
    if args.ebpf_producer == ProducerKind.SIMULATED.value:
        fixture = EbpfFixture(_profile(args), topology, clock, scale=units[0])
        session = fixture.start(domains, rate)
    else:
        session = start_sampler(domains, rate, ProducerKind.KERNEL, clock=clock)
    return EbpfSource(session, units)


@contextmanager
def _stop_on_signals(stop: threading.Event):
    if threading.current_thread() is not threading.main_thread():
        yield
        return
    previous = {s: signal.getsignal(s) for s in (signal.SIGINT, signal.SIGTERM)}
    for s in previous:
        signal.signal(s, lambda *_: stop.set())
    try:
        yield
    finally:
        for s, handler in previous.items():
            signal.signal(s, handler)


def cmd_measure(args, out) -> int:
    stop = threading.Event()
    mechanism = args.mechanism
    if args.frequency == 0:
        with _stop_on_signals(stop):
            idle_run(None, args.output, args.duration, stop)
        print("frequency 0: no measurement taken", file=out)
        return EXIT_OK
    domains = resolve_domains(args, mechanism, args.domains)
    config = PollingConfig(args.frequency, frozenset(domains), mechanism, args.output,
                           args.flush_interval)
    source = open_source(args, mechanism, domains, args.frequency)
    loop_hz, rate = None, None
    if mechanism is MechanismKind.PERF_EBPF:
        loop_hz = min(DEFAULT_DRAIN_RATE_HZ, args.frequency)
        rate = args.frequency * len(domains)
    try:
        with _stop_on_signals(stop):
            summary = measure(config, source, SystemClock(), args.duration, stop,
                              loop_frequency_hz=loop_hz, samples_per_second=rate)
    finally:
        source.close()
    dropped = summary.dropped_samples
    if mechanism is MechanismKind.PERF_EBPF:
        dropped += source.session.dropped  # type: ignore[attr-defined]
    print(f"ticks={summary.ticks} missed={summary.missed_ticks} samples={summary.samples} "
          f"invalid={summary.invalid_samples} dropped={dropped} "
          f"duration={summary.duration_s:.3f}s", file=out)
    return EXIT_OK


def cmd_list_domains(args, out) -> int:
    for mechanism in args.mechanism:
        try:
            domains = available_domains(args, mechanism)
        except (RaplError, OSError) as exc:
            print(f"{mechanism.token}: unavailable ({exc})", file=out)
            continue
        print(f"{mechanism.token}: {' '.join(str(d) for d in domains) or '(none)'}", file=out)
    return EXIT_OK


def cmd_check_consistency(args, out) -> int:
    mechanisms = list(dict.fromkeys(args.mechanisms))
    if len(mechanisms) < 2:
        raise UsageError("check-consistency needs at least two mechanisms")
    lists = {m: set(available_domains(args, m)) for m in mechanisms}
    found = check_domain_consistency(lists)
    for d in found:
        print(d, file=out)
    print(f"{len(found)} discrepancies", file=out)
    return EXIT_DISCREPANCY if found else EXIT_OK


def cmd_bench_latency(args, out) -> int:
    domains = resolve_domains(args, args.mechanism, args.domains)
    if args.mechanism is MechanismKind.PERF_EBPF:
        raise UsageError("bench-latency reads counters directly; use perf instead of ebpf")
    source = open_source(args, args.mechanism, domains[:1], 1.0)
    try:
        channel = source.channels[0]
        report = latency_microbench(channel.read, args.warmup, args.iters, args.batch,
                                    cpu=args.cpu)
    finally:
        source.close()
    status = f" (partial: {report.error})" if report.partial else ""
    print(f"{args.mechanism.label} {channel.domain}: [{report.low_us:.4f}, {report.high_us:.4f}] us "
          f"over {report.batches} batches of {report.batch_size}{status}", file=out)
    return EXIT_OK


def cmd_analyze(args, out) -> int:
    try:
        records = read_runs(args.runs)
    except OSError as exc:
        raise UsageError(f"cannot read {args.runs}: {exc}") from None
    rows = analyze(records, filter_outliers=not args.no_filter)
    text = emit_report(rows, args.format)
    if args.report:
        args.report.write_text(text)
    else:
        out.write(text)
    methods = sorted({r.method for r in rows})
    if methods:
        print(f"rank-sum method: {', '.join(methods)}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "measure": cmd_measure,
    "list-domains": cmd_list_domains,
    "check-consistency": cmd_check_consistency,
    "bench-latency": cmd_bench_latency,
    "analyze": cmd_analyze,
}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PrivilegeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRIVILEGE
    except (HostEnvironmentError, UnsupportedMechanismError, SessionLostError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except RaplError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT


def main_entry() -> None:
    sys.exit(main())
