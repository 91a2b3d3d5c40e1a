"""Read RAPL CPU energy counters through msr, powercap, perf-events or eBPF."""

from .clock import SystemClock, VirtualClock
from .correction import (U32_MAX, U64_MAX, CounterState, EnergySample, correct_delta,
                         raw_to_joules, wrap_constant_for)
from .domains import (Discrepancy, DomainId, DomainKind, MechanismKind, Topology, Vendor,
                      check_domain_consistency, expected_domains, read_topology)
from .errors import (CorruptedCounterError, CounterIOError, HostEnvironmentError,
                     PrivilegeError, RaplError, SessionLostError, UnsupportedMechanismError,
                     UsageError)
from .polling import PollingConfig, RunSummary, achieved_rate, measure, run_polling

__all__ = [
    "CorruptedCounterError", "CounterIOError", "CounterState", "Discrepancy", "DomainId",
    "DomainKind", "EnergySample", "HostEnvironmentError", "MechanismKind", "PollingConfig",
    "PrivilegeError", "RaplError", "RunSummary", "SessionLostError", "SystemClock", "Topology",
    "U32_MAX", "U64_MAX", "UnsupportedMechanismError", "UsageError", "Vendor", "VirtualClock",
    "achieved_rate", "check_domain_consistency", "correct_delta", "expected_domains", "measure",
    "raw_to_joules", "read_topology", "run_polling", "wrap_constant_for",
]
