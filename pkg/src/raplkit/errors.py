"""Exception hierarchy shared by every backend and the CLI."""

from __future__ import annotations


class RaplError(Exception):
    """Base class for all errors raised by raplkit."""


class UsageError(RaplError, ValueError):
    """Invalid arguments or call sequence."""


class HostEnvironmentError(RaplError):
    """A host resource (sysfs tree, device file) is missing or unreadable."""

    def __init__(self, message: str, path: str | None = None) -> None:
        super().__init__(message)
        self.path = path


class PrivilegeError(RaplError, PermissionError):
    """The process lacks the capability needed by a mechanism."""

    def __init__(self, message: str, capability: str) -> None:
        super().__init__(f"{message} (requires {capability})")
        self.capability = capability


class UnsupportedMechanismError(RaplError):
    """The mechanism cannot run on this vendor or platform."""


class CorruptedCounterError(RaplError):
    """A raw counter value is outside the range allowed by its wrap constant."""


class CounterIOError(RaplError, OSError):
    """A counter read failed at the I/O level (short read, vanished file)."""


class SessionLostError(RaplError):
    """The kernel-side or simulated sampler stopped producing records."""
