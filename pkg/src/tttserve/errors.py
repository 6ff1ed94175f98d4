"""Exception hierarchy shared by the runtime modules."""

from __future__ import annotations


class TTTServeError(Exception):
    """Base class for all runtime errors."""


class StateError(TTTServeError):
    pass


class UnknownOwner(StateError, KeyError):
    def __str__(self) -> str:
        return f"unknown owner {self.args[0]!r}"


class DuplicateOwner(StateError):
    pass


class DoubleWrite(StateError):
    """A write view was requested while another write for the owner is pending."""


class NoDirtyCandidate(StateError):
    pass


class NoCheckpoint(StateError):
    pass


class ShapeMismatch(TTTServeError, ValueError):
    pass


class TailOverflow(TTTServeError):
    """Token appended to a full tail; the boundary should already have fired."""


class TailNotFull(TTTServeError):
    pass


class InjectedFailure(TTTServeError):
    """Raised by the failure injector inside a write group."""


class ExecutionError(TTTServeError):
    """Unrecoverable executor failure (e.g. a non-injected singleton failure)."""


class LivelockError(TTTServeError):
    pass


class TraceError(TTTServeError, ValueError):
    pass
