"""Owner-indexed store of versioned TTT state.

Each owner has exactly one record. Reads see the committed payload only; a
write goes ``write_view -> populate -> commit`` and the version counter moves
nowhere else (``rollback`` aside). Distinct owners may be touched from
different threads; operations on one owner must be serialized by the caller.
"""

from __future__ import annotations

import enum
import threading
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import Optional

from tttserve import backends
from tttserve.backends import BackendType, Payload, ShapeClass, UpdateEvidence
from tttserve.errors import (
    DoubleWrite,
    DuplicateOwner,
    NoCheckpoint,
    NoDirtyCandidate,
    StateError,
    UnknownOwner,
)

OwnerId = str


class ViewMode(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True, eq=False)
class StateView:
    owner: OwnerId
    version: int
    mode: ViewMode
    payload: Payload
    evidence: Optional[UpdateEvidence] = None


@dataclass
class TTTStateRecord:
    owner: OwnerId
    backend_type: BackendType
    version: int
    placement: str
    payload: Payload
    shape: ShapeClass
    dirty_candidate: Optional[Payload] = None
    checkpoint: Optional[tuple[int, Payload]] = None
    # Write view issued but not yet populated/committed.
    open_write: Optional[StateView] = None


class VersionTable(Mapping[OwnerId, int]):
    """Read-only mapping owner -> last committed version."""

    def __init__(self, records: dict[OwnerId, TTTStateRecord]) -> None:
        self._records = records

    def __getitem__(self, owner: OwnerId) -> int:
        try:
            return self._records[owner].version
        except KeyError:
            raise UnknownOwner(owner) from None

    def __iter__(self) -> Iterator[OwnerId]:
        return iter(list(self._records))

    def __len__(self) -> int:
        return len(self._records)


class StateTable:
    def __init__(self) -> None:
        self._records: dict[OwnerId, TTTStateRecord] = {}
        self._retired: set[OwnerId] = set()
        self._lock = threading.Lock()
        self.versions = VersionTable(self._records)

    def __contains__(self, owner: object) -> bool:
        return owner in self._records

    def __len__(self) -> int:
        return len(self._records)

    def owners(self) -> list[OwnerId]:
        return list(self._records)

    def record(self, owner: OwnerId) -> TTTStateRecord:
        try:
            return self._records[owner]
        except KeyError:
            raise UnknownOwner(owner) from None

    def register(
        self,
        owner: OwnerId,
        backend_type: BackendType,
        init_payload: Payload,
        placement: str,
        shape: Optional[ShapeClass] = None,
    ) -> TTTStateRecord:
        if shape is None:
            shape = backends.make_shape(backend_type, dim=init_payload.dim, rank=max(init_payload.rank, 1))
        with self._lock:
            if owner in self._records or owner in self._retired:
                raise DuplicateOwner(f"owner {owner!r} already registered")
            rec = TTTStateRecord(owner, backend_type, 0, placement, init_payload.copy(), shape)
            self._records[owner] = rec
        return rec

    def release(self, owner: OwnerId) -> TTTStateRecord:
        """Drop a finished owner's record; the id stays retired."""
        with self._lock:
            rec = self._records.pop(owner, None)
            if rec is None:
                raise UnknownOwner(owner)
            self._retired.add(owner)
        return rec

    def read_view(self, owner: OwnerId) -> StateView:
        rec = self.record(owner)
        return StateView(owner, rec.version, ViewMode.READ, rec.payload)

    def write_view(self, owner: OwnerId, evidence: UpdateEvidence) -> StateView:
        rec = self.record(owner)
        if rec.dirty_candidate is not None or rec.open_write is not None:
            raise DoubleWrite(f"owner {owner!r} already has a pending write at v={rec.version}")
        view = StateView(owner, rec.version, ViewMode.WRITE, rec.payload, evidence)
        rec.open_write = view
        return view

    def populate(self, view: StateView) -> Payload:
        """Run the backend update through a write view and stage the dirty candidate."""
        if view.mode is not ViewMode.WRITE or view.evidence is None:
            raise StateError("only write views can produce a candidate")
        rec = self.record(view.owner)
        if rec.open_write is not view:
            raise StateError(f"stale write view for owner {view.owner!r}")
        candidate = backends.boundary_update(rec.backend_type, view.payload, view.evidence)
        rec.dirty_candidate = candidate
        rec.open_write = None
        return candidate

    def commit(self, owner: OwnerId) -> int:
        rec = self.record(owner)
        if rec.dirty_candidate is None:
            raise NoDirtyCandidate(f"owner {owner!r} has nothing to commit")
        rec.payload = rec.dirty_candidate
        rec.dirty_candidate = None
        rec.version += 1
        return rec.version

    def discard(self, owner: OwnerId) -> None:
        """Drop any pending write without touching committed state."""
        rec = self.record(owner)
        rec.dirty_candidate = None
        rec.open_write = None

    def snapshot(self, owner: OwnerId) -> None:
        rec = self.record(owner)
        rec.checkpoint = (rec.version, rec.payload.copy())

    def rollback(self, owner: OwnerId) -> int:
        rec = self.record(owner)
        if rec.checkpoint is None:
            raise NoCheckpoint(f"owner {owner!r} has no checkpoint")
        version, payload = rec.checkpoint
        # the checkpoint is kept so a second rollback lands on the same point
        rec.payload = payload.copy()
        rec.version = version
        rec.dirty_candidate = None
        rec.open_write = None
        return version

    def fork(self, owner: OwnerId, new_owner: OwnerId) -> TTTStateRecord:
        src = self.record(owner)
        with self._lock:
            if new_owner in self._records or new_owner in self._retired:
                raise DuplicateOwner(f"owner {new_owner!r} already registered")
            rec = TTTStateRecord(
                new_owner, src.backend_type, src.version, src.placement, src.payload.copy(), src.shape
            )
            self._records[new_owner] = rec
        return rec
