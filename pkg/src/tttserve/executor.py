"""Execution of planned groups, with selective commit and failure injection.

Read groups apply each member's committed state to its token. Write groups
snapshot every member, stage one dirty candidate per member, then commit them
all. Any failure rolls every member back to its snapshot, so a write group
either advances all of its owners by one version or none of them. A failed
group is then replayed member by member through ``fallback_sequential``.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Iterable
from dataclasses import dataclass, replace
from typing import Optional, Protocol

import numpy as np

from tttserve import backends
from tttserve.backends import TailBuffer
from tttserve.errors import ExecutionError, InjectedFailure, TTTServeError
from tttserve.planner import Effect, Event, Group, Violation, validate_group
from tttserve.state_core import OwnerId, StateTable

log = logging.getLogger(__name__)

_EMPTY = np.zeros(0)
_EMPTY.flags.writeable = False


class TokenSource(Protocol):
    def token(self, owner: OwnerId) -> np.ndarray: ...

    def tail(self, owner: OwnerId) -> TailBuffer: ...


@dataclass
class GroupResult:
    group: Group
    outputs: tuple[np.ndarray, ...] = ()
    # digest of the committed payload each slot read
    state_digests: tuple[str, ...] = ()
    committed: tuple[tuple[OwnerId, int], ...] = ()
    failed: Optional[str] = None
    violation: Optional[Violation] = None

    @property
    def ok(self) -> bool:
        return self.failed is None


class Scenario(enum.Enum):
    MID_GROUP_WRITE_FAIL = "mid-group-write-fail"
    VERSION_MISMATCH = "version-mismatch"
    OWNER_MAP_COLLISION = "owner-map-collision"
    STALE_READ_ATTEMPT = "stale-read-attempt"
    ROLLBACK_RETRY = "rollback-retry"

    @classmethod
    def parse(cls, text: "str | Scenario") -> "Scenario":
        if isinstance(text, Scenario):
            return text
        norm = text.strip().lower().replace("_", "-")
        for member in cls:
            if norm in (member.value, member.name.lower().replace("_", "-")):
                return member
        raise ValueError(f"unknown failure scenario {text!r}")


class Phase(enum.Enum):
    UPDATE = "update"
    COMMIT = "commit"


@dataclass(frozen=True)
class FailureSpec:
    scenario: Scenario
    # which eligible occasion fires (0 = first)
    group_index: int = 0
    slot: int = 3


@dataclass(frozen=True)
class FailurePoint:
    slot: int
    phase: Phase


@dataclass
class InjectionRecord:
    scenario: str
    iteration: int
    target: str
    slot: int
    recovery: str = ""

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "iteration": self.iteration, "target": self.target,
                "slot": self.slot, "recovery": self.recovery}


def describe_group(group: Group) -> str:
    owners = ",".join(group.owner_map)
    kind = "prefill" if group.key.is_prefill else group.effect.label
    return f"{kind} x{len(group)} @iter {group.issue_step} owners [{owners}]"


class FailureInjector:
    """Fires one armed scenario exactly once.

    All hooks are called from the engine's scheduling thread, so the choice of
    victim is deterministic even when groups later run in parallel.
    """

    def __init__(self, spec: Optional[FailureSpec] = None) -> None:
        self.spec = spec
        self.fired = False
        self.record: Optional[InjectionRecord] = None
        self._seen = 0

    def arm(self, spec: FailureSpec) -> None:
        if self.fired:
            raise ValueError("injector already fired")
        self.spec = FailureSpec(Scenario.parse(spec.scenario), spec.group_index, spec.slot)
        self._seen = 0

    def _active(self, scenario: Scenario) -> bool:
        return self.spec is not None and not self.fired and self.spec.scenario is scenario

    def _take(self) -> bool:
        hit = self._seen == self.spec.group_index
        self._seen += 1
        return hit

    def forge_events(self, events: list[Event], clock: int) -> list[Event]:
        """VersionMismatch: claim a version the owner has not reached."""
        if not self._active(Scenario.VERSION_MISMATCH):
            return events
        decode = [i for i, e in enumerate(events) if e.position > 0]
        if not decode or not self._take():
            return events
        idx = decode[min(self.spec.slot, len(decode) - 1)]
        victim = events[idx]
        forged = replace(victim, expected_version=victim.expected_version + 1)
        self.fired = True
        self.record = InjectionRecord(self.spec.scenario.value, clock,
                                      f"event {victim.request} pos {victim.position}", idx)
        return events[:idx] + [forged] + events[idx + 1:]

    def forge_group(self, group: Group) -> Group:
        """OwnerMapCollision / StaleReadAttempt: corrupt a planned group."""
        if self._active(Scenario.OWNER_MAP_COLLISION):
            if len(group) < 2 or group.key.is_prefill or not self._take():
                return group
            slot = max(1, min(self.spec.slot, len(group) - 1))
            members = list(group.members)
            members[slot] = members[0]
            owners = list(group.owner_map)
            owners[slot] = owners[0]
            self._fire(group, slot)
            return Group(group.key, tuple(members), tuple(owners), group.issue_step)
        if self._active(Scenario.STALE_READ_ATTEMPT):
            if group.effect is not Effect.READ or group.key.is_prefill:
                return group
            candidates = [i for i, e in enumerate(group.members) if e.expected_version >= 1]
            if not candidates or not self._take():
                return group
            slot = next((i for i in candidates if i >= self.spec.slot), candidates[-1])
            members = list(group.members)
            members[slot] = replace(members[slot], expected_version=members[slot].expected_version - 1)
            self._fire(group, slot)
            return Group(group.key, tuple(members), group.owner_map, group.issue_step)
        return group

    def failure_point(self, group: Group) -> Optional[FailurePoint]:
        """MidGroupWriteFail / RollbackRetry: where a write group should blow up."""
        if group.effect is not Effect.WRITE:
            return None
        if self._active(Scenario.MID_GROUP_WRITE_FAIL):
            if len(group) <= self.spec.slot or not self._take():
                return None
            self._fire(group, self.spec.slot)
            return FailurePoint(self.spec.slot, Phase.COMMIT)
        if self._active(Scenario.ROLLBACK_RETRY):
            if not self._take():
                return None
            slot = min(self.spec.slot, len(group) - 1)
            self._fire(group, slot)
            return FailurePoint(slot, Phase.UPDATE)
        return None

    def _fire(self, group: Group, slot: int) -> None:
        self.fired = True
        self.record = InjectionRecord(self.spec.scenario.value, group.issue_step, describe_group(group), slot)

    def note_recovery(self, text: str) -> None:
        if self.record is not None and not self.record.recovery:
            self.record.recovery = text


def inject_failure(injector: FailureInjector, spec: FailureSpec) -> None:
    injector.arm(spec)


def execute_read_group(group: Group, table: StateTable, tokens: TokenSource) -> GroupResult:
    if group.effect is not Effect.READ:
        raise ValueError("execute_read_group needs a read group")
    violation = validate_group(group, table.versions)
    if violation is not None:
        return GroupResult(group, failed=str(violation), violation=violation)
    outputs, digests = [], []
    for owner in group.owner_map:
        view = table.read_view(owner)
        digests.append(backends.payload_digest(view.payload))
        if group.key.is_prefill:
            outputs.append(_EMPTY)
        else:
            outputs.append(backends.apply_read(group.key.backend, view.payload, tokens.token(owner)))
    return GroupResult(group, tuple(outputs), tuple(digests))


def execute_write_group(
    group: Group,
    table: StateTable,
    tokens: TokenSource,
    fail_at: Optional[FailurePoint] = None,
    rollback: bool = True,
) -> GroupResult:
    if group.effect is not Effect.WRITE:
        raise ValueError("execute_write_group needs a write group")
    violation = validate_group(group, table.versions)
    if violation is not None:
        return GroupResult(group, failed=str(violation), violation=violation)

    for owner in group.owner_map:
        table.snapshot(owner)
    outputs, digests, committed = [], [], []
    try:
        for slot, owner in enumerate(group.owner_map):
            view = table.read_view(owner)
            digests.append(backends.payload_digest(view.payload))
            # the boundary token is generated against the pre-update state
            outputs.append(backends.apply_read(group.key.backend, view.payload, tokens.token(owner)))
            evidence = backends.make_evidence(tokens.tail(owner))
            table.populate(table.write_view(owner, evidence))
            if fail_at is not None and fail_at.phase is Phase.UPDATE and fail_at.slot == slot:
                raise InjectedFailure(f"injected update failure at slot {slot}")
        for slot, owner in enumerate(group.owner_map):
            if fail_at is not None and fail_at.phase is Phase.COMMIT and fail_at.slot == slot:
                raise InjectedFailure(f"injected commit failure at slot {slot}")
            committed.append((owner, table.commit(owner)))
    except (TTTServeError, ValueError) as exc:
        for owner in group.owner_map:
            if rollback:
                table.rollback(owner)
            else:
                table.discard(owner)
        log.debug("write group %s failed: %s", describe_group(group), exc)
        return GroupResult(group, failed=f"{type(exc).__name__}: {exc}")
    return GroupResult(group, tuple(outputs), tuple(digests), tuple(committed))


def execute_group(
    group: Group,
    table: StateTable,
    tokens: TokenSource,
    fail_at: Optional[FailurePoint] = None,
    rollback: bool = True,
) -> GroupResult:
    if group.effect is Effect.WRITE:
        return execute_write_group(group, table, tokens, fail_at, rollback)
    return execute_read_group(group, table, tokens)


def fallback_sequential(
    events: Iterable[Event],
    table: StateTable,
    tokens: TokenSource,
    issue_step: int,
    rollback: bool = True,
) -> list[GroupResult]:
    """Replay a failed group's events one at a time, oldest first."""
    results = []
    for e in sorted(events, key=lambda e: (e.ready_step, e.request)):
        res = execute_group(Group.of([e], issue_step), table, tokens, rollback=rollback)
        if not res.ok:
            raise ExecutionError(f"singleton fallback failed for {e.request!r} at position {e.position}: {res.failed}")
        results.append(res)
    return results

