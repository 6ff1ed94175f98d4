"""Batch planning under the compatibility rule and a bounded wait budget.

Events are bucketed by compatibility key (effect, backend type, shape class,
placement). A bucket issues a group once it holds ``target_batch`` events, or
once its oldest event has waited ``wait_budget`` planner steps. Because every
younger member has waited less than the oldest, the oldest-member timer keeps
every event within the budget.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Optional

from tttserve.backends import BackendType, ShapeClass
from tttserve.state_core import OwnerId

PREFILL_LAYER_SET = "prefill"


class Effect(enum.IntEnum):
    READ = 0
    WRITE = 1

    @property
    def label(self) -> str:
        return self.name.lower()


class Mode(enum.Enum):
    SERIAL = "serial"
    PHASE_GROUPING = "phase-grouping"
    FULL = "full"

    @classmethod
    def parse(cls, text: "str | Mode") -> "Mode":
        if isinstance(text, Mode):
            return text
        norm = text.strip().lower().replace("_", "-")
        aliases = {"phase": "phase-grouping", "grouping": "phase-grouping"}
        return cls(aliases.get(norm, norm))


@dataclass(frozen=True, order=True)
class CompatKey:
    effect: Effect
    backend: BackendType
    shape: ShapeClass
    placement: str

    @property
    def is_prefill(self) -> bool:
        return self.shape.layer_set == PREFILL_LAYER_SET


@dataclass(frozen=True)
class Event:
    request: OwnerId
    backend: BackendType
    shape: ShapeClass
    effect: Effect
    expected_version: int
    ready_step: int
    placement: str = "dev0"
    # decode position this event executes (1-based); 0 for prefill
    position: int = 0

    @property
    def key(self) -> CompatKey:
        return CompatKey(self.effect, self.backend, self.shape, self.placement)


@dataclass(frozen=True)
class Group:
    key: CompatKey
    members: tuple[Event, ...]
    owner_map: tuple[OwnerId, ...]
    issue_step: int

    @classmethod
    def of(cls, members: Sequence[Event], issue_step: int) -> "Group":
        members = tuple(members)
        return cls(members[0].key, members, tuple(e.request for e in members), issue_step)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def effect(self) -> Effect:
        return self.key.effect


@dataclass(frozen=True)
class PlannerConfig:
    target_batch: int = 8
    wait_budget: int = 4
    mode: Mode = Mode.FULL

    def __post_init__(self) -> None:
        if self.target_batch < 1:
            raise ValueError("target_batch must be positive")
        if self.wait_budget < 0:
            raise ValueError("wait_budget must be non-negative")

    def batches(self, key: CompatKey) -> bool:
        if self.mode is Mode.SERIAL:
            return False
        if self.mode is Mode.PHASE_GROUPING:
            return key.effect is Effect.READ
        return True


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    owner: Optional[OwnerId] = None

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


@dataclass
class PlanResult:
    groups: list[Group] = field(default_factory=list)
    pending: list[Event] = field(default_factory=list)
    rejected: list[Event] = field(default_factory=list)


def extract_event(request, versions: Mapping[OwnerId, int], clock: int) -> Event:
    """Next transition exposed by ``request``.

    ``request`` is an engine request whose current token is already staged in
    its tail, so a full tail means this step is the boundary write.
    """
    if request.finished:
        raise ValueError(f"request {request.id!r} is finished")
    if request.needs_prefill:
        shape = ShapeClass(
            dtype=request.shape.dtype,
            hidden_dim=request.shape.hidden_dim,
            chunk_size=request.shape.chunk_size,
            rank=request.shape.rank,
            layer_set=PREFILL_LAYER_SET,
        )
        return Event(request.id, request.backend, shape, Effect.READ, versions[request.id],
                     clock, request.placement, 0)
    effect = Effect.WRITE if request.tail.is_full else Effect.READ
    return Event(request.id, request.backend, request.shape, effect, versions[request.id],
                 clock, request.placement, request.position + 1)


def _age_order(e: Event) -> tuple[int, OwnerId]:
    return (e.ready_step, e.request)


def plan_groups(
    events: Iterable[Event],
    config: PlannerConfig,
    versions: Mapping[OwnerId, int],
    clock: int,
) -> PlanResult:
    """Partition ready events into legal groups; see the module docstring."""
    result = PlanResult()
    buckets: dict[CompatKey, list[Event]] = defaultdict(list)
    seen: set[OwnerId] = set()
    for e in events:
        if e.request in seen:
            raise ValueError(f"request {e.request!r} has more than one ready event")
        seen.add(e.request)
        if e.ready_step > clock:
            raise ValueError(f"event for {e.request!r} is ready in the future ({e.ready_step} > {clock})")
        if e.expected_version != versions.get(e.request):
            result.rejected.append(e)
            continue
        buckets[e.key].append(e)

    for key in sorted(buckets):
        bucket = sorted(buckets[key], key=_age_order)
        if not config.batches(key):
            result.groups.extend(Group.of([e], clock) for e in bucket)
            continue
        b = config.target_batch
        while len(bucket) >= b:
            result.groups.append(Group.of(bucket[:b], clock))
            bucket = bucket[b:]
        if bucket and clock - bucket[0].ready_step >= config.wait_budget:
            result.groups.append(Group.of(bucket, clock))
            bucket = []
        result.pending.extend(bucket)
    return result


def legal_groups(
    events: Iterable[Event],
    config: PlannerConfig,
    versions: Mapping[OwnerId, int],
    clock: int,
) -> list[Group]:
    return plan_groups(events, config, versions, clock).groups


class Planner:
    """Holds pending buckets across planner steps."""

    def __init__(self, config: PlannerConfig) -> None:
        self.config = config
        self.pending: list[Event] = []

    def submit(self, events: Iterable[Event]) -> None:
        self.pending.extend(events)

    def step(self, versions: Mapping[OwnerId, int], clock: int) -> PlanResult:
        result = plan_groups(self.pending, self.config, versions, clock)
        self.pending = result.pending
        return result

    def __len__(self) -> int:
        return len(self.pending)


def validate_group(group: Group, versions: Mapping[OwnerId, int]) -> Optional[Violation]:
    """First legality violation in ``group``, or ``None`` if it may execute."""
    if not group.members:
        return Violation("empty-group", "group has no members")
    if len(group.owner_map) != len(group.members):
        return Violation("owner-map", f"owner map has {len(group.owner_map)} slots for {len(group.members)} members")
    for slot, e in enumerate(group.members):
        if e.key != group.key:
            return Violation("key-mismatch", f"slot {slot} key {e.key} != group key {group.key}", e.request)
    seen: set[OwnerId] = set()
    for slot, (owner, e) in enumerate(zip(group.owner_map, group.members)):
        if owner != e.request:
            return Violation("owner-map", f"slot {slot} maps to {owner!r} but carries {e.request!r}", owner)
        if owner in seen:
            return Violation("owner-map", f"owner {owner!r} appears in more than one slot", owner)
        seen.add(owner)
    for e in group.members:
        current = versions.get(e.request)
        if current is None:
            return Violation("unknown-owner", f"owner {e.request!r} is not registered", e.request)
        if e.expected_version != current:
            return Violation(
                "version", f"owner {e.request!r} expected v={e.expected_version} but committed v={current}", e.request
            )
    return None
