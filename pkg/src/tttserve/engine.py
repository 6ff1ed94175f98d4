"""The serving loop.

One iteration of :meth:`Engine.run` is one decode-step opportunity for every
active request::

    admit -> expose next event -> plan -> execute groups -> return outputs
          -> commit versions -> update KV / tail metadata -> advance clock

A request has at most one outstanding event. Its decode token is generated
and staged in the tail when the step is first exposed, so a step whose token
fills the tail is the boundary write. Events rejected for a stale version are
re-extracted on the next iteration, without staging the token again.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tttserve import backends
from tttserve.backends import BackendType, ShapeClass, TailBuffer
from tttserve.costmodel import Clock, CostModel, group_cost
from tttserve.errors import DuplicateOwner, LivelockError, TraceError
from tttserve.executor import (
    FailureInjector,
    FailureSpec,
    GroupResult,
    InjectionRecord,
    describe_group,
    execute_group,
    fallback_sequential,
)
from tttserve.planner import Effect, Event, Group, Mode, Planner, PlannerConfig, extract_event, validate_group
from tttserve.records import RequestLog, StepRecord
from tttserve.state_core import OwnerId, StateTable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreamSpec:
    """One request stream of a trace."""

    stream_id: str
    arrival_step: int = 0
    prompt_len: int = 4096
    decode_len: int = 512
    chunk: int = 128
    backend: BackendType = BackendType.FAST_WEIGHT
    dim: int = backends.DEFAULT_DIM
    rank: int = backends.DEFAULT_RANK
    # carried prompt tokens already in the tail when decoding starts
    tail_offset: int = 0
    placement: str = "dev0"

    def __post_init__(self) -> None:
        if min(self.arrival_step, self.prompt_len, self.decode_len, self.tail_offset) < 0:
            raise TraceError(f"negative field in stream {self.stream_id!r}")
        if self.chunk < 1 or self.dim < 1 or self.rank < 1:
            raise TraceError(f"chunk, dim and rank must be positive in stream {self.stream_id!r}")
        if self.tail_offset >= self.chunk or self.tail_offset > self.prompt_len:
            raise TraceError(f"tail_offset {self.tail_offset} out of range in stream {self.stream_id!r}")

    @property
    def shape(self) -> ShapeClass:
        return backends.make_shape(self.backend, self.dim, self.chunk, self.rank)


def token_position(prompt_len: int, step: int) -> int:
    """Absolute token index of decode step ``step`` (1-based)."""
    return prompt_len + step - 1


class RequestPhase(enum.IntEnum):
    ADMITTED = 0
    PREFILL = 1
    DECODE = 2
    FINISHED = 3


class Request:
    def __init__(self, spec: StreamSpec, seed: int) -> None:
        self.spec = spec
        self.seed = seed
        self.phase = RequestPhase.ADMITTED
        self.kv = 0
        self.position = 0
        self.x: Optional[np.ndarray] = None
        self.tail = TailBuffer(spec.chunk)
        self.exposed = False
        self.outstanding: Optional[Event] = None
        self.log = RequestLog(spec.stream_id, spec.prompt_len)

    id = property(lambda self: self.spec.stream_id)
    backend = property(lambda self: self.spec.backend)
    shape = property(lambda self: self.spec.shape)
    placement = property(lambda self: self.spec.placement)
    decode_target = property(lambda self: self.spec.decode_len)

    @property
    def finished(self) -> bool:
        return self.phase is RequestPhase.FINISHED

    @property
    def needs_prefill(self) -> bool:
        return self.phase < RequestPhase.DECODE

    @property
    def boundary_ready(self) -> bool:
        return self.tail.is_full

    def expose(self) -> None:
        """Stage the next decode token in the tail."""
        if self.exposed:
            return
        pos = token_position(self.spec.prompt_len, self.position + 1)
        self.x = backends.gen_token(self.id, pos, self.seed, self.spec.dim)
        backends.tail_append(self.tail, self.x)
        self.exposed = True

    def __repr__(self) -> str:
        return f"Request({self.id!r}, {self.phase.name}, p={self.position}, k={self.kv}, tail={len(self.tail)})"


def admit(spec: StreamSpec, table: StateTable, seed: int) -> Request:
    if spec.stream_id in table:
        raise DuplicateOwner(f"request {spec.stream_id!r} already admitted")
    req = Request(spec, seed)
    payload = backends.init_payload(spec.backend, spec.shape, spec.stream_id, seed)
    table.register(spec.stream_id, spec.backend, payload, spec.placement, spec.shape)
    return req


def update_kv_and_tail(req: Request, event: Event, output: np.ndarray, digest: str,
                       version_before: int, version_after: int, new_payload_digest: str = "") -> None:
    """Advance one request past an executed step."""
    if event.position == 0:
        req.log.admitted_step = event.ready_step
        req.kv = req.spec.prompt_len
        carried = range(req.spec.prompt_len - req.spec.tail_offset, req.spec.prompt_len)
        for pos in carried:
            backends.tail_append(req.tail, backends.gen_token(req.id, pos, req.seed, req.spec.dim))
        req.phase = RequestPhase.DECODE if req.decode_target > 0 else RequestPhase.FINISHED
        return
    req.kv += 1
    req.position += 1
    req.exposed = False
    req.log.outputs.append(output)
    if event.effect is Effect.WRITE:
        req.tail.clear()
        req.log.commits.append((version_after, new_payload_digest))
    req.log.steps.append(StepRecord(req.position, event.effect.label, version_before, version_after,
                                    digest, len(req.tail), req.kv))
    if req.position == req.decode_target:
        req.phase = RequestPhase.FINISHED


class _Tokens:
    def __init__(self, requests: dict[OwnerId, Request]) -> None:
        self._requests = requests

    def token(self, owner: OwnerId) -> np.ndarray:
        return self._requests[owner].x

    def tail(self, owner: OwnerId) -> TailBuffer:
        return self._requests[owner].tail


INVARIANTS = (
    "phase_separation",
    "bounded_wait",
    "group_legality",
    "write_atomicity",
    "owner_isolation",
    "tail_cache_consistency",
    "version_monotonicity",
)


@dataclass
class RunReport:
    mode: str
    config: PlannerConfig
    cost: CostModel
    seed: int
    streams: int = 0
    generated_tokens: int = 0
    iterations: int = 0
    total_time: float = 0.0
    census: Counter = field(default_factory=Counter)
    group_sizes: dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))
    waits: Counter = field(default_factory=Counter)
    revalidations: int = 0
    rejected_groups: int = 0
    failed_groups: int = 0
    fallback_steps: int = 0
    logs: dict[OwnerId, RequestLog] = field(default_factory=dict)
    commit_log: list[tuple[OwnerId, int]] = field(default_factory=list)
    invariants: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(INVARIANTS, True))
    violations: list[str] = field(default_factory=list)
    injection: Optional[InjectionRecord] = None

    @property
    def throughput(self) -> float:
        if self.generated_tokens == 0 or self.total_time <= 0:
            return 0.0
        return self.generated_tokens / self.total_time

    @property
    def max_wait(self) -> int:
        return max(self.waits, default=0)

    def final_versions(self) -> dict[OwnerId, int]:
        return {o: lg.final_version for o, lg in sorted(self.logs.items())}

    def fail(self, invariant: str, detail: str) -> None:
        if self.invariants[invariant]:
            log.warning("invariant %s violated: %s", invariant, detail)
        self.invariants[invariant] = False
        self.violations.append(f"{invariant}: {detail}")


def _fingerprint(table: StateTable) -> dict[OwnerId, tuple[int, bytes]]:
    return {o: (table.record(o).version, table.record(o).payload.tobytes()) for o in table.owners()}


class Engine:
    def __init__(
        self,
        config: PlannerConfig = PlannerConfig(),
        cost: CostModel = CostModel(),
        seed: int = 0,
        injector: Optional[FailureInjector] = None,
        rollback_enabled: bool = True,
        parallel: bool = False,
        check_invariants: bool = True,
    ) -> None:
        self.config = config
        self.cost = cost
        self.seed = seed
        self.injector = injector or FailureInjector()
        self.rollback_enabled = rollback_enabled
        self.parallel = parallel
        self.check_invariants = check_invariants

    def inject_failure(self, spec: FailureSpec) -> None:
        self.injector.arm(spec)

    def run(self, trace: list[StreamSpec]) -> RunReport:
        ids = [s.stream_id for s in trace]
        if len(set(ids)) != len(ids):
            raise TraceError("duplicate stream ids in trace")
        cfg = self.config
        report = RunReport(cfg.mode.value, cfg, self.cost, self.seed, streams=len(trace))
        table = StateTable()
        planner = Planner(cfg)
        clock = Clock()
        waiting = sorted(trace, key=lambda s: (s.arrival_step, s.stream_id))
        requests: dict[OwnerId, Request] = {}
        tokens = _Tokens(requests)
        prompt_lens = {s.stream_id: s.prompt_len for s in trace}
        pool = ThreadPoolExecutor(max_workers=8) if self.parallel else None
        step = 0
        idle = 0
        try:
            while waiting or any(not r.finished for r in requests.values()):
                while waiting and waiting[0].arrival_step <= step:
                    spec = waiting.pop(0)
                    requests[spec.stream_id] = admit(spec, table, self.seed)

                fresh = []
                for req in requests.values():
                    if req.finished or req.outstanding is not None:
                        continue
                    if req.phase is RequestPhase.ADMITTED:
                        req.phase = RequestPhase.PREFILL
                    elif req.phase is RequestPhase.DECODE:
                        req.expose()
                    ev = extract_event(req, table.versions, step)
                    req.outstanding = ev
                    fresh.append(ev)
                planner.submit(self.injector.forge_events(fresh, step))

                plan = planner.step(table.versions, step)
                for ev in plan.rejected:
                    requests[ev.request].outstanding = None
                    report.revalidations += 1
                    self.injector.note_recovery("planner rejected stale event; re-extracted next iteration")

                elapsed = self.cost.t_plan
                executed = 0
                jobs = []
                for g in plan.groups:
                    self._audit_planned(g, table, step, report)
                    forged = self.injector.forge_group(g)
                    jobs.append((g, forged, self.injector.failure_point(forged)))

                before = _fingerprint(table) if self.check_invariants else None
                if pool is not None and len(jobs) > 1:
                    futures = [pool.submit(self._run_group, j, table, tokens, step, report) for j in jobs]
                    outcomes = [f.result() for f in futures]
                else:
                    outcomes = [self._run_group(j, table, tokens, step, report) for j in jobs]

                touched: set[OwnerId] = set()
                for (g, forged, _), (attempt, results) in zip(jobs, outcomes):
                    if attempt.violation is not None:
                        report.rejected_groups += 1
                        self.injector.note_recovery(
                            f"rejected pre-execution ({attempt.violation.kind}); members re-extracted")
                        for ev in g.members:
                            requests[ev.request].outstanding = None
                        continue
                    if not attempt.ok:
                        report.failed_groups += 1
                        report.fallback_steps += len(results)
                        elapsed += group_cost(g, self.cost, prompt_lens)
                        self.injector.note_recovery(
                            f"rolled back {len(g)} owners; replayed as {len(results)} serial singletons")
                    for res in results:
                        elapsed += group_cost(res.group, self.cost, prompt_lens)
                        self._apply(res, requests, table, report)
                        executed += len(res.group)
                        touched.update(res.group.owner_map)
                if before is not None:
                    after = _fingerprint(table)
                    for owner, fp in before.items():
                        if owner not in touched and owner in after and after[owner] != fp:
                            report.fail("owner_isolation", f"owner {owner} changed outside its group at iter {step}")

                for req in list(requests.values()):
                    if req.finished and req.id in table:
                        rec = table.release(req.id)
                        req.log.final_version = rec.version
                        req.log.final_payload = rec.payload.to_flat()

                clock.advance(elapsed)
                step += 1
                if executed:
                    idle = 0
                elif len(planner):
                    idle += 1
                    if idle > cfg.wait_budget + 1:
                        raise LivelockError(f"no progress for {idle} iterations with {len(planner)} pending events")
        finally:
            if pool is not None:
                pool.shutdown()

        report.iterations = step
        report.total_time = clock.now
        report.logs = {o: requests[o].log for o in sorted(requests)}
        report.generated_tokens = report.census["read"] + report.census["write"]
        report.injection = self.injector.record
        return report

    def _audit_planned(self, g: Group, table: StateTable, step: int, report: RunReport) -> None:
        if not self.check_invariants:
            return
        if len({e.effect for e in g.members}) != 1:
            report.fail("phase_separation", f"mixed effects in {describe_group(g)}")
        v = validate_group(g, table.versions)
        if v is not None:
            report.fail("group_legality", f"{describe_group(g)}: {v}")
        for e in g.members:
            wait = step - e.ready_step
            report.waits[wait] += 1
            if not 0 <= wait <= self.config.wait_budget:
                report.fail("bounded_wait", f"{e.request} waited {wait} steps")

    def _run_group(self, job, table, tokens, step, report) -> tuple[GroupResult, list[GroupResult]]:
        g, forged, fail_at = job
        before = {o: table.versions[o] for o in g.owner_map}
        attempt = execute_group(forged, table, tokens, fail_at, self.rollback_enabled)
        if attempt.violation is not None:
            return attempt, []
        if attempt.ok:
            return attempt, [attempt]
        if self.check_invariants:
            moved = [o for o in g.owner_map if table.versions[o] != before[o]]
            if moved:
                report.fail("write_atomicity", f"failed group left {moved} advanced")
        return attempt, fallback_sequential(g.members, table, tokens, step, self.rollback_enabled)

    def _apply(self, res: GroupResult, requests: dict[OwnerId, Request], table: StateTable,
               report: RunReport) -> None:
        g = res.group
        label = "prefill" if g.key.is_prefill else g.effect.label
        report.group_sizes[label][len(g)] += 1
        committed = dict(res.committed)
        if g.effect is Effect.WRITE and self.check_invariants and len(committed) != len(g):
            report.fail("write_atomicity", f"{describe_group(g)} committed {len(committed)} of {len(g)}")
        for slot, ev in enumerate(g.members):
            req = requests[ev.request]
            report.census[label] += 1
            before = ev.expected_version
            after = committed.get(ev.request, before)
            if self.check_invariants and after not in (before, before + 1):
                report.fail("version_monotonicity", f"{ev.request} jumped {before}->{after}")
            new_digest = ""
            if ev.effect is Effect.WRITE:
                report.commit_log.append((ev.request, after))
                new_digest = backends.payload_digest(table.record(ev.request).payload)
            update_kv_and_tail(req, ev, res.outputs[slot], res.state_digests[slot], before, after, new_digest)
            req.outstanding = None
            if self.check_invariants and ev.position and req.kv != req.spec.prompt_len + req.position:
                report.fail("tail_cache_consistency", f"{req.id}: k={req.kv} p={req.position}")


def run_replicas(trace: list[StreamSpec], cost: CostModel = CostModel(), seed: int = 0,
                 replica_cap: Optional[int] = None, wait_budget: int = 0) -> RunReport:
    """Baseline of ``replica_cap`` independent serial engines running side by side.

    Streams are dealt round-robin; the run takes as long as the slowest replica.
    """
    cap = replica_cap or cost.replica_cap
    ordered = sorted(trace, key=lambda s: (s.arrival_step, s.stream_id))
    parts = [ordered[i::cap] for i in range(cap)]
    cfg = PlannerConfig(target_batch=1, wait_budget=wait_budget, mode=Mode.SERIAL)
    merged = RunReport("replicas", cfg, cost, seed, streams=len(trace))
    for part in parts:
        if not part:
            continue
        rep = Engine(cfg, cost, seed).run(part)
        merged.total_time = max(merged.total_time, rep.total_time)
        merged.iterations = max(merged.iterations, rep.iterations)
        merged.generated_tokens += rep.generated_tokens
        merged.census.update(rep.census)
        for label, sizes in rep.group_sizes.items():
            merged.group_sizes[label].update(sizes)
        merged.waits.update(rep.waits)
        merged.logs.update(rep.logs)
        merged.commit_log.extend(rep.commit_log)
        for name, ok in rep.invariants.items():
            merged.invariants[name] = merged.invariants[name] and ok
        merged.violations.extend(rep.violations)
    merged.logs = dict(sorted(merged.logs.items()))
    return merged
