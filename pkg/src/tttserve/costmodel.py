"""Deterministic timing model for the simulated serving loop.

Durations are abstract time units. The fixed launch cost is what batching
amortizes; per-member costs scale with group size. Planner waiting is counted
in iterations, so cost parameters never influence scheduling decisions; an
iteration that issues nothing still pays ``t_plan``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from tttserve.planner import Effect, Group


@dataclass(frozen=True)
class CostModel:
    t_launch: float = 1.0
    t_read_member: float = 0.1
    t_write_member: float = 0.2
    t_commit: float = 0.05
    t_prefill_unit: float = 0.002
    t_plan: float = 0.01
    replica_cap: int = 3

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.t_launch <= 0:
            raise ValueError("t_launch must be positive")
        if self.replica_cap < 1:
            raise ValueError("replica_cap must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "CostModel":
        """Load from a JSON object; keys are field names, unknown keys rejected."""
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown cost fields: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


class Clock:
    def __init__(self) -> None:
        self.now = 0.0

    def advance(self, duration: float) -> float:
        if duration < 0:
            raise ValueError("clock cannot run backwards")
        self.now += duration
        return self.now


def group_cost(group: Group, model: CostModel, prompt_lens: dict[str, int] | None = None) -> float:
    """Duration of one issued group.

    Prefill groups need ``prompt_lens`` (owner -> prompt tokens).
    """
    n = len(group.members)
    if n < 1:
        raise ValueError("groups have at least one member")
    if group.key.is_prefill:
        if prompt_lens is None:
            raise ValueError("prefill groups need prompt lengths")
        tokens = sum(prompt_lens[e.request] for e in group.members)
        return model.t_launch + tokens * model.t_prefill_unit
    if group.effect is Effect.WRITE:
        return model.t_launch + n * (model.t_write_member + model.t_commit)
    return model.t_launch + n * model.t_read_member


def aggregate_throughput(report) -> float:
    """Generated tokens per simulated time unit, scheduler time included."""
    if report.generated_tokens == 0 or report.total_time <= 0:
        raise ZeroDivisionError("empty run has no throughput")
    return report.generated_tokens / report.total_time


def uniform_run_time(streams: int, prompt_len: int, decode_len: int, chunk: int,
                     model: CostModel, batched_reads: bool, batched_writes: bool) -> float:
    """Closed-form simulated time of an aligned (uniform) trace.

    Assumes every stream arrives at step 0 and that groups issue on the step
    their events become ready: ``streams`` equals the target batch, or the
    wait budget is zero. Each decode iteration then issues one group per
    effect (batched) or one singleton per stream (serial).
    """
    writes = decode_len // chunk
    reads = decode_len - writes
    iterations = 1 + decode_len
    t = iterations * model.t_plan
    if batched_reads:
        t += model.t_launch + streams * prompt_len * model.t_prefill_unit
        t += reads * (model.t_launch + streams * model.t_read_member)
    else:
        t += streams * (model.t_launch + prompt_len * model.t_prefill_unit)
        t += reads * streams * (model.t_launch + model.t_read_member)
    write_member = model.t_write_member + model.t_commit
    if batched_writes:
        t += writes * (model.t_launch + streams * write_member)
    else:
        t += writes * streams * (model.t_launch + write_member)
    return t


def uniform_speedup(streams: int, prompt_len: int, decode_len: int, chunk: int, model: CostModel) -> float:
    """Predicted serial-to-full throughput ratio on the uniform trace."""
    serial = uniform_run_time(streams, prompt_len, decode_len, chunk, model, False, False)
    full = uniform_run_time(streams, prompt_len, decode_len, chunk, model, True, True)
    return serial / full
