"""Per-request step logs produced by both the engine and the sequential oracle."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StepRecord:
    position: int
    effect: str
    version_before: int
    version_after: int
    # digest of the committed payload the step read
    state_digest: str
    tail_len: int
    kv: int


@dataclass
class RequestLog:
    owner: str
    prompt_len: int
    steps: list[StepRecord] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    # (version, payload digest) for every commit, in order
    commits: list[tuple[int, str]] = field(default_factory=list)
    final_version: int = 0
    final_payload: list[float] = field(default_factory=list)
    # planner step at which the prefill event became ready (engine runs only)
    admitted_step: int | None = None

    @property
    def write_positions(self) -> list[int]:
        return [s.position for s in self.steps if s.effect == "write"]

    def output_digest(self) -> str:
        return output_digest(self.outputs)


def output_digest(outputs: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for y in outputs:
        h.update(np.asarray(y, dtype="<f8").tobytes())
    return h.hexdigest()
