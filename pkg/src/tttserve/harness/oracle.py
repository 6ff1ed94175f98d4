"""Brute-force sequential reference.

Runs each request alone, one decode step at a time, straight on the backend
functions. It deliberately shares nothing with the state table, planner,
executor or engine; only the backend math and the token generator are common,
since those define the behavior every schedule must reproduce.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

from tttserve import backends
from tttserve.engine import StreamSpec
from tttserve.records import RequestLog, StepRecord


@dataclass
class OracleRecord:
    logs: dict[str, RequestLog] = field(default_factory=dict)
    # every (owner, version) commit in execution order
    write_log: list[tuple[str, int]] = field(default_factory=list)


def run_stream(spec: StreamSpec, seed: int) -> RequestLog:
    shape = spec.shape
    payload = backends.init_payload(spec.backend, shape, spec.stream_id, seed)
    version = 0
    tail = backends.TailBuffer(spec.chunk)
    for pos in range(spec.prompt_len - spec.tail_offset, spec.prompt_len):
        tail.tokens.append(backends.gen_token(spec.stream_id, pos, seed, spec.dim))
    log = RequestLog(spec.stream_id, spec.prompt_len)
    kv = spec.prompt_len
    for p in range(1, spec.decode_len + 1):
        x = backends.gen_token(spec.stream_id, spec.prompt_len + p - 1, seed, spec.dim)
        tail.tokens.append(x)
        seen = backends.payload_digest(payload)
        y = backends.apply_read(spec.backend, payload, x)
        before = version
        if len(tail.tokens) == spec.chunk:
            payload = backends.boundary_update(spec.backend, payload, backends.make_evidence(tail))
            version += 1
            tail.tokens = []
            log.commits.append((version, backends.payload_digest(payload)))
            effect = "write"
        else:
            effect = "read"
        kv += 1
        log.outputs.append(y)
        log.steps.append(StepRecord(p, effect, before, version, seen, len(tail.tokens), kv))
    log.final_version = version
    log.final_payload = payload.to_flat()
    return log


def sequential_oracle(trace: Sequence[StreamSpec], seed: int) -> OracleRecord:
    record = OracleRecord()
    for spec in sorted(trace, key=lambda s: s.stream_id):
        lg = run_stream(spec, seed)
        record.logs[spec.stream_id] = lg
        record.write_log.extend((spec.stream_id, v) for v, _ in lg.commits)
    return record
