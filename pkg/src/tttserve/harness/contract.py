"""Clause-by-clause comparison of a run against the sequential oracle."""

from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tttserve.records import RequestLog

CLAUSES = (
    "request_output_mapping",
    "read_step_immutability",
    "write_order_and_count",
    "version_progression",
    "owner_local_commit",
    "tail_cache_consistency",
)


@dataclass(frozen=True)
class Verdict:
    clause: str
    passed: bool
    owner: Optional[str] = None
    step: Optional[int] = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"clause": self.clause, "passed": self.passed, "owner": self.owner,
                "step": self.step, "detail": self.detail}

    def __str__(self) -> str:
        if self.passed:
            return f"{self.clause}: pass"
        return f"{self.clause}: FAIL at owner={self.owner} step={self.step} ({self.detail})"


# A clause check yields (owner, step, detail) for every divergence it finds.
Divergences = Iterator[tuple[str, Optional[int], str]]


def _same_bits(a, b) -> bool:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _outputs(run: RequestLog, ref: RequestLog) -> Divergences:
    if len(run.outputs) != len(ref.outputs):
        yield run.owner, None, f"{len(run.outputs)} outputs vs oracle {len(ref.outputs)}"
        return
    for i, (y, y_ref) in enumerate(zip(run.outputs, ref.outputs), 1):
        if not _same_bits(y, y_ref):
            yield run.owner, i, "output bits differ"
            return


def _reads(run: RequestLog, ref: RequestLog) -> Divergences:
    ref_steps = {s.position: s for s in ref.steps}
    prev = None
    for s in run.steps:
        if s.effect != "read":
            prev = None
            continue
        if s.version_after != s.version_before:
            yield run.owner, s.position, f"read moved version {s.version_before}->{s.version_after}"
        elif prev is not None and prev.state_digest != s.state_digest:
            yield run.owner, s.position, "state changed between consecutive reads"
        elif s.position in ref_steps and ref_steps[s.position].state_digest != s.state_digest:
            yield run.owner, s.position, "read observed a different committed state than the oracle"
        prev = s


def _writes(run: RequestLog, ref: RequestLog) -> Divergences:
    got, want = run.write_positions, ref.write_positions
    if got != want:
        step = next((a for a, b in zip(got, want) if a != b), None)
        yield run.owner, step, f"writes at {got[:6]}... ({len(got)}) vs oracle {want[:6]}... ({len(want)})"


def _versions(run: RequestLog, ref: RequestLog) -> Divergences:
    for s, r in zip(run.steps, ref.steps):
        if (s.version_before, s.version_after) != (r.version_before, r.version_after):
            yield run.owner, s.position, (f"v {s.version_before}->{s.version_after} vs oracle "
                                          f"{r.version_before}->{r.version_after}")
            return
    if len(run.steps) != len(ref.steps):
        yield run.owner, None, f"{len(run.steps)} steps vs oracle {len(ref.steps)}"
    elif run.final_version != ref.final_version:
        yield run.owner, None, f"final v={run.final_version} vs oracle {ref.final_version}"


def _commits(run: RequestLog, ref: RequestLog) -> Divergences:
    for i, (c, r) in enumerate(zip(run.commits, ref.commits)):
        if c != r:
            yield run.owner, None, f"commit #{i + 1} {c} vs oracle {r}"
            return
    if len(run.commits) != len(ref.commits):
        yield run.owner, None, f"{len(run.commits)} commits vs oracle {len(ref.commits)}"
    elif not _same_bits(run.final_payload, ref.final_payload):
        flat, want = np.asarray(run.final_payload), np.asarray(ref.final_payload)
        idx = int(np.flatnonzero(flat.view(np.uint64) != want.view(np.uint64))[0]) if flat.shape == want.shape else -1
        yield run.owner, None, f"final payload differs at element {idx}"


def _tails(run: RequestLog, ref: RequestLog) -> Divergences:
    for s, r in zip(run.steps, ref.steps):
        if s.kv != run.prompt_len + s.position:
            yield run.owner, s.position, f"k={s.kv} but prompt+p={run.prompt_len + s.position}"
            return
        if (s.tail_len, s.kv) != (r.tail_len, r.kv):
            yield run.owner, s.position, f"tail/kv {(s.tail_len, s.kv)} vs oracle {(r.tail_len, r.kv)}"
            return


_CHECKS: dict[str, Callable[[RequestLog, RequestLog], Divergences]] = {
    "request_output_mapping": _outputs,
    "read_step_immutability": _reads,
    "write_order_and_count": _writes,
    "version_progression": _versions,
    "owner_local_commit": _commits,
    "tail_cache_consistency": _tails,
}


def compare_contract(run_logs, oracle) -> list[Verdict]:
    """Six verdicts, one per contract clause, in ``CLAUSES`` order.

    ``run_logs`` is a RunReport (or a mapping owner -> RequestLog) and
    ``oracle`` an OracleRecord (or the same kind of mapping).
    """
    run = getattr(run_logs, "logs", run_logs)
    ref = getattr(oracle, "logs", oracle)
    verdicts = []
    for clause in CLAUSES:
        found = None
        if set(run) != set(ref):
            missing = sorted(set(ref) ^ set(run))
            found = (missing[0], None, f"owner sets differ: {missing}")
        else:
            for owner in sorted(run):
                found = next(_CHECKS[clause](run[owner], ref[owner]), None)
                if found is not None:
                    break
        if found is None:
            verdicts.append(Verdict(clause, True))
        else:
            verdicts.append(Verdict(clause, False, *found))
    return verdicts


def all_pass(verdicts: list[Verdict]) -> bool:
    return all(v.passed for v in verdicts)
