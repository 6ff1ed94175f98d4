"""RunReport serialization. Output is canonical JSON so identical runs give identical bytes."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from tttserve.engine import RunReport

FORMAT_VERSION = 1

PATTERN_NOTES = {
    "bursty-update": "seeded per-stream tail offsets in [0, chunk); one plausible bursty construction",
}


def report_to_dict(
    report: RunReport,
    *,
    trace: Optional[str] = None,
    speedup_vs_serial: Optional[float] = None,
    contract=None,
    stress=None,
) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "mode": report.mode,
        "trace": trace,
        "seed": report.seed,
        "planner": {
            "target_batch": report.config.target_batch,
            "wait_budget": report.config.wait_budget,
            "mode": report.config.mode.value,
        },
        "cost": report.cost.to_dict(),
        "streams": report.streams,
        "generated_tokens": report.generated_tokens,
        "iterations": report.iterations,
        "total_time": report.total_time,
        "throughput": report.throughput,
        "speedup_vs_serial": speedup_vs_serial,
        "census": {k: report.census.get(k, 0) for k in ("prefill", "read", "write")},
        "group_sizes": {
            label: {str(size): n for size, n in sorted(sizes.items())}
            for label, sizes in sorted(report.group_sizes.items())
        },
        "waits": {str(w): n for w, n in sorted(report.waits.items())},
        "max_wait": report.max_wait,
        "revalidations": report.revalidations,
        "rejected_groups": report.rejected_groups,
        "failed_groups": report.failed_groups,
        "fallback_steps": report.fallback_steps,
        "requests": {
            owner: {
                "output_digest": lg.output_digest(),
                "write_positions": lg.write_positions,
                "final_version": lg.final_version,
                "final_payload": lg.final_payload,
            }
            for owner, lg in sorted(report.logs.items())
        },
        "invariants": dict(sorted(report.invariants.items())),
        "violations": report.violations,
        "injection": report.injection.to_dict() if report.injection else None,
    }
    if trace in PATTERN_NOTES:
        doc["trace_note"] = PATTERN_NOTES[trace]
    if contract is not None:
        doc["contract"] = [v.to_dict() for v in contract]
    if stress is not None:
        doc["stress"] = [s.to_dict() for s in stress]
    return doc


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_report(doc: dict, path: str | Path) -> None:
    Path(path).write_text(dumps_report(doc))


def load_report(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported report format_version {doc.get('format_version')!r}")
    return doc
