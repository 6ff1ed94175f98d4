"""Run helpers shared by the CLI and the tests: mode dispatch, verify, the baseline ladder."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

from tttserve.backends import BackendType
from tttserve.costmodel import CostModel
from tttserve.engine import Engine, RunReport, StreamSpec, run_replicas
from tttserve.executor import FailureInjector, FailureSpec
from tttserve.harness.contract import Verdict, compare_contract
from tttserve.harness.oracle import sequential_oracle
from tttserve.harness.trace import LONG_PROMPT, Pattern, TraceSpec, generate_trace, read_trace
from tttserve.planner import Mode, PlannerConfig

RUN_MODES = ("serial", "replicas", "phase-grouping", "full")


def build_trace(
    name: str,
    *,
    streams: Optional[int] = None,
    prompt: Optional[int] = None,
    decode: Optional[int] = None,
    chunk: Optional[int] = None,
    backend: BackendType = BackendType.FAST_WEIGHT,
    seed: int = 0,
) -> tuple[str, list[StreamSpec]]:
    """Resolve a preset pattern name (or a trace file path) to ``(label, trace)``."""
    preset = name.strip().lower()
    base: dict = {}
    if preset in ("uniform-16k", "long-prompt"):
        base, preset = dict(LONG_PROMPT), "uniform"
    try:
        pattern = Pattern.parse(preset)
    except ValueError:
        return name, read_trace(name)
    overrides = {"streams": streams, "prompt_len": prompt, "decode_len": decode, "chunk": chunk}
    base.update({k: v for k, v in overrides.items() if v is not None})
    spec = TraceSpec(pattern=pattern, backend=backend, seed=seed, **base)
    return pattern.value, generate_trace(spec)


def run_mode(
    trace: Sequence[StreamSpec],
    mode: str,
    *,
    batch: int = 8,
    wait: int = 4,
    cost: CostModel = CostModel(),
    seed: int = 0,
    inject: Optional[FailureSpec] = None,
    parallel: bool = False,
    rollback_enabled: bool = True,
) -> RunReport:
    if mode == "replicas":
        return run_replicas(list(trace), cost, seed)
    cfg = PlannerConfig(target_batch=batch, wait_budget=wait, mode=Mode.parse(mode))
    engine = Engine(cfg, cost, seed, injector=FailureInjector(inject), parallel=parallel,
                    rollback_enabled=rollback_enabled)
    return engine.run(list(trace))


def verify(trace: Sequence[StreamSpec], mode: str, **kwargs) -> tuple[RunReport, list[Verdict]]:
    report = run_mode(trace, mode, **kwargs)
    return report, compare_contract(report, sequential_oracle(trace, kwargs.get("seed", 0)))


@dataclass(frozen=True)
class LadderRow:
    name: str
    throughput: float
    total_time: float
    speedup: float


def bench_ladder(
    trace: Sequence[StreamSpec],
    *,
    batch: int = 8,
    wait: int = 4,
    cost: CostModel = CostModel(),
    seed: int = 0,
) -> list[LadderRow]:
    reports = {m: run_mode(trace, m, batch=batch, wait=wait, cost=cost, seed=seed) for m in RUN_MODES}
    base = reports["serial"].throughput
    return [LadderRow(m, r.throughput, r.total_time, r.throughput / base) for m, r in reports.items()]


def ladder_is_monotone(rows: Sequence[LadderRow]) -> bool:
    return all(a.throughput < b.throughput for a, b in zip(rows, rows[1:]))
