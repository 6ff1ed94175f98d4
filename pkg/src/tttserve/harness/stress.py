"""State-contract stress: one injected failure per run, each checked against the oracle."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

from tttserve.backends import BackendType
from tttserve.engine import Engine, RunReport, StreamSpec
from tttserve.errors import TTTServeError
from tttserve.executor import FailureInjector, FailureSpec, Scenario
from tttserve.harness.contract import Verdict, all_pass, compare_contract
from tttserve.harness.oracle import OracleRecord, sequential_oracle
from tttserve.harness.trace import TraceSpec, generate_trace
from tttserve.planner import Mode, PlannerConfig

# Where each scenario strikes on the default uniform trace.
DEFAULT_TARGETS: dict[Scenario, FailureSpec] = {
    # 4th commit of the first boundary write group
    Scenario.MID_GROUP_WRITE_FAIL: FailureSpec(Scenario.MID_GROUP_WRITE_FAIL, group_index=0, slot=3),
    # iteration ~200, after the first boundary
    Scenario.VERSION_MISMATCH: FailureSpec(Scenario.VERSION_MISMATCH, group_index=200, slot=2),
    Scenario.OWNER_MAP_COLLISION: FailureSpec(Scenario.OWNER_MAP_COLLISION, group_index=10, slot=1),
    # first read group whose members have committed at least once
    Scenario.STALE_READ_ATTEMPT: FailureSpec(Scenario.STALE_READ_ATTEMPT, group_index=0, slot=5),
    # update-phase failure on the last member of the third write group
    Scenario.ROLLBACK_RETRY: FailureSpec(Scenario.ROLLBACK_RETRY, group_index=2, slot=7),
}


@dataclass
class ScenarioVerdict:
    scenario: str
    passed: bool
    fired: bool
    target: str = ""
    recovery: str = ""
    contract: list[Verdict] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "fired": self.fired,
            "target": self.target,
            "recovery": self.recovery,
            "contract": [v.to_dict() for v in self.contract],
            "error": self.error,
        }

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        why = self.error or ("; ".join(str(v) for v in self.contract if not v.passed)) or ""
        return f"{self.scenario:<22} {status}  target={self.target or '-'}  recovery={self.recovery or '-'}" + (
            f"  [{why}]" if not self.passed and why else "")


def run_scenario(
    spec: FailureSpec,
    trace: Sequence[StreamSpec],
    seed: int,
    config: PlannerConfig,
    oracle: OracleRecord,
    rollback_enabled: bool = True,
    parallel: bool = False,
) -> tuple[ScenarioVerdict, Optional[RunReport]]:
    injector = FailureInjector(spec)
    engine = Engine(config, seed=seed, injector=injector, rollback_enabled=rollback_enabled, parallel=parallel)
    name = spec.scenario.value
    try:
        report = engine.run(list(trace))
    except TTTServeError as exc:
        rec = injector.record
        return ScenarioVerdict(name, False, injector.fired, rec.target if rec else "",
                               rec.recovery if rec else "", error=f"{type(exc).__name__}: {exc}"), None
    verdicts = compare_contract(report, oracle)
    rec = report.injection
    ok = injector.fired and all_pass(verdicts) and all(report.invariants.values())
    err = None if injector.fired else "scenario never fired"
    if injector.fired and not all(report.invariants.values()):
        err = "; ".join(report.violations[:3])
    return ScenarioVerdict(name, ok, injector.fired, rec.target if rec else "", rec.recovery if rec else "",
                           verdicts, err), report


def stress_suite(
    trace: Optional[Sequence[StreamSpec]] = None,
    seed: int = 0,
    config: Optional[PlannerConfig] = None,
    backend: BackendType = BackendType.FAST_WEIGHT,
    rollback_enabled: bool = True,
    targets: Optional[dict[Scenario, FailureSpec]] = None,
    parallel: bool = False,
) -> list[ScenarioVerdict]:
    """Run all five scenarios on the (default uniform) trace in Full mode."""
    if trace is None:
        trace = generate_trace(TraceSpec(backend=backend, seed=seed))
    config = config or PlannerConfig(target_batch=8, wait_budget=4, mode=Mode.FULL)
    oracle = sequential_oracle(trace, seed)
    targets = {**DEFAULT_TARGETS, **(targets or {})}
    return [
        run_scenario(targets[s], trace, seed, config, oracle, rollback_enabled, parallel)[0]
        for s in Scenario
    ]
