"""Command line entry point: ``tttserve {run,verify,stress,bench,gen-trace}``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional

from tttserve.backends import BackendType
from tttserve.costmodel import CostModel
from tttserve.errors import TTTServeError
from tttserve.executor import Scenario
from tttserve.harness import report as reportio
from tttserve.harness.contract import all_pass
from tttserve.harness.runs import RUN_MODES, bench_ladder, build_trace, ladder_is_monotone, run_mode, verify
from tttserve.harness.stress import DEFAULT_TARGETS, stress_suite
from tttserve.harness.trace import dumps_trace

COST_FLAGS = {
    "cost_launch": "t_launch",
    "cost_read": "t_read_member",
    "cost_write": "t_write_member",
    "cost_commit": "t_commit",
    "cost_prefill": "t_prefill_unit",
    "cost_plan": "t_plan",
    "replicas": "replica_cap",
}


def _trace_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", default="uniform",
                   help="uniform | bursty-update | all-update | uniform-16k | path to a .jsonl trace")
    p.add_argument("--streams", type=int)
    p.add_argument("--prompt", type=int)
    p.add_argument("--decode", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--backend", default="fast-weight", type=BackendType.parse,
                   help="fast-weight | delta-adapter")
    p.add_argument("--seed", type=int, default=0)


def _planner_args(p: argparse.ArgumentParser, modes: bool = True) -> None:
    if modes:
        p.add_argument("--mode", default="full", choices=RUN_MODES)
    p.add_argument("--batch", type=int, default=8, help="target batch size")
    p.add_argument("--wait", type=int, default=4, help="wait budget in decode steps")


def _cost_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cost-config", help="JSON file with cost model fields")
    p.add_argument("--cost-launch", type=float)
    p.add_argument("--cost-read", type=float)
    p.add_argument("--cost-write", type=float)
    p.add_argument("--cost-commit", type=float)
    p.add_argument("--cost-prefill", type=float)
    p.add_argument("--cost-plan", type=float)
    p.add_argument("--replicas", type=int, help="replica count for the replicas baseline")


def _cost(args) -> CostModel:
    overrides = {field: getattr(args, flag) for flag, field in COST_FLAGS.items()}
    if args.cost_config:
        return CostModel.from_file(args.cost_config, **overrides)
    return CostModel(**{k: v for k, v in overrides.items() if v is not None})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tttserve", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one trace and write a report")
    _trace_args(p), _planner_args(p), _cost_args(p)
    p.add_argument("--inject", type=Scenario.parse, help="arm one failure scenario")
    p.add_argument("--parallel", action="store_true", help="run disjoint groups on a thread pool")
    p.add_argument("--report")

    p = sub.add_parser("verify", help="run, then compare against the sequential oracle")
    _trace_args(p), _planner_args(p), _cost_args(p)
    p.add_argument("--inject", type=Scenario.parse)
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--report")

    p = sub.add_parser("stress", help="injected-failure suite")
    _trace_args(p), _planner_args(p, modes=False)
    p.add_argument("--no-rollback", action="store_true", help="negative control: disable rollback")
    p.add_argument("--report")

    p = sub.add_parser("bench", help="serial / replicas / phase-grouping / full ladder")
    _trace_args(p), _planner_args(p, modes=False), _cost_args(p)

    p = sub.add_parser("gen-trace", help="emit a trace file")
    _trace_args(p)
    p.add_argument("--out", help="output path (default: stdout)")
    return parser


def _summary(doc: dict) -> str:
    c = doc["census"]
    line = (f"mode={doc['mode']} trace={doc['trace']} throughput={doc['throughput']:.4f} tok/unit "
            f"time={doc['total_time']:.3f} census(prefill={c['prefill']} read={c['read']} write={c['write']}) "
            f"max_wait={doc['max_wait']}")
    if doc.get("speedup_vs_serial") is not None:
        line += f" speedup={doc['speedup_vs_serial']:.3f}x"
    return line


def _run_or_verify(args, check: bool) -> int:
    label, trace = build_trace(args.trace, streams=args.streams, prompt=args.prompt, decode=args.decode,
                               chunk=args.chunk, backend=args.backend, seed=args.seed)
    cost = _cost(args)
    inject = DEFAULT_TARGETS[args.inject] if args.inject else None
    kwargs = dict(batch=args.batch, wait=args.wait, cost=cost, seed=args.seed, inject=inject,
                  parallel=args.parallel)
    if check:
        report, verdicts = verify(trace, args.mode, **kwargs)
    else:
        report, verdicts = run_mode(trace, args.mode, **kwargs), None
    serial = report if args.mode == "serial" else run_mode(trace, "serial", cost=cost, seed=args.seed)
    doc = reportio.report_to_dict(report, trace=label, speedup_vs_serial=report.throughput / serial.throughput,
                                  contract=verdicts)
    if args.report:
        reportio.write_report(doc, args.report)
    print(_summary(doc))
    ok = all(report.invariants.values())
    for name, passed in sorted(report.invariants.items()):
        if not passed:
            print(f"invariant {name}: FAIL")
    if verdicts is not None:
        for v in verdicts:
            print(v)
        ok = ok and all_pass(verdicts)
    return 0 if ok else 1


def _stress(args) -> int:
    _, trace = build_trace(args.trace, streams=args.streams, prompt=args.prompt, decode=args.decode,
                           chunk=args.chunk, backend=args.backend, seed=args.seed)
    from tttserve.planner import Mode, PlannerConfig

    cfg = PlannerConfig(target_batch=args.batch, wait_budget=args.wait, mode=Mode.FULL)
    results = stress_suite(trace, args.seed, cfg, rollback_enabled=not args.no_rollback)
    for r in results:
        print(r)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} pass")
    if args.report:
        reportio.write_report({"format_version": reportio.FORMAT_VERSION, "stress": [r.to_dict() for r in results]},
                              args.report)
    return 0 if passed == len(results) else 1


def _bench(args) -> int:
    label, trace = build_trace(args.trace, streams=args.streams, prompt=args.prompt, decode=args.decode,
                               chunk=args.chunk, backend=args.backend, seed=args.seed)
    rows = bench_ladder(trace, batch=args.batch, wait=args.wait, cost=_cost(args), seed=args.seed)
    print(f"trace={label}")
    print(f"{'system':<16}{'throughput':>14}{'sim time':>14}{'vs serial':>12}")
    for r in rows:
        print(f"{r.name:<16}{r.throughput:>14.4f}{r.total_time:>14.3f}{r.speedup:>11.2f}x")
    ok = ladder_is_monotone(rows)
    print("ladder monotone" if ok else "ladder NOT monotone")
    return 0 if ok else 1


def _gen_trace(args) -> int:
    _, trace = build_trace(args.trace, streams=args.streams, prompt=args.prompt, decode=args.decode,
                           chunk=args.chunk, backend=args.backend, seed=args.seed)
    text = dumps_trace(trace)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "run": lambda a: _run_or_verify(a, check=False),
        "verify": lambda a: _run_or_verify(a, check=True),
        "stress": _stress,
        "bench": _bench,
        "gen-trace": _gen_trace,
    }
    try:
        return handlers[args.command](args)
    except (TTTServeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


cli = main

if __name__ == "__main__":
    sys.exit(main())
