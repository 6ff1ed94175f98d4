import json

import numpy as np
import pytest

from conftest import small_trace
from tttserve import backends
from tttserve.backends import ETA, BackendType
from tttserve.engine import Engine, StreamSpec, run_replicas
from tttserve.errors import TraceError
from tttserve.executor import FailureSpec, Scenario
from tttserve.harness import cli
from tttserve.harness.contract import CLAUSES, all_pass, compare_contract
from tttserve.harness.oracle import sequential_oracle
from tttserve.harness.report import load_report
from tttserve.harness.runs import build_trace
from tttserve.harness.stress import stress_suite
from tttserve.harness.trace import LONG_PROMPT, Pattern, TraceSpec, generate_trace, read_trace, write_trace
from tttserve.planner import Mode, PlannerConfig


def test_uniform_default_shape():
    trace = generate_trace(TraceSpec())
    assert len(trace) == 8
    assert {(s.prompt_len, s.decode_len, s.chunk, s.tail_offset) for s in trace} == {(4096, 512, 128, 0)}


def test_all_update_and_long_prompt_shapes():
    assert {s.chunk for s in generate_trace(TraceSpec(pattern=Pattern.ALL_UPDATE))} == {1}
    long = generate_trace(TraceSpec(**LONG_PROMPT))
    assert len(long) == 7 and {(s.prompt_len, s.decode_len) for s in long} == {(16384, 512)}
    label, trace = build_trace("uniform-16k")
    assert label == "uniform" and len(trace) == 7


def test_bursty_offsets_seeded():
    a = generate_trace(TraceSpec(pattern=Pattern.BURSTY_UPDATE, seed=1))
    b = generate_trace(TraceSpec(pattern=Pattern.BURSTY_UPDATE, seed=1))
    c = generate_trace(TraceSpec(pattern=Pattern.BURSTY_UPDATE, seed=2))
    assert a == b and a != c
    assert all(0 <= s.tail_offset < 128 for s in a) and len({s.tail_offset for s in a}) > 1


def test_chunk_longer_than_decode_warns():
    with pytest.warns(UserWarning):
        generate_trace(TraceSpec(decode_len=64, chunk=128))


def test_invalid_trace_spec():
    with pytest.raises(TraceError):
        generate_trace(TraceSpec(streams=0))
    with pytest.raises(TraceError):
        generate_trace(TraceSpec(streams=2, arrival=[0]))


def test_trace_file_roundtrip(tmp_path):
    trace = generate_trace(TraceSpec(streams=3, pattern=Pattern.BURSTY_UPDATE,
                                     backends=[BackendType.FAST_WEIGHT, BackendType.DELTA_ADAPTER,
                                               BackendType.FAST_WEIGHT]))
    path = tmp_path / "t.jsonl"
    write_trace(trace, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[1])["backend"] == "delta-adapter"
    assert read_trace(path) == trace
    path.write_text("{not json\n")
    with pytest.raises(TraceError):
        read_trace(path)


def test_oracle_write_count():
    oracle = sequential_oracle(small_trace(streams=2, decode=24, chunk=8), 0)
    assert {o: len(lg.commits) for o, lg in oracle.logs.items()} == {"r1": 3, "r2": 3}
    assert [v for _, v in oracle.write_log] == [1, 2, 3, 1, 2, 3]


def test_oracle_two_boundary_fast_weights_by_hand():
    spec = StreamSpec("r1", prompt_len=5, decode_len=6, chunk=3, dim=4)
    log = sequential_oracle([spec], 7).logs["r1"]
    toks = [backends.gen_token("r1", 5 + p - 1, 7, 4) for p in range(1, 7)]
    m1 = (toks[0] + toks[1] + toks[2]) / 3
    m2 = (toks[3] + toks[4] + toks[5]) / 3
    by_hand = ETA * np.outer(m1, m1) + ETA * np.outer(m2, m2)
    assert np.asarray(log.final_payload).tobytes() == by_hand.ravel().tobytes()
    assert log.final_version == 2


def test_oracle_matches_serial_engine():
    trace = small_trace(backend=BackendType.DELTA_ADAPTER)
    rep = Engine(PlannerConfig(mode=Mode.SERIAL)).run(trace)
    assert all_pass(compare_contract(rep, sequential_oracle(trace, 0)))


def test_evidence_conservation():
    """Tokens summarized by all commits are exactly the decode tokens, in order."""
    spec = StreamSpec("r1", prompt_len=4, decode_len=12, chunk=4, dim=3)
    tokens = [backends.gen_token("r1", 4 + p - 1, 0, 3) for p in range(1, 13)]
    w = np.zeros((3, 3))
    for k in range(3):
        m = backends.make_evidence(backends.TailBuffer(4, tokens[4 * k:4 * k + 4])).mean
        w = w + ETA * np.outer(m, m)
    final = Engine(PlannerConfig(4, 0)).run([spec]).logs["r1"].final_payload
    assert np.asarray(final).tobytes() == w.ravel().tobytes()


@pytest.fixture
def clean_run():
    trace = small_trace()
    rep = Engine(PlannerConfig(4, 2)).run(trace)
    return rep, sequential_oracle(trace, 0)


def test_contract_all_pass(clean_run):
    verdicts = compare_contract(*clean_run)
    assert [v.clause for v in verdicts] == list(CLAUSES) and all_pass(verdicts)


def test_contract_detects_payload_corruption(clean_run):
    rep, oracle = clean_run
    flat = np.asarray(rep.logs["r3"].final_payload)
    bits = flat.view(np.uint64).copy()
    bits[5] ^= 1
    rep.logs["r3"].final_payload = bits.view(np.float64).tolist()
    verdicts = {v.clause: v for v in compare_contract(rep, oracle)}
    bad = verdicts["owner_local_commit"]
    assert not bad.passed and bad.owner == "r3" and "element 5" in bad.detail
    assert verdicts["request_output_mapping"].passed


def test_contract_detects_swapped_outputs(clean_run):
    rep, oracle = clean_run
    rep.logs["r1"].outputs, rep.logs["r2"].outputs = rep.logs["r2"].outputs, rep.logs["r1"].outputs
    bad = compare_contract(rep, oracle)[0]
    assert bad.clause == "request_output_mapping" and not bad.passed
    assert bad.owner == "r1" and bad.step == 1


def test_contract_detects_version_and_tail_drift(clean_run):
    from dataclasses import replace

    rep, oracle = clean_run
    steps = rep.logs["r2"].steps
    steps[4] = replace(steps[4], version_after=steps[4].version_before + 1, tail_len=0)
    verdicts = {v.clause: v for v in compare_contract(rep, oracle)}
    assert not verdicts["read_step_immutability"].passed
    assert not verdicts["version_progression"].passed
    assert verdicts["version_progression"].step == 5
    assert not verdicts["tail_cache_consistency"].passed


def test_replicas_equivalent_to_oracle():
    trace = small_trace(streams=5)
    rep = run_replicas(trace)
    assert rep.mode == "replicas" and set(rep.logs) == {f"r{i}" for i in range(1, 6)}
    assert all_pass(compare_contract(rep, sequential_oracle(trace, 0)))


def test_stress_suite_small_trace_each_scenario_named():
    trace = generate_trace(TraceSpec(streams=8, prompt_len=16, decode_len=48, chunk=8))
    results = stress_suite(trace, seed=0, targets={
        Scenario.VERSION_MISMATCH: FailureSpec(Scenario.VERSION_MISMATCH, group_index=20, slot=2),
        Scenario.ROLLBACK_RETRY: FailureSpec(Scenario.ROLLBACK_RETRY, group_index=2, slot=7),
    })
    assert [r.scenario for r in results] == [s.value for s in Scenario]
    for r in results:
        assert r.passed, str(r)
        assert r.target and r.recovery


def test_cli_run_verify_gen_trace(tmp_path, capsys):
    report = tmp_path / "r.json"
    assert cli.main(["verify", "--streams", "4", "--prompt", "32", "--decode", "32", "--chunk", "8",
                     "--report", str(report)]) == 0
    doc = load_report(report)
    assert doc["format_version"] == 1 and doc["census"]["write"] == 16
    assert all(v["passed"] for v in doc["contract"])
    out = tmp_path / "t.jsonl"
    assert cli.main(["gen-trace", "--trace", "bursty-update", "--streams", "3", "--out", str(out)]) == 0
    assert len(read_trace(out)) == 3
    assert cli.main(["run", "--trace", str(out), "--mode", "phase-grouping", "--decode", "5"]) == 0
    assert cli.main(["run", "--trace", "all-update", "--streams", "2", "--decode", "16", "--mode", "full",
                     "--inject", "rollback-retry"]) == 0
    assert "write=32" in capsys.readouterr().out


def test_cli_bench_and_stress(capsys):
    assert cli.main(["bench", "--streams", "8", "--prompt", "64", "--decode", "64", "--chunk", "16"]) == 0
    out = capsys.readouterr().out
    assert out.index("serial") < out.index("replicas") < out.index("phase-grouping") < out.index("full")
    assert "ladder monotone" in out
    assert cli.main(["stress", "--streams", "8", "--prompt", "16", "--decode", "512", "--chunk", "128"]) == 0
    assert "5/5 pass" in capsys.readouterr().out


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit):
        cli.main(["run", "--mode", "warp"])
    assert cli.main(["run", "--trace", "/nonexistent/trace.jsonl"]) == 2
    assert cli.main(["run", "--cost-launch", "0"]) == 2


def test_cost_flags_reach_report(tmp_path):
    report = tmp_path / "r.json"
    cli.main(["run", "--streams", "2", "--decode", "8", "--chunk", "4", "--cost-launch", "3.5",
              "--replicas", "2", "--report", str(report)])
    doc = load_report(report)
    assert doc["cost"]["t_launch"] == 3.5 and doc["cost"]["replica_cap"] == 2


def test_report_bytes_deterministic(tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for path in paths:
        cli.main(["verify", "--trace", "bursty-update", "--streams", "4", "--prompt", "64", "--decode", "40",
                  "--chunk", "16", "--seed", "3", "--report", str(path)])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    doc = load_report(paths[0])
    assert doc["trace_note"].startswith("seeded per-stream tail offsets")
    paths[0].write_text(json.dumps({"format_version": 99}))
    with pytest.raises(ValueError):
        load_report(paths[0])
