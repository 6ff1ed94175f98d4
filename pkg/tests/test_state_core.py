import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import Bundle, RuleBasedStateMachine, invariant, precondition, rule

from tttserve.backends import BackendType, FastWeightPayload, TailBuffer, make_evidence
from tttserve.errors import DoubleWrite, DuplicateOwner, NoCheckpoint, NoDirtyCandidate, UnknownOwner
from tttserve.state_core import StateTable, ViewMode

FW = BackendType.FAST_WEIGHT


def evidence(value=1.0, d=2):
    return make_evidence(TailBuffer(1, [np.full(d, value)]))


def table_with(*owners, d=2):
    t = StateTable()
    for o in owners:
        t.register(o, FW, FastWeightPayload(np.zeros((d, d))), "slot0")
    return t


def write(t, owner, value=1.0):
    t.populate(t.write_view(owner, evidence(value)))
    return t.commit(owner)


def test_register_starts_at_zero():
    t = StateTable()
    rec = t.register("r1", FW, FastWeightPayload(np.zeros((2, 2))), "slot0")
    assert rec.version == 0 and t.versions["r1"] == 0


def test_register_duplicate_rejected():
    t = table_with("r1")
    with pytest.raises(DuplicateOwner):
        t.register("r1", FW, FastWeightPayload(np.zeros((2, 2))), "slot0")


def test_register_eight():
    t = table_with(*[f"r{i}" for i in range(1, 9)])
    assert dict(t.versions) == {f"r{i}": 0 for i in range(1, 9)}


def test_released_ids_never_reused():
    t = table_with("r1")
    t.release("r1")
    assert "r1" not in t.versions
    with pytest.raises(DuplicateOwner):
        t.register("r1", FW, FastWeightPayload(np.zeros((2, 2))), "slot0")


def test_read_view_tracks_commits():
    t = table_with("r1")
    for _ in range(3):
        write(t, "r1")
    a, b = t.read_view("r1"), t.read_view("r1")
    assert a.mode is ViewMode.READ and a.version == b.version == 3
    write(t, "r1")
    assert t.read_view("r1").version == 4


def test_unknown_owner():
    t = StateTable()
    with pytest.raises(UnknownOwner):
        t.read_view("nobody")
    with pytest.raises(UnknownOwner):
        t.commit("nobody")


def test_double_write_rejected():
    t = table_with("r1")
    write(t, "r1")
    view = t.write_view("r1", evidence())
    assert view.mode is ViewMode.WRITE and view.version == 1
    with pytest.raises(DoubleWrite):
        t.write_view("r1", evidence())
    t.populate(view)
    with pytest.raises(DoubleWrite):
        t.write_view("r1", evidence())


def test_dirty_candidate_invisible_to_reads():
    t = table_with("r1")
    write(t, "r1")
    before = t.read_view("r1").payload.tobytes()
    t.populate(t.write_view("r1", evidence(0.7)))
    seen = t.read_view("r1")
    assert seen.version == 1 and seen.payload.tobytes() == before
    assert t.record("r1").dirty_candidate.tobytes() != before


def test_commit_increments():
    t = table_with("r1")
    assert write(t, "r1") == 1
    assert write(t, "r1") == 2


def test_commit_without_candidate():
    with pytest.raises(NoDirtyCandidate):
        table_with("r1").commit("r1")


def test_snapshot_and_rollback():
    t = table_with("r1")
    write(t, "r1"), write(t, "r1")
    t.snapshot("r1")
    at2 = t.record("r1").payload.tobytes()
    assert t.record("r1").checkpoint[0] == 2
    write(t, "r1")
    assert t.versions["r1"] == 3 and t.record("r1").checkpoint[0] == 2
    assert t.rollback("r1") == 2
    assert t.record("r1").payload.tobytes() == at2
    # the checkpoint survives, so a second rollback lands in the same place
    write(t, "r1")
    assert t.rollback("r1") == 2


def test_snapshot_latest_wins():
    t = table_with("r1")
    write(t, "r1"), write(t, "r1")
    t.snapshot("r1")
    write(t, "r1")
    t.snapshot("r1")
    assert t.record("r1").checkpoint[0] == 3


def test_rollback_discards_pending_candidate():
    t = table_with("r1")
    write(t, "r1")
    t.snapshot("r1")
    pre = t.record("r1").payload.tobytes()
    t.populate(t.write_view("r1", evidence(0.3)))
    assert t.rollback("r1") == 1
    rec = t.record("r1")
    assert rec.dirty_candidate is None and rec.payload.tobytes() == pre
    t.write_view("r1", evidence())  # no lingering double-write


def test_rollback_without_snapshot():
    with pytest.raises(NoCheckpoint):
        table_with("r1").rollback("r1")


def test_fork_isolation():
    t = table_with("r1")
    write(t, "r1"), write(t, "r1")
    t.snapshot("r1")
    src = t.record("r1").payload.tobytes()
    child = t.fork("r1", "r9")
    assert child.version == 2 and child.payload.tobytes() == src and child.checkpoint is None
    write(t, "r9", 0.5)
    assert t.versions["r9"] == 3 and t.versions["r1"] == 2
    assert t.record("r1").payload.tobytes() == src
    forked = t.record("r9").payload.tobytes()
    write(t, "r1", -0.2)
    t.rollback("r1")
    assert t.record("r9").payload.tobytes() == forked


def test_fork_errors():
    t = table_with("r1", "r2")
    with pytest.raises(UnknownOwner):
        t.fork("zz", "r3")
    with pytest.raises(DuplicateOwner):
        t.fork("r1", "r2")


class StateTableMachine(RuleBasedStateMachine):
    """Checks the table against a plain dict model of (version, payload bytes)."""

    owners = Bundle("owners")

    def __init__(self):
        super().__init__()
        self.table = StateTable()
        self.model = {}
        self.checkpoints = {}
        self.pending = set()
        self.count = 0

    @rule(target=owners)
    def register(self):
        self.count += 1
        owner = f"o{self.count}"
        self.table.register(owner, FW, FastWeightPayload(np.zeros((3, 3))), "dev0")
        self.model[owner] = (0, self.table.record(owner).payload.tobytes())
        return owner

    @rule(owner=owners, value=st.floats(-1, 1))
    def stage(self, owner, value):
        if owner in self.pending:
            with pytest.raises(DoubleWrite):
                self.table.write_view(owner, evidence(value, 3))
            return
        committed = self.snapshot_all()
        self.table.populate(self.table.write_view(owner, evidence(value, 3)))
        self.pending.add(owner)
        assert self.snapshot_all() == committed

    @rule(owner=owners)
    def commit(self, owner):
        if owner not in self.pending:
            with pytest.raises(NoDirtyCandidate):
                self.table.commit(owner)
            return
        others = {o: v for o, v in self.snapshot_all().items() if o != owner}
        v = self.table.commit(owner)
        self.pending.discard(owner)
        assert v == self.model[owner][0] + 1
        self.model[owner] = (v, self.table.record(owner).payload.tobytes())
        assert {o: s for o, s in self.snapshot_all().items() if o != owner} == others

    @rule(owner=owners)
    def snapshot(self, owner):
        self.table.snapshot(owner)
        self.checkpoints[owner] = self.model[owner]

    @rule(owner=owners)
    def rollback(self, owner):
        if owner not in self.checkpoints:
            with pytest.raises(NoCheckpoint):
                self.table.rollback(owner)
            return
        self.table.rollback(owner)
        self.pending.discard(owner)
        self.model[owner] = self.checkpoints[owner]

    @rule(owner=owners)
    def fork(self, owner):
        self.count += 1
        child = f"o{self.count}"
        self.table.fork(owner, child)
        self.model[child] = self.model[owner]

    def snapshot_all(self):
        return {o: (r.version, r.payload.tobytes()) for o, r in
                ((o, self.table.record(o)) for o in self.table.owners())}

    @invariant()
    def matches_model(self):
        assert self.snapshot_all() == self.model

    @precondition(lambda self: self.model)
    @invariant()
    def reads_see_committed(self):
        for owner, (v, payload) in self.model.items():
            view = self.table.read_view(owner)
            assert (view.version, view.payload.tobytes()) == (v, payload)


TestStateTableMachine = StateTableMachine.TestCase
TestStateTableMachine.settings = settings(max_examples=150, stateful_step_count=30, deadline=None)
