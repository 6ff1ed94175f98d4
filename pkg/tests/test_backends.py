import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tttserve import backends
from tttserve.backends import (
    ETA,
    BackendType,
    DeltaAdapterPayload,
    FastWeightPayload,
    TailBuffer,
    apply_read,
    boundary_update,
    gen_token,
    make_evidence,
    make_shape,
    tail_append,
)
from tttserve.errors import ShapeMismatch, TailNotFull, TailOverflow
from tttserve.state_core import StateTable

FW, DA = BackendType.FAST_WEIGHT, BackendType.DELTA_ADAPTER
finite = st.floats(-10, 10, allow_nan=False)


def test_zero_fast_weights_are_identity():
    x = np.array([0.3, -1.5, 2.0])
    np.testing.assert_array_equal(apply_read(FW, FastWeightPayload(np.zeros((3, 3))), x), x)


def test_identity_fast_weights_double_input():
    y = apply_read(FW, FastWeightPayload(np.eye(2)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(y, [2.0, 4.0])


def test_zero_adapter_A_is_identity():
    rng = np.random.default_rng(3)
    p = DeltaAdapterPayload(np.zeros((4, 8)), rng.normal(size=(4, 8)))
    x = rng.normal(size=8)
    np.testing.assert_array_equal(apply_read(DA, p, x), x)


def test_apply_read_rejects_mismatched_dims():
    with pytest.raises(ShapeMismatch):
        apply_read(FW, FastWeightPayload(np.zeros((3, 3))), np.ones(4))
    with pytest.raises(ShapeMismatch):
        apply_read(DA, FastWeightPayload(np.zeros((3, 3))), np.ones(3))


def test_payloads_are_read_only():
    p = FastWeightPayload(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        p.W[0, 0] = 1.0


def test_tail_append_and_overflow():
    tail = TailBuffer(128)
    tail_append(tail, np.zeros(2))
    assert len(tail) == 1
    for _ in range(126):
        tail_append(tail, np.zeros(2))
    assert not tail.is_full
    tail_append(tail, np.zeros(2))
    assert len(tail) == 128 and tail.is_full
    with pytest.raises(TailOverflow):
        tail_append(tail, np.zeros(2))


def test_evidence_of_equal_tokens_is_that_token():
    v = np.array([0.25, -0.5, 1.0])
    tail = TailBuffer(4, [v] * 4)
    np.testing.assert_array_equal(make_evidence(tail).mean, v)


def test_evidence_two_tokens():
    ev = make_evidence(TailBuffer(2, [np.array([1.0, 0.0]), np.array([0.0, 1.0])]))
    np.testing.assert_array_equal(ev.mean, [0.5, 0.5])
    assert ev.count == 2


def test_evidence_needs_full_tail():
    with pytest.raises(TailNotFull):
        make_evidence(TailBuffer(3, [np.zeros(2)]))


def test_update_with_zero_evidence_is_noop():
    p = boundary_update(FW, FastWeightPayload(np.zeros((2, 2))),
                        make_evidence(TailBuffer(1, [np.zeros(2)])))
    np.testing.assert_array_equal(p.W, np.zeros((2, 2)))


def test_update_outer_product():
    p = boundary_update(FW, FastWeightPayload(np.zeros((2, 2))),
                        make_evidence(TailBuffer(1, [np.ones(2)])))
    np.testing.assert_array_equal(p.W, np.full((2, 2), 0.01))


def test_adapter_update_touches_only_A():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    m = rng.normal(size=8)
    old = DeltaAdapterPayload(a, b)
    new = boundary_update(DA, old, make_evidence(TailBuffer(1, [m])))
    np.testing.assert_array_equal(new.B, b)
    # A' = A + eta (A m) m^T, element by element
    expect = np.array([[a[i, j] + ETA * (sum(a[i, k] * m[k] for k in range(8)) * m[j]) for j in range(8)]
                       for i in range(4)])
    np.testing.assert_allclose(new.A, expect, rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(old.A, a)


def test_shape_classes():
    assert make_shape(FW, 8, 128) == make_shape(FW, 8, 128)
    assert make_shape(FW, 8, 128) != make_shape(FW, 16, 128)
    table = StateTable()
    table.register("a", FW, FastWeightPayload(np.zeros((8, 8))), "dev0", make_shape(FW, 8))
    table.register("b", DA, DeltaAdapterPayload(np.ones((4, 8)), np.ones((4, 8))), "dev0", make_shape(DA, 8))
    ra, rb = table.record("a"), table.record("b")
    assert backends.shape_class(ra).hidden_dim == backends.shape_class(rb).hidden_dim
    assert (ra.backend_type, backends.shape_class(ra)) != (rb.backend_type, backends.shape_class(rb))


def test_backend_type_has_total_order():
    assert sorted([DA, FW]) == [FW, DA]
    assert BackendType.parse("delta-adapter") is DA


def test_gen_token_deterministic_and_bounded():
    a = gen_token("r1", 17, 5)
    b = gen_token("r1", 17, 5)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.abs(a) <= 1.0)
    assert gen_token("r2", 17, 5).tobytes() != a.tobytes()
    assert gen_token("r1", 17, 6).tobytes() != a.tobytes()
    with pytest.raises(ValueError):
        gen_token("r1", -1, 0)


def test_gen_token_positions_do_not_collide():
    seen = {gen_token("r1", p, 0).tobytes() for p in range(10_000)}
    assert len(seen) == 10_000


@settings(max_examples=200)
@given(
    w=arrays(np.float64, (4, 4), elements=finite),
    xs=st.lists(arrays(np.float64, 4, elements=finite), min_size=1, max_size=6),
    order=st.randoms(),
)
def test_apply_read_is_order_independent(w, xs, order):
    payload = FastWeightPayload(w)
    direct = [apply_read(FW, payload, x).tobytes() for x in xs]
    idx = list(range(len(xs)))
    order.shuffle(idx)
    shuffled = {i: apply_read(FW, payload, xs[i]).tobytes() for i in idx}
    assert [shuffled[i] for i in range(len(xs))] == direct


@given(
    a=arrays(np.float64, (2, 4), elements=finite),
    b=arrays(np.float64, (2, 4), elements=finite),
    tokens=st.lists(arrays(np.float64, 4, elements=finite), min_size=3, max_size=3),
)
def test_boundary_update_is_pure(a, b, tokens):
    p = DeltaAdapterPayload(a, b)
    before = p.tobytes()
    ev = make_evidence(TailBuffer(3, list(tokens)))
    first = boundary_update(DA, p, ev)
    second = boundary_update(DA, p, ev)
    assert p.tobytes() == before
    assert first.tobytes() == second.tobytes()


def test_init_payloads():
    fw = backends.init_payload(FW, make_shape(FW), "r1", 0)
    assert not fw.W.any()
    da = backends.init_payload(DA, make_shape(DA), "r1", 0)
    assert da.A.shape == (4, 8) and da.A.any()
    assert da.tobytes() == backends.init_payload(DA, make_shape(DA), "r1", 0).tobytes()
    assert list(itertools.islice(da.to_flat(), 3)) == da.A.ravel()[:3].tolist()
