import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brackets import run_bracket_program
from rootsim import bindings, heap
from rootsim.errors import (
    AlreadyReleased,
    LockOrderViolation,
    NoCurrentRegion,
    NotAClosure,
    NotCurrentRegion,
    NotReacquiredRegion,
    NotReleased,
    RegionContextMismatch,
    RegionDisabled,
    RuntimeReleased,
    SubRegionOrderViolation,
    UnregisteredRoot,
)
from rootsim.heap import Classification, LockState, encode_long, decode_long
from rootsim.legacy_ffi import CallbackStatus, register_closure
from rootsim.mlregion import (
    CHUNK_CAPACITY,
    RegionKind,
    current_region,
    mlregion_acquire_runtime_system,
    mlregion_enter,
    mlregion_leave,
    mlregion_new_root,
    mlregion_reacquire_runtime_system,
    mlregion_release_runtime_system,
    mlregion_rerelease_runtime_system,
    mlregion_subenter,
    mlregion_subleave,
    region_begin_with_params,
    region_callback_exn,
    region_return,
    regions,
    switch_context,
)
from rootsim.mlroot import (
    configure,
    is_registered_root,
    mlroot_alloc,
    mlroot_get_long,
    mlroot_set_field_long,
)


def test_enter_empty(rt):
    r = mlregion_enter(rt)
    assert current_region(rt) is r
    assert r.live_count == 0 and r.parent is None and r.kind is RegionKind.NORMAL


def test_enter_released(rt):
    mlregion_release_runtime_system(rt)
    with pytest.raises(RuntimeReleased):
        mlregion_enter(rt)


def test_nested_parent(rt):
    outer = mlregion_enter(rt)
    inner = mlregion_enter(rt)
    assert inner.parent is outer
    assert regions(rt) == (outer, inner)


def test_leave_deregisters(rt):
    r = mlregion_enter(rt)
    s = mlregion_new_root(rt)
    mlregion_leave(rt, r)
    assert rt.root_count() == 0
    assert not is_registered_root(rt, s)
    assert current_region(rt) is None


def test_leave_outer_first(rt):
    outer = mlregion_enter(rt)
    mlregion_enter(rt)
    with pytest.raises(NotCurrentRegion):
        mlregion_leave(rt, outer)


def test_new_root(rt):
    mlregion_enter(rt)
    s = mlregion_new_root(rt)
    assert s.cell == encode_long(0) and is_registered_root(rt, s)


def test_new_root_without_region(rt):
    with pytest.raises(NoCurrentRegion):
        mlregion_new_root(rt)


def test_new_root_during_callback(rt):
    mlregion_enter(rt)

    def grab_outer(rt, args, result):
        mlregion_new_root(rt)

    clo, res = mlregion_new_root(rt), mlregion_new_root(rt)
    clo.cell = register_closure(rt, grab_outer)
    with pytest.raises(RegionDisabled):
        region_callback_exn(rt, clo, [], res)
    assert not current_region(rt).disabled


def test_begin_with_params(rt):
    a, b = encode_long(1), heap.alloc(rt, 1, 0)
    region, (sa, sb) = region_begin_with_params(rt, [a, b])
    assert region.live_count == 2
    assert (sa.cell, sb.cell) == (a, b)
    mlregion_leave(rt, region)
    region, slots = region_begin_with_params(rt, [])
    assert region.live_count == 0 and slots == []
    mlregion_leave(rt, region)
    region, slots = region_begin_with_params(rt, [encode_long(i) for i in range(3)])
    assert region.live_count == 3


def test_region_return_pair(rt):
    v = bindings.region_mk_pair(rt, encode_long(1), encode_long(2))
    assert heap.serialize_values(rt, [v]) == b"b0:0:2(i1;i2;)"
    assert rt.root_count() == 0


def test_region_triplet(make_rt):
    rt = make_rt(torture=True, defensive=True)
    v = bindings.region_mk_triplet(rt, encode_long(1), encode_long(2), encode_long(3))
    assert heap.serialize_values(rt, [v]) == b"b0:0:2(i1;b1:0:2(i2;i3;))"
    assert rt.root_count() == 0


def test_region_return_left_result(make_rt):
    rt = make_rt(defensive=True)
    inner = mlregion_enter(rt)
    stale_slot = mlregion_new_root(rt)
    mlregion_leave(rt, inner)
    outer = mlregion_enter(rt)
    with pytest.raises(UnregisteredRoot):
        region_return(rt, outer, stale_slot)


def test_subregion_restores(rt):
    r = mlregion_enter(rt)
    mlregion_new_root(rt)
    m = mlregion_subenter(rt)
    new = [mlregion_new_root(rt) for _ in range(3)]
    assert r.live_count == 4
    mlregion_subleave(rt, m)
    assert r.live_count == 1
    assert not any(s.registered for s in new)


def test_subleave_non_top(rt):
    mlregion_enter(rt)
    m1 = mlregion_subenter(rt)
    mlregion_subenter(rt)
    with pytest.raises(SubRegionOrderViolation):
        mlregion_subleave(rt, m1)


def test_nested_subregions(rt):
    r = mlregion_enter(rt)
    m1 = mlregion_subenter(rt)
    mlregion_new_root(rt)
    m2 = mlregion_subenter(rt)
    mlregion_new_root(rt)
    mlregion_new_root(rt)
    mlregion_subleave(rt, m2)
    assert r.live_count == 1
    mlregion_subleave(rt, m1)
    assert r.live_count == 0


def test_swapped_marks_with_equal_counts(rt):
    mlregion_enter(rt)
    m1 = mlregion_subenter(rt)
    m2 = mlregion_subenter(rt)
    assert m1.count == m2.count
    with pytest.raises(SubRegionOrderViolation):
        mlregion_subleave(rt, m1)


def test_subenter_without_region(rt):
    with pytest.raises(NoCurrentRegion):
        mlregion_subenter(rt)


def test_slot_stability(rt):
    mlregion_enter(rt)
    first = [mlregion_new_root(rt) for _ in range(5)]
    for s, n in zip(first, range(5)):
        s.cell = encode_long(n)
    r = current_region(rt)
    chunk0 = r.chunks[0]
    for _ in range(CHUNK_CAPACITY * 4):
        mlregion_new_root(rt)
    assert len(r.chunks) == 5
    assert r.chunks[0] is chunk0
    assert [r.slot_at(i) for i in range(5)] == first
    assert all(r.slot_at(i) is first[i] for i in range(5))
    assert [decode_long(s.cell) for s in first] == list(range(5))


def test_release_blocks_heap_ops(rt):
    r = mlregion_enter(rt)
    s = mlregion_new_root(rt)
    s.cell = encode_long(3)
    mlregion_release_runtime_system(rt)
    with pytest.raises(RuntimeReleased):
        mlroot_get_long(rt, s)
    with pytest.raises(RuntimeReleased):
        mlregion_new_root(rt)
    with pytest.raises(RuntimeReleased):
        heap.alloc(rt, 1, 0)
    mlregion_acquire_runtime_system(rt)
    assert rt.lock_state is LockState.HELD
    assert current_region(rt) is r


def test_release_twice(rt):
    mlregion_release_runtime_system(rt)
    with pytest.raises(AlreadyReleased):
        mlregion_release_runtime_system(rt)


def test_acquire_without_release(rt):
    with pytest.raises(NotReleased):
        mlregion_acquire_runtime_system(rt)


def test_reacquire_section(make_rt):
    rt = make_rt(torture=True, defensive=True)
    mlregion_enter(rt)
    keep = mlregion_new_root(rt)
    mlroot_alloc(rt, keep, 1, 0)
    mlroot_set_field_long(rt, keep, 0, 99)
    mlregion_release_runtime_system(rt)
    mlregion_reacquire_runtime_system(rt)
    assert current_region(rt).kind is RegionKind.REACQUIRED
    slots = [mlregion_new_root(rt) for _ in range(10)]
    for i, s in enumerate(slots):
        mlroot_alloc(rt, s, 1, 0)
        mlroot_set_field_long(rt, s, 0, i)
    assert heap.serialize_values(rt, [s.cell for s in slots]) == b",".join(
        b"b%d:0:1(i%d;)" % (i, i) for i in range(10)
    )
    mlregion_rerelease_runtime_system(rt)
    assert rt.lock_state is LockState.RELEASED
    assert not any(s.registered for s in slots)
    mlregion_acquire_runtime_system(rt)
    assert heap.serialize_values(rt, [keep.cell]) == b"b0:0:1(i99;)"


def test_rerelease_without_reacquire(rt):
    mlregion_release_runtime_system(rt)
    with pytest.raises(NotReacquiredRegion):
        mlregion_rerelease_runtime_system(rt)


def test_reacquire_when_held(rt):
    with pytest.raises(NotReleased):
        mlregion_reacquire_runtime_system(rt)


def test_acquire_inside_reacquired(rt):
    mlregion_release_runtime_system(rt)
    mlregion_reacquire_runtime_system(rt)
    with pytest.raises(LockOrderViolation):
        mlregion_acquire_runtime_system(rt)


def test_release_inside_reacquired_rejected(rt):
    mlregion_release_runtime_system(rt)
    mlregion_reacquire_runtime_system(rt)
    with pytest.raises(AlreadyReleased):
        mlregion_release_runtime_system(rt)


def test_leave_marker_rejected(rt):
    mlregion_release_runtime_system(rt)
    with pytest.raises(LockOrderViolation):
        mlregion_leave(rt, current_region(rt))


def test_acquire_with_open_region_above_marker(rt):
    mlregion_release_runtime_system(rt)
    mlregion_reacquire_runtime_system(rt)
    mlregion_enter(rt)
    with pytest.raises(LockOrderViolation):
        mlregion_acquire_runtime_system(rt)


def test_context_mismatch(rt):
    r = mlregion_enter(rt)
    switch_context(rt, 7)
    with pytest.raises(RegionContextMismatch):
        mlregion_new_root(rt)
    with pytest.raises(RegionContextMismatch):
        mlregion_leave(rt, r)
    switch_context(rt, 0)
    mlregion_leave(rt, r)


def _with_callback(rt, fn, nargs=1):
    mlregion_enter(rt)
    clo = mlregion_new_root(rt)
    clo.cell = register_closure(rt, fn)
    args = [mlregion_new_root(rt) for _ in range(nargs)]
    return clo, args, mlregion_new_root(rt)


def test_callback_comparator(rt):
    clo, args, res = _with_callback(rt, bindings.ml_compare_boxes, 2)
    bindings.ml_box(rt, args[0], 3)
    bindings.ml_box(rt, args[1], 8)
    assert region_callback_exn(rt, clo, args, res) is CallbackStatus.NORMAL
    assert decode_long(res.cell) < 0


def test_callback_exception_restores(rt):
    mlregion_enter(rt)
    mlregion_new_root(rt)
    clo, args, res = _with_callback(rt, bindings.ml_raise_boom, 0)
    before = [r.live_count for r in regions(rt)]
    assert region_callback_exn(rt, clo, args, res) is CallbackStatus.EXCEPTION
    assert heap.string_bytes(rt, res.cell) == b"boom"
    assert [r.live_count for r in regions(rt)] == before
    assert not current_region(rt).disabled


def test_callback_not_a_closure(rt):
    mlregion_enter(rt)
    clo, res = mlregion_new_root(rt), mlregion_new_root(rt)
    with pytest.raises(NotAClosure):
        region_callback_exn(rt, clo, [], res)


def test_callback_context_change(rt):
    def hijack(rt, args, result):
        switch_context(rt, 3)

    clo, args, res = _with_callback(rt, hijack, 0)
    with pytest.raises(RegionContextMismatch):
        region_callback_exn(rt, clo, args, res)


def test_callback_only_current_disabled(rt):
    outer = mlregion_enter(rt)
    seen = {}

    def probe(rt, args, result):
        seen["outer"] = outer.disabled
        seen["inner"] = current_region(rt).disabled

    clo, args, res = _with_callback(rt, probe, 0)
    region_callback_exn(rt, clo, args, res)
    assert seen == {"outer": False, "inner": True}


def test_callback_from_disabled_region(rt):
    def reenter(rt, args, result):
        region_callback_exn(rt, args[0], [], result)

    clo, args, res = _with_callback(rt, reenter, 1)
    args[0].cell = clo.cell
    with pytest.raises(RegionDisabled):
        region_callback_exn(rt, clo, args, res)


def test_callback_new_region_inside_works(make_rt):
    rt = make_rt(torture=True)
    clo, args, res = _with_callback(rt, bindings.ml_succ_box, 1)
    bindings.ml_box(rt, args[0], 41)
    assert region_callback_exn(rt, clo, args, res) is CallbackStatus.NORMAL
    assert decode_long(res.cell) == 42


def test_disabled_region_roots_rewritten(make_rt):
    rt = make_rt(torture=True)
    seen = {}

    def churn(rt, args, result):
        seen["before"] = args[0].cell
        for _ in range(21):  # odd, so the survivor ends up in the other space
            heap.alloc(rt, 2, 0)
        seen["after"] = args[0].cell

    clo, args, res = _with_callback(rt, churn, 1)
    mlroot_alloc(rt, args[0], 1, 0)
    mlroot_set_field_long(rt, args[0], 0, 5)
    region_callback_exn(rt, clo, args, res)
    assert seen["before"] != seen["after"]
    assert heap.validate_value(rt, args[0].cell) is Classification.LIVE_BLOCK
    assert heap.serialize_values(rt, [args[0].cell]) == b"b0:0:1(i5;)"


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([(bindings.ml_raise_boom, 0), (bindings.ml_succ_box, 1), (bindings.ml_compare_boxes, 2)]),
       st.integers(0, 3), st.booleans())
def test_callback_isolation(closure, depth, torture):
    fn, nargs = closure
    rt = heap.runtime_new(1024, torture=torture)
    for k in range(depth):
        mlregion_enter(rt)
        for _ in range(k + 1):
            mlregion_new_root(rt)
    clo, args, res = _with_callback(rt, fn, nargs)
    for i, a in enumerate(args):
        bindings.ml_box(rt, a, i)
    before = [r.live_count for r in regions(rt)]
    region_callback_exn(rt, clo, args, res)
    assert [r.live_count for r in regions(rt)] == before
    assert not any(r.disabled for r in regions(rt))


# -- bracket discipline -------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bracket_first_violation(seed):
    offending, raised, name, expected = run_bracket_program(np.random.default_rng(seed))
    assert offending == raised
    if expected is not None:
        assert name == expected.__name__


def test_well_bracketed_restores_counts(rt):
    rng = np.random.default_rng(3)
    for _ in range(200):
        r = mlregion_enter(rt)
        marks = []
        for _ in range(int(rng.integers(0, 20))):
            if rng.random() < 0.3:
                marks.append((mlregion_subenter(rt), r.live_count))
            elif marks and rng.random() < 0.3:
                m, c = marks.pop()
                mlregion_subleave(rt, m)
                assert r.live_count == c
            else:
                mlregion_new_root(rt)
        while marks:
            m, c = marks.pop()
            mlregion_subleave(rt, m)
            assert r.live_count == c
        mlregion_leave(rt, r)
        assert rt.root_count() == 0


def test_default_region_callback_defensive(make_rt):
    rt = make_rt(defensive=True)
    clo, args, res = _with_callback(rt, bindings.ml_succ_box, 1)
    bindings.ml_box(rt, args[0], 1)
    stray = heap.RootSlot()
    with pytest.raises(UnregisteredRoot):
        region_callback_exn(rt, clo, [stray], res)
    configure(rt, defensive=False)
