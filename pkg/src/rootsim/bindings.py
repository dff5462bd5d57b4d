"""Foreign-side binding code written against the three interface layers.

These are the "C functions" the scenarios exercise: pair and triplet
builders in each style, a sort driven by an ML comparator, an array fold
with per-iteration sub-regions.  Functions named ``*_buggy`` keep a bare
Value across an allocating call on purpose.

A few helpers play the ML side (``ml_box``, ``ml_compare_boxes``); ML code
keeps its values in registered roots, which a real runtime does for it.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import cmp_to_key
from typing import Iterator, Sequence

from . import heap, legacy_ffi, mlregion
from .errors import Diagnostic
from .heap import RootSlot, Runtime, Value
from .legacy_ffi import CallbackStatus
from .mlroot import (
    mk_pair,
    mlroot_alloc,
    mlroot_get_field,
    mlroot_get_long,
    mlroot_get_size,
    mlroot_set_field,
    mlroot_set_field_long,
    mlroot_set_long,
    mlroot_string_copy,
)


@contextmanager
def site(label: str) -> Iterator[None]:
    """Prefix the site of any diagnostic raised inside the block."""
    try:
        yield
    except Diagnostic as d:
        d.site = f"{label}: {d.site}" if d.site else label
        raise


# -- ML side ---------------------------------------------------------------

def ml_box(rt: Runtime, dst: RootSlot, n: int) -> None:
    mlroot_alloc(rt, dst, 1, 0)
    mlroot_set_field_long(rt, dst, 0, n)


def ml_unbox(rt: Runtime, src: RootSlot) -> int:
    return heap.decode_long(heap.read_field(rt, src.cell, 0))


def ml_compare_boxes(rt: Runtime, args: Sequence[RootSlot], result: RootSlot) -> CallbackStatus:
    """Allocating comparator: builds the pair (a, b) before comparing."""
    a, b = args
    region = mlregion.mlregion_enter(rt)
    pair = mlregion.mlregion_new_root(rt)
    tmp = mlregion.mlregion_new_root(rt)
    mk_pair(rt, pair, a, b)
    mlroot_get_field(rt, tmp, pair, 0)
    mlroot_get_field(rt, tmp, tmp, 0)
    x = mlroot_get_long(rt, tmp)
    mlroot_get_field(rt, tmp, pair, 1)
    mlroot_get_field(rt, tmp, tmp, 0)
    y = mlroot_get_long(rt, tmp)
    mlroot_set_long(rt, result, (x > y) - (x < y))
    mlregion.mlregion_leave(rt, region)
    return CallbackStatus.NORMAL


# -- legacy layer ----------------------------------------------------------

def mk_pair_c_impl(rt: Runtime, a: Value, b: Value) -> Value:
    f = legacy_ffi.frame_begin(rt)
    sa, sb = legacy_ffi.frame_register_all(rt, f, [a, b])
    pair = legacy_ffi.frame_local(rt, f)
    pair.cell = legacy_ffi.legacy_alloc(rt, 2, 0)
    legacy_ffi.store_field(rt, pair.cell, 0, sa.cell)
    legacy_ffi.store_field(rt, pair.cell, 1, sb.cell)
    result = pair.cell
    legacy_ffi.frame_end(rt, f)
    return result


def c_triplet_buggy(rt: Runtime, x: Value, y: Value, z: Value) -> Value:
    f = legacy_ffi.frame_begin(rt)
    sx, sy, sz = legacy_ffi.frame_register_all(rt, f, [x, y, z])
    triplet = legacy_ffi.frame_local(rt, f)
    # the caller's copy of x is taken before the nested call runs
    early_x = sx.cell
    with site("inner mk_pair"):
        inner = mk_pair_c_impl(rt, sy.cell, sz.cell)
    with site("outer mk_pair"):
        triplet.cell = mk_pair_c_impl(rt, early_x, inner)
    result = triplet.cell
    legacy_ffi.frame_end(rt, f)
    return result


def c_triplet_fixed(rt: Runtime, x: Value, y: Value, z: Value) -> Value:
    f = legacy_ffi.frame_begin(rt)
    sx, sy, sz = legacy_ffi.frame_register_all(rt, f, [x, y, z])
    intermediate = legacy_ffi.frame_local(rt, f)
    triplet = legacy_ffi.frame_local(rt, f)
    with site("inner mk_pair"):
        intermediate.cell = mk_pair_c_impl(rt, sy.cell, sz.cell)
    with site("outer mk_pair"):
        triplet.cell = mk_pair_c_impl(rt, sx.cell, intermediate.cell)
    result = triplet.cell
    legacy_ffi.frame_end(rt, f)
    return result


# -- mlroot layer ----------------------------------------------------------

def caml_mk_pair(rt: Runtime, a: Value, b: Value) -> Value:
    f = legacy_ffi.frame_begin(rt)
    sa, sb = legacy_ffi.frame_register_all(rt, f, [a, b])
    result = legacy_ffi.frame_local(rt, f)
    mk_pair(rt, result, sa, sb)
    v = result.cell
    legacy_ffi.frame_end(rt, f)
    return v


def caml_triplet(rt: Runtime, x: Value, y: Value, z: Value) -> Value:
    f = legacy_ffi.frame_begin(rt)
    sx, sy, sz = legacy_ffi.frame_register_all(rt, f, [x, y, z])
    pair = legacy_ffi.frame_local(rt, f)
    result = legacy_ffi.frame_local(rt, f)
    with site("inner mk_pair"):
        mk_pair(rt, pair, sy, sz)
    with site("outer mk_pair"):
        mk_pair(rt, result, sx, pair)
    v = result.cell
    legacy_ffi.frame_end(rt, f)
    return v


def caml_triplet_aliased(rt: Runtime, x: Value, y: Value, z: Value) -> Value:
    f = legacy_ffi.frame_begin(rt)
    sx, sy, sz = legacy_ffi.frame_register_all(rt, f, [x, y, z])
    result = legacy_ffi.frame_local(rt, f)
    with site("inner mk_pair"):
        mk_pair(rt, result, sy, sz)
    with site("outer mk_pair"):
        mk_pair(rt, result, sx, result)
    v = result.cell
    legacy_ffi.frame_end(rt, f)
    return v


# -- mlregion layer --------------------------------------------------------

def pair_helper(rt: Runtime, a: RootSlot, b: RootSlot) -> RootSlot:
    v = mlregion.mlregion_new_root(rt)
    mlroot_alloc(rt, v, 2, 0)
    mlroot_set_field(rt, v, 0, a)
    mlroot_set_field(rt, v, 1, b)
    return v


def region_mk_pair(rt: Runtime, a: Value, b: Value) -> Value:
    region, (sa, sb) = mlregion.region_begin_with_params(rt, [a, b])
    return mlregion.region_return(rt, region, pair_helper(rt, sa, sb))


def region_mk_triplet(rt: Runtime, x: Value, y: Value, z: Value) -> Value:
    region, (sx, sy, sz) = mlregion.region_begin_with_params(rt, [x, y, z])
    return mlregion.region_return(rt, region, pair_helper(rt, sx, pair_helper(rt, sy, sz)))


def process_item(rt: Runtime, acc: RootSlot, item: RootSlot) -> None:
    """acc := box(unbox(acc) + item), reusing ``item`` as scratch."""
    n = mlroot_get_long(rt, item)
    mlroot_get_field(rt, item, acc, 0)
    total = mlroot_get_long(rt, item) + n
    mlroot_alloc(rt, acc, 1, 0)
    mlroot_set_field_long(rt, acc, 0, total)


@dataclass
class FoldStats:
    params: int
    peak_live: int
    final_live: int


def fold_array(rt: Runtime, acc: Value, array: Value) -> tuple[Value, FoldStats]:
    region, (sacc, sarr) = mlregion.region_begin_with_params(rt, [acc, array])
    params = region.live_count
    peak = params
    count = mlroot_get_size(rt, sarr)
    for i in range(count):
        mark = mlregion.mlregion_subenter(rt)
        item = mlregion.mlregion_new_root(rt)
        mlroot_get_field(rt, item, sarr, i)
        process_item(rt, sacc, item)
        peak = max(peak, region.live_count)
        mlregion.mlregion_subleave(rt, mark)
    stats = FoldStats(params=params, peak_live=peak, final_live=region.live_count)
    return mlregion.region_return(rt, region, sacc), stats


@dataclass
class Item:
    key: int
    slot: RootSlot | None = None
    value: Value | None = None


def sort_ocaml_items(rt: Runtime, array: Value, comparator: Value) -> Value:
    """Sort the elements of ``array`` with an ML comparator; items hold root slots."""
    region, (sarr, scmp) = mlregion.region_begin_with_params(rt, [array, comparator])
    res = mlregion.mlregion_new_root(rt)
    items = []
    for i in range(mlroot_get_size(rt, sarr)):
        s = mlregion.mlregion_new_root(rt)
        mlroot_get_field(rt, s, sarr, i)
        items.append(Item(i, slot=s))

    def c_comparator(a: Item, b: Item) -> int:
        status = mlregion.region_callback_exn(rt, scmp, [a.slot, b.slot], res)
        if status is not CallbackStatus.NORMAL:
            raise RuntimeError("comparator raised")
        return mlroot_get_long(rt, res)

    with site("qsort comparator"):
        items.sort(key=cmp_to_key(c_comparator))
    out = mlregion.mlregion_new_root(rt)
    mlroot_alloc(rt, out, len(items), 0)
    for i, item in enumerate(items):
        mlroot_set_field(rt, out, i, item.slot)
    return mlregion.region_return(rt, region, out)


def sort_ocaml_items_buggy(rt: Runtime, array: Value, comparator: Value) -> Value:
    """Same sort, but items carry bare Values the way the C struct does."""
    region, (sarr, scmp) = mlregion.region_begin_with_params(rt, [array, comparator])
    res = mlregion.mlregion_new_root(rt)
    items = []
    mark = mlregion.mlregion_subenter(rt)
    tmp = mlregion.mlregion_new_root(rt)
    for i in range(mlroot_get_size(rt, sarr)):
        mlroot_get_field(rt, tmp, sarr, i)
        items.append(Item(i, value=tmp.cell))
    mlregion.mlregion_subleave(rt, mark)

    def c_comparator(a: Item, b: Item) -> int:
        f = legacy_ffi.frame_begin(rt)
        s1, s2 = legacy_ffi.frame_register_all(rt, f, [a.value, b.value])
        status = mlregion.region_callback_exn(rt, scmp, [s1, s2], res)
        legacy_ffi.frame_end(rt, f)
        if status is not CallbackStatus.NORMAL:
            raise RuntimeError("comparator raised")
        return mlroot_get_long(rt, res)

    with site("qsort comparator"):
        items.sort(key=cmp_to_key(c_comparator))
    out = mlregion.mlregion_new_root(rt)
    mlroot_alloc(rt, out, len(items), 0)
    for i, item in enumerate(items):
        with site("copy back"):
            heap.write_field(rt, out.cell, i, item.value)
    return mlregion.region_return(rt, region, out)


def ml_raise_boom(rt: Runtime, args: Sequence[RootSlot], result: RootSlot) -> CallbackStatus:
    region = mlregion.mlregion_enter(rt)
    scratch = mlregion.mlregion_new_root(rt)
    mlroot_alloc(rt, scratch, 3, 0)
    mlroot_string_copy(rt, result, b"boom")
    mlregion.mlregion_leave(rt, region)
    return CallbackStatus.EXCEPTION


def ml_succ_box(rt: Runtime, args: Sequence[RootSlot], result: RootSlot) -> CallbackStatus:
    (box,) = args
    region = mlregion.mlregion_enter(rt)
    tmp = mlregion.mlregion_new_root(rt)
    mlroot_get_field(rt, tmp, box, 0)
    n = mlroot_get_long(rt, tmp)
    mlroot_alloc(rt, tmp, 1, 0)
    mlroot_set_long(rt, result, n + 1)
    mlregion.mlregion_leave(rt, region)
    return CallbackStatus.NORMAL
