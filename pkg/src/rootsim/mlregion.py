"""Region-based root management.

A region is a growable set of root slots released all at once when the
region is left.  The current region is found implicitly (dynamic scoping):
there is one region stack per runtime and every region remembers the
execution context that opened it, so use from another context is reported
instead of silently corrupting the stack.

Releasing the runtime lock pushes a marker region of kind ``LOCK_RELEASE``;
while it is current no heap work, no new roots and no normal region entry
is allowed.  ``mlregion_reacquire_runtime_system`` pushes a ``REACQUIRED``
region on top of the marker in which everything works again.

Calling back into ML code disables the current region for the duration of
the call: its roots stay live but it refuses new ones.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from . import heap, legacy_ffi
from .errors import (
    AlreadyReleased,
    LockOrderViolation,
    NoCurrentRegion,
    NotCurrentRegion,
    NotReacquiredRegion,
    NotReleased,
    RegionContextMismatch,
    RegionDisabled,
    RuntimeReleased,
    SubRegionOrderViolation,
    UnregisteredRoot,
)
from .heap import LockState, RootSlot, Runtime, Value
from .legacy_ffi import CallbackStatus
from .mlroot import is_registered_root

CHUNK_CAPACITY = 64


class RegionKind(enum.Enum):
    NORMAL = "Normal"
    LOCK_RELEASE = "LockRelease"
    REACQUIRED = "Reacquired"


@dataclass(eq=False)
class SubRegionMark:
    region: "Region"
    count: int


class Region:
    def __init__(self, kind: RegionKind, parent: "Region | None", owner_context: int):
        self.kind = kind
        self.parent = parent
        self.owner_context = owner_context
        # fixed-capacity chunks: growing never moves an existing slot
        self.chunks: list[list[RootSlot | None]] = []
        self.live_count = 0
        self.disabled = False
        self.sub_marks: list[SubRegionMark] = []
        self.live = True

    def __repr__(self) -> str:
        flags = " disabled" if self.disabled else ""
        return f"<Region {self.kind.value} live={self.live_count}{flags}>"

    def slots(self) -> Iterator[RootSlot]:
        remaining = self.live_count
        for chunk in self.chunks:
            if remaining <= 0:
                break
            for slot in chunk[: min(remaining, CHUNK_CAPACITY)]:
                yield slot
            remaining -= CHUNK_CAPACITY

    def slot_at(self, i: int) -> RootSlot:
        if not 0 <= i < self.live_count:
            raise IndexError(i)
        return self.chunks[i // CHUNK_CAPACITY][i % CHUNK_CAPACITY]

    def _push(self, slot: RootSlot) -> None:
        ci, off = divmod(self.live_count, CHUNK_CAPACITY)
        if ci == len(self.chunks):
            self.chunks.append([None] * CHUNK_CAPACITY)
        self.chunks[ci][off] = slot
        slot.registered = True
        self.live_count += 1

    def _truncate(self, count: int) -> None:
        for i in range(count, self.live_count):
            ci, off = divmod(i, CHUNK_CAPACITY)
            self.chunks[ci][off].registered = False
            self.chunks[ci][off] = None
        self.live_count = count


class RegionStack:
    order = heap.ORDER_REGIONS

    def __init__(self) -> None:
        self.regions: list[Region] = []

    def slots(self) -> Iterable[RootSlot]:
        for region in self.regions:
            yield from region.slots()

    @property
    def current(self) -> Region | None:
        return self.regions[-1] if self.regions else None

    def _pop(self) -> Region:
        region = self.regions.pop()
        region._truncate(0)
        region.sub_marks.clear()
        region.live = False
        return region


def region_stack(rt: Runtime) -> RegionStack:
    rs = rt._region_stack
    if rs is None:
        rs = rt._region_stack = RegionStack()
        rt.add_provider(rs)
    return rs


def current_region(rt: Runtime) -> Region | None:
    return region_stack(rt).current


def regions(rt: Runtime) -> tuple[Region, ...]:
    """Read-only view of the region stack, outermost first."""
    return tuple(region_stack(rt).regions)


def _check_context(rt: Runtime, region: Region, op: str) -> None:
    if region.owner_context != rt.context_id:
        raise RegionContextMismatch(
            f"region owned by context {region.owner_context}, used from {rt.context_id}",
            site=op,
        )


def _require_lock(rt: Runtime, op: str) -> None:
    if rt.lock_state is LockState.RELEASED:
        raise RuntimeReleased("the runtime lock is released", site=op)


def _require_current(rt: Runtime, op: str) -> Region:
    cur = region_stack(rt).current
    if cur is None:
        raise NoCurrentRegion("no region has been set up", site=op)
    _check_context(rt, cur, op)
    return cur


def mlregion_enter(rt: Runtime) -> Region:
    _require_lock(rt, "mlregion_enter")
    rs = region_stack(rt)
    cur = rs.current
    if cur is not None:
        _check_context(rt, cur, "mlregion_enter")
    region = Region(RegionKind.NORMAL, cur, rt.context_id)
    rs.regions.append(region)
    return region


def mlregion_leave(rt: Runtime, region: Region) -> None:
    rs = region_stack(rt)
    if rs.current is not region:
        raise NotCurrentRegion("regions must be left in reverse order of entry", site="mlregion_leave")
    _check_context(rt, region, "mlregion_leave")
    if region.kind is not RegionKind.NORMAL:
        raise LockOrderViolation(
            f"{region.kind.value} region must be closed by its lock wrapper", site="mlregion_leave"
        )
    rs._pop()


def mlregion_new_root(rt: Runtime) -> RootSlot:
    _require_lock(rt, "mlregion_new_root")
    cur = _require_current(rt, "mlregion_new_root")
    if cur.disabled:
        raise RegionDisabled("region is disabled during a callback", site="mlregion_new_root")
    slot = RootSlot(heap.UNIT, "region")
    cur._push(slot)
    return slot


def region_begin_with_params(rt: Runtime, params: Sequence[Value]) -> tuple[Region, list[RootSlot]]:
    """Enter a region and root each parameter in it (``CAMLregion(&a, &b, ...)``)."""
    if rt.defensive:
        for v in params:
            if v.is_block:
                heap._deref(rt, v, "region_begin_with_params")
    region = mlregion_enter(rt)
    slots = []
    for v in params:
        slot = mlregion_new_root(rt)
        slot.cell = v
        slots.append(slot)
    return region, slots


def region_return(rt: Runtime, region: Region, result: RootSlot) -> Value:
    """Read ``result``, leave ``region`` and hand the bare Value back to the caller."""
    rs = region_stack(rt)
    if rs.current is not region:
        raise NotCurrentRegion("region_return on a region that is not current", site="region_return")
    _check_context(rt, region, "region_return")
    _require_lock(rt, "region_return")
    if rt.defensive and not is_registered_root(rt, result):
        raise UnregisteredRoot("result slot is not registered", site="region_return")
    v = result.cell
    mlregion_leave(rt, region)
    return v


def mlregion_subenter(rt: Runtime) -> SubRegionMark:
    cur = _require_current(rt, "mlregion_subenter")
    mark = SubRegionMark(cur, cur.live_count)
    cur.sub_marks.append(mark)
    return mark


def mlregion_subleave(rt: Runtime, mark: SubRegionMark) -> None:
    cur = _require_current(rt, "mlregion_subleave")
    if mark.region is not cur or not cur.sub_marks or cur.sub_marks[-1] is not mark:
        raise SubRegionOrderViolation(
            "sub-regions must be released in reverse order of allocation", site="mlregion_subleave"
        )
    cur.sub_marks.pop()
    cur._truncate(mark.count)


def _has_marker(rs: RegionStack) -> bool:
    return any(r.kind is RegionKind.LOCK_RELEASE for r in rs.regions)


def mlregion_release_runtime_system(rt: Runtime) -> None:
    rs = region_stack(rt)
    if rt.lock_state is LockState.RELEASED or _has_marker(rs):
        raise AlreadyReleased("runtime already released", site="mlregion_release_runtime_system")
    cur = rs.current
    if cur is not None:
        _check_context(rt, cur, "mlregion_release_runtime_system")
    rs.regions.append(Region(RegionKind.LOCK_RELEASE, cur, rt.context_id))
    rt.lock_state = LockState.RELEASED


def mlregion_acquire_runtime_system(rt: Runtime) -> None:
    op = "mlregion_acquire_runtime_system"
    rs = region_stack(rt)
    if not _has_marker(rs):
        raise NotReleased("runtime was not released", site=op)
    cur = rs.current
    _check_context(rt, cur, op)
    if cur.kind is not RegionKind.LOCK_RELEASE or rt.lock_state is not LockState.RELEASED:
        raise LockOrderViolation(f"innermost region is {cur.kind.value}", site=op)
    rs._pop()
    rt.lock_state = LockState.HELD


def mlregion_reacquire_runtime_system(rt: Runtime) -> None:
    op = "mlregion_reacquire_runtime_system"
    if rt.lock_state is not LockState.RELEASED:
        raise NotReleased("runtime is not released", site=op)
    rs = region_stack(rt)
    cur = rs.current
    if cur is not None:
        _check_context(rt, cur, op)
    rs.regions.append(Region(RegionKind.REACQUIRED, cur, rt.context_id))
    rt.lock_state = LockState.HELD


def mlregion_rerelease_runtime_system(rt: Runtime) -> None:
    op = "mlregion_rerelease_runtime_system"
    rs = region_stack(rt)
    cur = rs.current
    if cur is None or cur.kind is not RegionKind.REACQUIRED:
        raise NotReacquiredRegion("innermost region is not a reacquired section", site=op)
    _check_context(rt, cur, op)
    rs._pop()
    rt.lock_state = LockState.RELEASED


def switch_context(rt: Runtime, context_id: int) -> int:
    """Simulate another thread taking over; returns the previous context id."""
    previous = rt.context_id
    rt.context_id = context_id
    return previous


def region_callback_exn(
    rt: Runtime, closure: RootSlot, args: Sequence[RootSlot], result: RootSlot
) -> CallbackStatus:
    """Call an ML closure with the current region disabled.

    Returns the status; on ``EXCEPTION`` ``result`` holds the exception
    value.  The region is re-enabled whatever happens inside the call.
    """
    op = "region_callback_exn"
    _require_lock(rt, op)
    cur = _require_current(rt, op)
    if cur.disabled:
        raise RegionDisabled("callback issued from a disabled region", site=op)
    if rt.defensive:
        for slot in (closure, *args, result):
            if not is_registered_root(rt, slot):
                raise UnregisteredRoot(f"{slot!r} is not registered", site=op)
    fn = legacy_ffi.closure_function(rt, closure.cell, op)
    context = rt.context_id
    cur.disabled = True
    try:
        status = legacy_ffi.invoke(fn, rt, args, result)
    finally:
        cur.disabled = False
    if rt.context_id != context:
        raise RegionContextMismatch(
            f"callback entered in context {context}, returned in {rt.context_id}", site=op
        )
    if region_stack(rt).current is not cur:
        raise NotCurrentRegion("callback returned with regions still open", site=op)
    return status
