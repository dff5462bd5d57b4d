"""The value-centric foreign interface, as the original macros desugar it.

``frame_begin`` / ``frame_register`` / ``frame_local`` / ``frame_end`` are the
save / register / restore steps behind ``CAMLparam0``, ``CAMLxparamN``,
``CAMLlocalN`` and ``CAMLreturn``.  Allocation helpers here hand back bare
Values on purpose: holding one across another allocating call is exactly
the hazard this layer exists to reproduce.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import heap
from .errors import ContextMismatch, NotAClosure, NotInnermostFrame, RuntimeReleased
from .heap import CLOSURE_TAG, RootSlot, Runtime, Value


class CallbackStatus(enum.Enum):
    NORMAL = "Normal"
    EXCEPTION = "Exception"


# (runtime, argument slots, result slot) -> status; returning None means NORMAL
HostFunction = Callable[[Runtime, Sequence[RootSlot], RootSlot], "CallbackStatus | None"]


@dataclass(eq=False)
class RootsFrame:
    saved_mark: int
    context_id: int
    slots: list[RootSlot] = field(default_factory=list)
    live: bool = True


class FrameStack:
    """Root provider holding the local-roots stack of every live frame."""

    order = heap.ORDER_FRAMES

    def __init__(self) -> None:
        self.slot_stack: list[RootSlot] = []
        self.frames: list[RootsFrame] = []

    def slots(self) -> Iterable[RootSlot]:
        return self.slot_stack

    @property
    def depth(self) -> int:
        return len(self.slot_stack)


def frame_stack(rt: Runtime) -> FrameStack:
    fs = rt._frame_stack
    if fs is None:
        fs = rt._frame_stack = FrameStack()
        rt.add_provider(fs)
    return fs


def _require_lock(rt: Runtime, op: str) -> None:
    if rt.lock_state is heap.LockState.RELEASED:
        raise RuntimeReleased("the runtime lock is released", site=op)


def _innermost(rt: Runtime, frame: RootsFrame, op: str) -> FrameStack:
    fs = frame_stack(rt)
    if not frame.live or not fs.frames or fs.frames[-1] is not frame:
        raise NotInnermostFrame("frame is not the innermost live frame", site=op)
    if frame.context_id != rt.context_id:
        raise ContextMismatch(
            f"frame opened in context {frame.context_id}, used from {rt.context_id}", site=op
        )
    return fs


def frame_begin(rt: Runtime) -> RootsFrame:
    _require_lock(rt, "frame_begin")
    fs = frame_stack(rt)
    frame = RootsFrame(saved_mark=fs.depth, context_id=rt.context_id)
    fs.frames.append(frame)
    return frame


def frame_register(rt: Runtime, frame: RootsFrame, initial: Value) -> RootSlot:
    _require_lock(rt, "frame_register")
    fs = _innermost(rt, frame, "frame_register")
    if rt.defensive and initial.is_block:
        # registering a dangling value would only postpone the failure
        heap._deref(rt, initial, "frame_register")
    slot = RootSlot(initial, "frame")
    slot.registered = True
    fs.slot_stack.append(slot)
    frame.slots.append(slot)
    return slot


def frame_register_all(rt: Runtime, frame: RootsFrame, values: Iterable[Value]) -> list[RootSlot]:
    """``CAMLxparamN(array, n)``: one registered slot per value."""
    return [frame_register(rt, frame, v) for v in values]


def frame_local(rt: Runtime, frame: RootsFrame) -> RootSlot:
    return frame_register(rt, frame, heap.UNIT)


def frame_end(rt: Runtime, frame: RootsFrame) -> None:
    _require_lock(rt, "frame_end")
    fs = _innermost(rt, frame, "frame_end")
    for slot in fs.slot_stack[frame.saved_mark :]:
        slot.registered = False
    del fs.slot_stack[frame.saved_mark :]
    fs.frames.pop()
    frame.live = False


def legacy_alloc(rt: Runtime, size: int, tag: int) -> Value:
    return heap.alloc(rt, size, tag)


def legacy_copy_string(rt: Runtime, data: bytes) -> Value:
    return heap.alloc_string(rt, data)


# Field / Store_field / Long_val / Val_long
field_ = heap.read_field
store_field = heap.write_field
long_val = heap.decode_long
val_long = heap.encode_long


def register_closure(rt: Runtime, fn: HostFunction) -> Value:
    cid = len(rt.closure_table) + 1
    v = heap.alloc(rt, 1, CLOSURE_TAG)
    heap.write_field(rt, v, 0, heap.encode_long(cid))
    rt.closure_table[cid] = fn
    return v


def closure_function(rt: Runtime, v: Value, op: str = "callback") -> HostFunction:
    if v.is_immediate:
        raise NotAClosure(f"{v!r} is immediate", site=op)
    tag, size = heap.block_info(rt, v)
    if tag != CLOSURE_TAG or size != 1:
        raise NotAClosure(f"block with tag {tag} is not a closure", site=op)
    cid = heap.decode_long(heap.read_field(rt, v, 0))
    try:
        return rt.closure_table[cid]
    except KeyError:
        raise NotAClosure(f"closure id {cid} is not registered", site=op) from None


def invoke(fn: HostFunction, rt: Runtime, args: Sequence[RootSlot], result: RootSlot) -> CallbackStatus:
    status = fn(rt, args, result)
    if status is None:
        return CallbackStatus.NORMAL
    if not isinstance(status, CallbackStatus):
        raise TypeError(f"host function returned {status!r}, expected a CallbackStatus")
    return status


def legacy_callback_exn(
    rt: Runtime, closure_slot: RootSlot, arg_slots: Sequence[RootSlot], result_slot: RootSlot
) -> CallbackStatus:
    """Run an ML closure and report how it finished.

    On ``EXCEPTION`` the result slot holds the exception value.  Nothing ever
    unwinds past this call; the caller must inspect the status.
    """
    _require_lock(rt, "legacy_callback_exn")
    fn = closure_function(rt, closure_slot.cell, "legacy_callback_exn")
    return invoke(fn, rt, arg_slots, result_slot)
