"""Root-centric accessors: every argument is a slot, results go to a slot.

Values are only ever dereferenced inside these functions, after the last
point at which the operation could trigger a collection.  Because results
are written through a destination slot, calls cannot be nested and no bare
Value survives across an allocation.

In defensive mode every slot argument is checked against all root
providers before any state is touched.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

from . import heap
from .errors import AliasViolation, NotImmediate, RuntimeReleased, UnregisteredRoot
from .heap import RootSlot, Runtime


class AliasPolicy(str, enum.Enum):
    HANDLE = "handle"
    WARN = "warn"
    FAIL = "fail"


class AliasWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DefensiveConfig:
    verify_registration: bool
    alias_policy: AliasPolicy


def defensive_config(rt: Runtime) -> DefensiveConfig:
    return DefensiveConfig(rt.defensive, AliasPolicy(rt.alias_policy))


def configure(rt: Runtime, *, defensive: bool | None = None, alias_policy: str | None = None) -> None:
    if defensive is not None:
        rt.defensive = defensive
    if alias_policy is not None:
        rt.alias_policy = AliasPolicy(alias_policy).value


def is_registered_root(rt: Runtime, slot: RootSlot) -> bool:
    # deliberately a full linear scan over every provider
    for s in rt.iter_root_slots():
        if s is slot:
            return True
    return False


class _Checkpoint:
    """Asserts that no collection happened between two points of an op."""

    __slots__ = ("rt", "mark")

    def __init__(self, rt: Runtime):
        self.rt = rt
        self.mark = rt.collections

    def check(self) -> None:
        assert self.rt.collections == self.mark, "bare value held across a collection"


def _verify(rt: Runtime, op: str, slots: tuple[RootSlot, ...]) -> None:
    if rt.lock_state is heap.LockState.RELEASED:
        raise RuntimeReleased("the runtime lock is released", site=op)
    if rt.defensive:
        for slot in slots:
            if not is_registered_root(rt, slot):
                raise UnregisteredRoot(f"{slot!r} is not enumerated by any root provider", site=op)


def _enter(rt: Runtime, op: str, *slots: RootSlot) -> None:
    _verify(rt, op, slots)
    if len(slots) > 1 and len({id(s) for s in slots}) < len(slots):
        policy = rt.alias_policy
        if policy == AliasPolicy.FAIL:
            raise AliasViolation("the same slot is passed as input and output", site=op)
        if policy == AliasPolicy.WARN:
            warnings.warn(f"{op}: aliased slot arguments", AliasWarning, stacklevel=3)


def _check_src(rt: Runtime, v: heap.Value, op: str) -> None:
    if rt.defensive and v.is_block:
        heap._deref(rt, v, op)


def mlroot_alloc(rt: Runtime, dst: RootSlot, size: int, tag: int) -> None:
    _enter(rt, "mlroot_alloc", dst)
    v = heap.alloc(rt, size, tag)
    dst.cell = v


def mlroot_string_copy(rt: Runtime, dst: RootSlot, data: bytes) -> None:
    _enter(rt, "mlroot_string_copy", dst)
    dst.cell = heap.alloc_string(rt, data)


def mlroot_get_string(rt: Runtime, src: RootSlot) -> bytes:
    _enter(rt, "mlroot_get_string", src)
    return heap.string_bytes(rt, src.cell)


def mlroot_get_long(rt: Runtime, src: RootSlot) -> int:
    _enter(rt, "mlroot_get_long", src)
    v = src.cell
    if v.is_block:
        raise NotImmediate(f"slot holds {v!r}", site="mlroot_get_long")
    return heap.decode_long(v)


def mlroot_set_long(rt: Runtime, dst: RootSlot, n: int) -> None:
    _enter(rt, "mlroot_set_long", dst)
    dst.cell = heap.encode_long(n)


def mlroot_val_long(rt: Runtime, dst: RootSlot, n: int) -> None:
    _enter(rt, "mlroot_val_long", dst)
    dst.cell = heap.encode_long(n)


def mlroot_get_field(rt: Runtime, dst: RootSlot, src: RootSlot, index: int) -> None:
    _enter(rt, "mlroot_get_field", dst, src)
    cp = _Checkpoint(rt)
    field = heap.read_field(rt, src.cell, index)
    cp.check()
    dst.cell = field


def mlroot_set_field(rt: Runtime, dst: RootSlot, index: int, src: RootSlot) -> None:
    _enter(rt, "mlroot_set_field", dst, src)
    x = src.cell
    _check_src(rt, x, "mlroot_set_field")
    cp = _Checkpoint(rt)
    heap.write_field(rt, dst.cell, index, x)
    cp.check()


def mlroot_set_field_long(rt: Runtime, dst: RootSlot, index: int, n: int) -> None:
    _enter(rt, "mlroot_set_field_long", dst)
    heap.write_field(rt, dst.cell, index, heap.encode_long(n))


def mlroot_get_size(rt: Runtime, src: RootSlot) -> int:
    _enter(rt, "mlroot_get_size", src)
    return heap.block_info(rt, src.cell)[1]


def mlroot_get_tag(rt: Runtime, src: RootSlot) -> int:
    _enter(rt, "mlroot_get_tag", src)
    return heap.block_info(rt, src.cell)[0]


def mk_pair(rt: Runtime, result: RootSlot, a: RootSlot, b: RootSlot) -> None:
    """Build the pair ``(a, b)`` into ``result``.

    ``result`` must not alias ``a`` or ``b``: the allocation overwrites it
    before the fields are read.  Under the ``handle`` policy the inputs are
    first copied into a temporary root array.
    """
    _verify(rt, "mk_pair", (result, a, b))
    if result is a or result is b:
        policy = rt.alias_policy
        if policy == AliasPolicy.FAIL:
            raise AliasViolation("result slot aliases an input of mk_pair", site="mk_pair")
        if policy == AliasPolicy.WARN:
            warnings.warn("mk_pair: result aliases an input", AliasWarning, stacklevel=2)
        with heap.RootArray(rt, 2) as tmp:
            tmp[0].cell, tmp[1].cell = a.cell, b.cell
            _mk_pair(rt, result, tmp[0], tmp[1])
        return
    _mk_pair(rt, result, a, b)


def _mk_pair(rt: Runtime, result: RootSlot, a: RootSlot, b: RootSlot) -> None:
    mlroot_alloc(rt, result, 2, 0)
    mlroot_set_field(rt, result, 0, a)
    mlroot_set_field(rt, result, 1, b)
