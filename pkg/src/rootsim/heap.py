"""Simulated managed heap: tagged values, blocks and a semispace collector.

Layout
------
Both semispaces live in one word-addressed space.  Semispace ``k`` starts at
word address ``HEAP_BASE + k * (capacity + SPACE_GAP)``; the gap keeps a
pointer just past the end of one space from looking like a pointer into the
other one.

A block is one header word followed by ``size`` payload words.  A block
Value holds the *byte* address of the first payload word, so it is always a
multiple of 8 and its low bit is clear.  Immediates carry ``(n << 1) | 1``.

Header word::

    bits 0..7   tag
    bit  8      forwarded (only during a collection)
    bit  9      forward address stored in the size bits (zero-size blocks)
    bits 10..   size in words

The collector is a plain Cheney copy.  Every collection moves every live
block to the other semispace and then overwrites the whole previous space
with :data:`POISON_PATTERN`, so any copy of a block Value that was not kept
in a registered root is reliably detected on its next dereference.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import itertools
from array import array
from dataclasses import dataclass
from typing import Iterable, Iterator, Protocol, Sequence

from .errors import (
    HeapCorrupted,
    HeapExhausted,
    IndexOutOfBounds,
    InvalidPointer,
    NotABlock,
    NotImmediate,
    RuntimeReleased,
    StaleValue,
    TooSmall,
    ValueOutOfRange,
    WrongTag,
)

WORD_BITS = 64
WORD_MASK = (1 << WORD_BITS) - 1
WORD_BYTES = 8

NO_SCAN_TAG = 251
STRING_TAG = 252
CLOSURE_TAG = 247

POISON_PATTERN = 0xDEADBEEFDEADBEEF

MIN_SEMISPACE_WORDS = 16
HEAP_BASE = 16
SPACE_GAP = 16

LONG_LIMIT = 1 << 62

_TAG_MASK = 0xFF
_FORWARDED = 1 << 8
_FORWARD_IN_HEADER = 1 << 9
_SIZE_SHIFT = 10


@dataclass(frozen=True, slots=True)
class Value:
    """One machine word: an immediate integer or a block reference."""

    raw: int

    @property
    def is_immediate(self) -> bool:
        return bool(self.raw & 1)

    @property
    def is_block(self) -> bool:
        return not self.raw & 1

    def __repr__(self) -> str:
        if self.raw & 1:
            return f"Value(imm {decode_long(self)})"
        return f"Value(block {self.raw:#x})"


def encode_long(n: int) -> Value:
    if not -LONG_LIMIT < n < LONG_LIMIT:
        raise ValueOutOfRange(f"{n} does not fit in an immediate", site="encode_long")
    return Value(((n << 1) | 1) & WORD_MASK)


def decode_long(v: Value) -> int:
    raw = v.raw
    if not raw & 1:
        raise NotImmediate(f"{v!r} is a block reference", site="decode_long")
    if raw >> (WORD_BITS - 1):
        raw -= 1 << WORD_BITS
    return raw >> 1


UNIT = encode_long(0)


class Classification(enum.Enum):
    IMMEDIATE = "Immediate"
    LIVE_BLOCK = "LiveBlock"
    STALE = "Stale"
    OUT_OF_RANGE = "OutOfRange"


class LockState(enum.Enum):
    HELD = "held"
    RELEASED = "released"


@dataclass(frozen=True)
class CollectStats:
    words_live: int
    blocks_moved: int


class RootSlot:
    """A stable, registrable storage cell holding one Value.

    The collector reads ``cell`` during traversal and rewrites it when the
    block it references moves.  ``registered`` mirrors whether some provider
    currently enumerates the slot; it is informational, the defensive
    checks do a real scan over the providers.
    """

    __slots__ = ("cell", "origin", "registered")

    def __init__(self, cell: Value = UNIT, origin: str = "array"):
        self.cell = cell
        self.origin = origin
        self.registered = False

    def __repr__(self) -> str:
        state = "registered" if self.registered else "unregistered"
        return f"<RootSlot {self.origin} {state} {self.cell!r}>"


class RootProvider(Protocol):
    order: int

    def slots(self) -> Iterable[RootSlot]: ...


# provider ordering: legacy frames, regions, scenario arrays
ORDER_FRAMES = 0
ORDER_REGIONS = 1
ORDER_ARRAYS = 2


class Runtime:
    def __init__(self, semispace_words: int, torture: bool = False, defensive: bool = False):
        if semispace_words < MIN_SEMISPACE_WORDS:
            raise TooSmall(
                f"semispace of {semispace_words} words is below the minimum of "
                f"{MIN_SEMISPACE_WORDS}",
                site="runtime_new",
            )
        self.capacity = semispace_words
        self.spaces = [[0] * semispace_words, [POISON_PATTERN] * semispace_words]
        self.active = 0
        self.alloc_cursor = 0
        self.torture = torture
        self.defensive = defensive
        self.collections = 0
        self.root_providers: list[RootProvider] = []
        self._provider_keys: list[tuple[int, int]] = []
        self._provider_seq = itertools.count()
        self.lock_state = LockState.HELD
        self.context_id = 0
        self.closure_table: dict[int, object] = {}
        # "handle" | "warn" | "fail"; see mlroot.DefensiveConfig
        self.alias_policy = "handle"
        self.broken = False
        # lazily attached by legacy_ffi / mlregion
        self._frame_stack = None
        self._region_stack = None
        # payload indices of every block in the active space
        self._starts: set[int] = set()

    def __repr__(self) -> str:
        return (
            f"<Runtime {self.capacity}w active={self.active} "
            f"cursor={self.alloc_cursor} collections={self.collections}>"
        )

    def space_base(self, index: int) -> int:
        return HEAP_BASE + index * (self.capacity + SPACE_GAP)

    @property
    def active_space(self) -> list[int]:
        return self.spaces[self.active]

    @property
    def inactive_space(self) -> list[int]:
        return self.spaces[1 - self.active]

    def add_provider(self, provider: RootProvider) -> None:
        key = (provider.order, next(self._provider_seq))
        pos = bisect.bisect(self._provider_keys, key)
        self._provider_keys.insert(pos, key)
        self.root_providers.insert(pos, provider)

    def remove_provider(self, provider: RootProvider) -> None:
        for i, p in enumerate(self.root_providers):
            if p is provider:
                del self.root_providers[i]
                del self._provider_keys[i]
                return
        raise ValueError("provider is not registered")

    def iter_root_slots(self) -> Iterator[RootSlot]:
        for provider in self.root_providers:
            yield from provider.slots()

    def root_count(self) -> int:
        return sum(1 for _ in self.iter_root_slots())


def runtime_new(semispace_words: int, torture: bool = False, defensive: bool = False) -> Runtime:
    return Runtime(semispace_words, torture=torture, defensive=defensive)


class RootArray:
    """Scenario-owned array of registered root slots (the global-roots analog)."""

    order = ORDER_ARRAYS

    def __init__(self, rt: Runtime, count: int):
        self.rt = rt
        self._slots = [RootSlot(UNIT, "array") for _ in range(count)]
        for s in self._slots:
            s.registered = True
        rt.add_provider(self)
        self.live = True

    def slots(self) -> Iterable[RootSlot]:
        return self._slots

    def __getitem__(self, i: int) -> RootSlot:
        return self._slots[i]

    def __len__(self) -> int:
        return len(self._slots)

    def __iter__(self) -> Iterator[RootSlot]:
        return iter(self._slots)

    def release(self) -> None:
        if not self.live:
            return
        self.rt.remove_provider(self)
        for s in self._slots:
            s.registered = False
        self.live = False

    def __enter__(self) -> "RootArray":
        return self

    def __exit__(self, *exc) -> None:
        self.release()


def _check_lock(rt: Runtime, op: str) -> None:
    if rt.broken:
        raise HeapCorrupted("an earlier collection aborted", site=op)
    if rt.lock_state is LockState.RELEASED:
        raise RuntimeReleased("the runtime lock is released", site=op)


def _header(tag: int, size: int) -> int:
    return (size << _SIZE_SHIFT) | tag


def validate_value(rt: Runtime, v: Value) -> Classification:
    raw = v.raw
    if raw & 1:
        return Classification.IMMEDIATE
    if raw & (WORD_BYTES - 1):
        return Classification.OUT_OF_RANGE
    addr = raw >> 3
    for k in (0, 1):
        base = rt.space_base(k)
        idx = addr - base
        if 1 <= idx <= rt.capacity:
            if k != rt.active:
                return Classification.STALE
            if idx > rt.alloc_cursor:
                return Classification.OUT_OF_RANGE
            if idx in rt._starts:
                return Classification.LIVE_BLOCK
            # inside the used part of the active space but not a block start:
            # a leftover from an older cycle
            return Classification.STALE
    return Classification.OUT_OF_RANGE


def _in_heap_window(rt: Runtime, raw: int) -> bool:
    addr = raw >> 3
    return any(1 <= addr - rt.space_base(k) <= rt.capacity for k in (0, 1))


def _deref(rt: Runtime, v: Value, op: str) -> int:
    """Payload index of ``v`` in the active space, or raise."""
    raw = v.raw
    if raw & 1:
        raise NotABlock(f"{v!r} is immediate", site=op)
    idx = (raw >> 3) - rt.space_base(rt.active)
    if not raw & 7 and idx in rt._starts:
        return idx
    cls = validate_value(rt, v)
    if cls is Classification.STALE or (
        cls is Classification.OUT_OF_RANGE and not raw & 7 and _in_heap_window(rt, raw)
    ):
        raise StaleValue(f"{v!r} does not reference a live block", site=op)
    raise InvalidPointer(f"{v!r} points outside the heap", site=op)


def alloc(rt: Runtime, size: int, tag: int) -> Value:
    _check_lock(rt, "alloc")
    if size < 0:
        raise ValueError(f"negative block size {size}")
    if not 0 <= tag <= 255:
        raise ValueError(f"tag {tag} outside 0..255")
    if rt.torture:
        collect(rt)
    need = size + 1
    if rt.alloc_cursor + need > rt.capacity:
        collect(rt)
        if rt.alloc_cursor + need > rt.capacity:
            raise HeapExhausted(
                f"block of {size} words does not fit after collection "
                f"({rt.capacity - rt.alloc_cursor} words free)",
                site="alloc",
            )
    space = rt.active_space
    idx = rt.alloc_cursor
    space[idx] = _header(tag, size)
    fill = UNIT.raw if tag < NO_SCAN_TAG else 0
    space[idx + 1 : idx + need] = [fill] * size
    rt.alloc_cursor = idx + need
    rt._starts.add(idx + 1)
    return Value((rt.space_base(rt.active) + idx + 1) << 3)


def collect(rt: Runtime) -> CollectStats:
    _check_lock(rt, "collect")
    slots = list(rt.iter_root_slots())
    # validate roots before touching anything so a bad root leaves the heap intact
    for slot in slots:
        if not slot.cell.raw & 1:
            _deref(rt, slot.cell, "collect")

    a = rt.active
    frm, to = rt.spaces[a], rt.spaces[1 - a]
    fbase, tbase = rt.space_base(a), rt.space_base(1 - a)
    starts = rt._starts
    new_starts: set[int] = set()
    cursor = 0
    moved = 0

    def forward(raw: int) -> int:
        nonlocal cursor, moved
        idx = (raw >> 3) - fbase
        if raw & 7 or idx not in starts:
            rt.broken = True
            raise StaleValue(
                f"heap field holds {Value(raw)!r}, not a live block", site="collect"
            )
        h = frm[idx - 1]
        if h & _FORWARDED:
            if h & _FORWARD_IN_HEADER:
                return h >> _SIZE_SHIFT
            return frm[idx]
        size = h >> _SIZE_SHIFT
        to[cursor] = h
        to[cursor + 1 : cursor + 1 + size] = frm[idx : idx + size]
        new_idx = cursor + 1
        new_raw = (tbase + new_idx) << 3
        if size:
            frm[idx] = new_raw
            frm[idx - 1] = h | _FORWARDED
        else:
            frm[idx - 1] = (new_raw << _SIZE_SHIFT) | _FORWARD_IN_HEADER | _FORWARDED | (h & _TAG_MASK)
        new_starts.add(new_idx)
        cursor += size + 1
        moved += 1
        return new_raw

    for slot in slots:
        raw = slot.cell.raw
        if not raw & 1:
            slot.cell = Value(forward(raw))

    scan = 0
    while scan < cursor:
        h = to[scan]
        size = h >> _SIZE_SHIFT
        if (h & _TAG_MASK) < NO_SCAN_TAG:
            for j in range(scan + 1, scan + 1 + size):
                w = to[j]
                if not w & 1:
                    to[j] = forward(w)
        scan += size + 1

    frm[:] = [POISON_PATTERN] * rt.capacity
    rt.active = 1 - a
    rt.alloc_cursor = cursor
    rt._starts = new_starts
    rt.collections += 1
    return CollectStats(words_live=cursor, blocks_moved=moved)


def block_info(rt: Runtime, v: Value) -> tuple[int, int]:
    _check_lock(rt, "block_info")
    idx = _deref(rt, v, "block_info")
    h = rt.active_space[idx - 1]
    return h & _TAG_MASK, h >> _SIZE_SHIFT


def _scannable(rt: Runtime, v: Value, index: int, op: str) -> int:
    idx = _deref(rt, v, op)
    h = rt.active_space[idx - 1]
    tag = h & _TAG_MASK
    if tag >= NO_SCAN_TAG:
        raise WrongTag(f"block with tag {tag} is opaque", site=op)
    size = h >> _SIZE_SHIFT
    if not 0 <= index < size:
        raise IndexOutOfBounds(f"index {index} on block of size {size}", site=op)
    return idx + index


def read_field(rt: Runtime, v: Value, index: int) -> Value:
    _check_lock(rt, "read_field")
    return Value(rt.active_space[_scannable(rt, v, index, "read_field")])


def write_field(rt: Runtime, v: Value, index: int, x: Value) -> None:
    # no write barrier: the collector is not generational
    _check_lock(rt, "write_field")
    pos = _scannable(rt, v, index, "write_field")
    if rt.defensive and not x.raw & 1:
        _deref(rt, x, "write_field")
    rt.active_space[pos] = x.raw


def alloc_string(rt: Runtime, data: bytes) -> Value:
    """STRING_TAG block: payload word 0 is the byte length, then raw bytes."""
    nwords = (len(data) + WORD_BYTES - 1) // WORD_BYTES
    v = alloc(rt, 1 + nwords, STRING_TAG)
    idx = _deref(rt, v, "alloc_string")
    space = rt.active_space
    space[idx] = len(data)
    padded = data.ljust(nwords * WORD_BYTES, b"\0")
    for i in range(nwords):
        chunk = padded[i * WORD_BYTES : (i + 1) * WORD_BYTES]
        space[idx + 1 + i] = int.from_bytes(chunk, "little")
    return v


def string_bytes(rt: Runtime, v: Value) -> bytes:
    _check_lock(rt, "string_bytes")
    idx = _deref(rt, v, "string_bytes")
    space = rt.active_space
    tag = space[idx - 1] & _TAG_MASK
    if tag != STRING_TAG:
        raise WrongTag(f"expected a string block, found tag {tag}", site="string_bytes")
    length = space[idx]
    nwords = (length + WORD_BYTES - 1) // WORD_BYTES
    buf = b"".join(w.to_bytes(WORD_BYTES, "little") for w in space[idx + 1 : idx + 1 + nwords])
    return buf[:length]


def structural_serialize(rt: Runtime, slots: Sequence[RootSlot]) -> bytes:
    """Location-independent canonical form of the graph reachable from ``slots``.

    Grammar (ASCII)::

        imm    := "i" <decimal> ";"
        block  := "b" <id> ":" <tag> ":" <size> "(" value* ")"
        opaque := "o" <id> ":" <tag> ":" <size> "[" <hex words, "."-separated> "]"
        backref:= "r" <id> ";"

    Slots are separated by ``,``.  Block ids number blocks in depth-first
    first-visit order and are shared across all slots, so sharing and cycles
    are encoded as back references.
    """
    _check_lock(rt, "structural_serialize")
    space = rt.active_space
    ids: dict[int, int] = {}
    out: list[bytes] = []
    for k, slot in enumerate(slots):
        if k:
            out.append(b",")
        stack: list[int | bytes] = [slot.cell.raw]
        while stack:
            item = stack.pop()
            if isinstance(item, bytes):
                out.append(item)
                continue
            if item & 1:
                out.append(b"i%d;" % decode_long(Value(item)))
                continue
            seen = ids.get(item)
            if seen is not None:
                out.append(b"r%d;" % seen)
                continue
            idx = _deref(rt, Value(item), "structural_serialize")
            n = ids[item] = len(ids)
            h = space[idx - 1]
            tag, size = h & _TAG_MASK, h >> _SIZE_SHIFT
            payload = space[idx : idx + size]
            if tag >= NO_SCAN_TAG:
                words = b".".join(b"%x" % w for w in payload)
                out.append(b"o%d:%d:%d[%s]" % (n, tag, size, words))
                continue
            out.append(b"b%d:%d:%d(" % (n, tag, size))
            stack.append(b")")
            stack.extend(reversed(payload))
    return b"".join(out)


def serialize_values(rt: Runtime, values: Iterable[Value]) -> bytes:
    """structural_serialize over bare values (wrapped in throwaway slots)."""
    return structural_serialize(rt, [RootSlot(v, "scratch") for v in values])


def heap_digest(rt: Runtime) -> str:
    """Hash of the raw heap state, independent of the lock (observer only)."""
    h = hashlib.sha256()
    h.update(b"%d:%d:" % (rt.active, rt.alloc_cursor))
    for space in rt.spaces:
        h.update(array("Q", space).tobytes())
    return h.hexdigest()
