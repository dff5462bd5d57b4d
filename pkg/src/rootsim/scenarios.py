"""Scenario corpus, expectation matrix and runner.

Each scenario is a small binding program run on a fresh runtime.  It
declares, for every (torture, defensive) combination, the set of outcomes
it accepts.  Buggy scenarios accept a diagnostic; hazards that only fire
when a collection happens to occur accept either outcome without torture.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bindings, heap, legacy_ffi, mlregion, mlroot
from .bindings import ml_box, ml_unbox, site
from .errors import Diagnostic, RuntimeReleased, UnknownScenario, UnregisteredRoot
from .heap import RootArray, Runtime, Value

DEFAULT_SEMISPACE_WORDS = 4096
QSORT_ITEMS = 256
FOLD_ITEMS = 1000
REACQUIRED_ALLOCS = 10

MODES = [(False, False), (False, True), (True, False), (True, True)]


class ScenarioFailure(Exception):
    """A scenario's own consistency check failed."""


@dataclass(frozen=True)
class ModeConfig:
    torture: bool = False
    defensive: bool = False
    semispace_words: int = DEFAULT_SEMISPACE_WORDS
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "torture": self.torture,
            "defensive": self.defensive,
            "semispace_words": self.semispace_words,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Outcome:
    kind: str  # Clean | Diagnostic | Failure
    diagnostic: str | None = None
    site: str | None = None
    text: str | None = None

    @property
    def label(self) -> str:
        if self.kind == "Diagnostic":
            return f"Diagnostic({self.diagnostic})"
        return self.kind

    def to_json(self) -> dict:
        return {"kind": self.kind, "diagnostic": self.diagnostic, "site": self.site, "text": self.text}


CLEAN = Outcome("Clean")


@dataclass(frozen=True)
class ScenarioReport:
    name: str
    mode: ModeConfig
    outcome: Outcome
    result_digest: str | None
    root_count_delta: int
    collections: int

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode.to_json(),
            "outcome": self.outcome.to_json(),
            "result_digest": self.result_digest,
            "root_count_delta": self.root_count_delta,
            "collections": self.collections,
        }


@dataclass
class ScenarioContext:
    rt: Runtime
    rng: np.random.Generator
    metrics: dict = field(default_factory=dict)


Expectations = dict[tuple[bool, bool], frozenset[str]]


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    program: Callable[[ScenarioContext], "Value | None"]
    expectations: Expectations
    buggy: bool = False
    # scenarios sharing a key draw the same inputs for a given seed
    rng_key: str | None = None

    def expected(self, mode: ModeConfig) -> frozenset[str]:
        return self.expectations[(mode.torture, mode.defensive)]


SCENARIOS: dict[str, Scenario] = {}


def clean() -> frozenset[str]:
    return frozenset({"Clean"})


def diag(kind: str) -> frozenset[str]:
    return frozenset({f"Diagnostic({kind})"})


def everywhere(cell: frozenset[str]) -> Expectations:
    return {m: cell for m in MODES}


def by_torture(on: frozenset[str], off: frozenset[str]) -> Expectations:
    return {(t, d): on if t else off for t, d in MODES}


def by_defensive(on: frozenset[str], off: frozenset[str]) -> Expectations:
    return {(t, d): on if d else off for t, d in MODES}


def scenario(
    name: str,
    description: str,
    expectations: Expectations,
    buggy: bool = False,
    rng_key: str | None = None,
):
    def register(program):
        SCENARIOS[name] = Scenario(name, description, program, expectations, buggy, rng_key)
        return program

    return register


# -- helpers ---------------------------------------------------------------

def expected_tree_bytes(tree) -> bytes:
    """Canonical serialization of a sharing-free tree, built without the heap.

    ``tree`` is an int (immediate) or ``(tag, [children])``.
    """
    out: list[bytes] = []
    counter = [0]

    def walk(t):
        if isinstance(t, int):
            out.append(b"i%d;" % t)
            return
        tag, children = t
        n = counter[0]
        counter[0] += 1
        out.append(b"b%d:%d:%d(" % (n, tag, len(children)))
        for c in children:
            walk(c)
        out.append(b")")

    walk(tree)
    return b"".join(out)


def box_tree(n: int):
    return (0, [n])


def triplet_tree(x: int, y: int, z: int):
    return (0, [box_tree(x), (0, [box_tree(y), box_tree(z)])])


def _check_result(rt: Runtime, v: Value, tree, what: str) -> None:
    got = heap.serialize_values(rt, [v])
    want = expected_tree_bytes(tree)
    if got != want:
        raise ScenarioFailure(f"{what}: got {got!r}, expected {want!r}")


def _draw(ctx: ScenarioContext, k: int, lo: int = -1000, hi: int = 1000) -> list[int]:
    return [int(n) for n in ctx.rng.integers(lo, hi, size=k)]


def _boxed_args(ctx: ScenarioContext, values: list[int]) -> RootArray:
    args = RootArray(ctx.rt, len(values))
    for slot, n in zip(args, values):
        ml_box(ctx.rt, slot, n)
    return args


def _triplet(ctx: ScenarioContext, impl) -> Value:
    x, y, z = _draw(ctx, 3)
    with _boxed_args(ctx, [x, y, z]) as args:
        v = impl(ctx.rt, args[0].cell, args[1].cell, args[2].cell)
        _check_result(ctx.rt, v, triplet_tree(x, y, z), "triplet")
    return v


# -- corpus ----------------------------------------------------------------

@scenario("pair_legacy", "mk_pair_c_impl with CAMLparam/CAMLlocal frames", everywhere(clean()))
def _pair_legacy(ctx: ScenarioContext):
    a, b = _draw(ctx, 2)
    with _boxed_args(ctx, [a, b]) as args:
        v = bindings.mk_pair_c_impl(ctx.rt, args[0].cell, args[1].cell)
        _check_result(ctx.rt, v, (0, [box_tree(a), box_tree(b)]), "pair")
    return v


@scenario("pair_mlroot", "mk_pair through root-centric accessors", everywhere(clean()))
def _pair_mlroot(ctx: ScenarioContext):
    a, b = _draw(ctx, 2)
    with _boxed_args(ctx, [a, b]) as args:
        v = bindings.caml_mk_pair(ctx.rt, args[0].cell, args[1].cell)
        _check_result(ctx.rt, v, (0, [box_tree(a), box_tree(b)]), "pair")
    return v


@scenario(
    "triplet_buggy_legacy",
    "nested mk_pair calls with x loaded before the inner allocation",
    by_torture(on=diag("StaleValue"), off=clean()),
    buggy=True,
    rng_key="triplet",
)
def _triplet_buggy(ctx: ScenarioContext):
    return _triplet(ctx, bindings.c_triplet_buggy)


@scenario("triplet_fixed_legacy", "triplet with the intermediate pair kept in a local root",
          everywhere(clean()), rng_key="triplet")
def _triplet_fixed(ctx: ScenarioContext):
    return _triplet(ctx, bindings.c_triplet_fixed)


@scenario("triplet_mlroot", "caml_triplet built with root-centric mk_pair helpers",
          everywhere(clean()), rng_key="triplet")
def _triplet_mlroot(ctx: ScenarioContext):
    return _triplet(ctx, bindings.caml_triplet)


@scenario("triplet_region", "mk_triplet with regions and nested pair_helper calls",
          everywhere(clean()), rng_key="triplet")
def _triplet_region(ctx: ScenarioContext):
    return _triplet(ctx, bindings.region_mk_triplet)


@scenario(
    "triplet_aliased",
    "result slot used as input and output of mk_pair, alias policy 'fail'",
    everywhere(diag("AliasViolation")),
    buggy=True,
    rng_key="triplet",
)
def _triplet_aliased(ctx: ScenarioContext):
    mlroot.configure(ctx.rt, alias_policy="fail")
    return _triplet(ctx, bindings.caml_triplet_aliased)


@scenario(
    "triplet_aliased_handled",
    "aliased mk_pair under alias policy 'handle' (inputs copied first)",
    everywhere(clean()),
    rng_key="triplet",
)
def _triplet_aliased_handled(ctx: ScenarioContext):
    mlroot.configure(ctx.rt, alias_policy="handle")
    return _triplet(ctx, bindings.caml_triplet_aliased)


@scenario(
    "unregistered_root",
    "mlroot operation on a slot whose frame has already ended",
    by_defensive(on=diag("UnregisteredRoot"), off=clean()),
    buggy=True,
)
def _unregistered_root(ctx: ScenarioContext):
    rt = ctx.rt
    f = legacy_ffi.frame_begin(rt)
    s = legacy_ffi.frame_local(rt, f)
    mlroot.mlroot_alloc(rt, s, 2, 0)
    legacy_ffi.frame_end(rt, f)
    before = heap.heap_digest(rt)
    try:
        with site("after frame_end"):
            mlroot.mlroot_set_field_long(rt, s, 0, 42)
    except UnregisteredRoot:
        if heap.heap_digest(rt) != before:
            raise ScenarioFailure("heap mutated before UnregisteredRoot was raised")
        raise
    return None


def _qsort(ctx: ScenarioContext, impl, check: bool) -> Value:
    rt = ctx.rt
    values = _draw(ctx, QSORT_ITEMS, -10**6, 10**6)
    with RootArray(rt, 3) as ml:
        arr, cmp, out = ml
        mlroot.mlroot_alloc(rt, arr, len(values), 0)
        with RootArray(rt, 1) as tmp:
            for i, n in enumerate(values):
                ml_box(rt, tmp[0], n)
                mlroot.mlroot_set_field(rt, arr, i, tmp[0])
        cmp.cell = legacy_ffi.register_closure(rt, bindings.ml_compare_boxes)
        out.cell = impl(rt, arr.cell, cmp.cell)
        if check:
            with RootArray(rt, 1) as tmp:
                got = []
                for i in range(len(values)):
                    mlroot.mlroot_get_field(rt, tmp[0], out, i)
                    got.append(ml_unbox(rt, tmp[0]))
            if got != sorted(values):
                raise ScenarioFailure("sorted sequence differs from the host sort")
        v = out.cell
    return v


@scenario("qsort_callback", "sort 256 rooted items with an allocating ML comparator",
          everywhere(clean()))
def _qsort_callback(ctx: ScenarioContext):
    return _qsort(ctx, bindings.sort_ocaml_items, check=True)


@scenario(
    "qsort_callback_buggy",
    "same sort, items carry bare values that the comparator's allocations invalidate",
    by_torture(on=diag("StaleValue"), off=clean() | diag("StaleValue")),
    buggy=True,
)
def _qsort_callback_buggy(ctx: ScenarioContext):
    return _qsort(ctx, bindings.sort_ocaml_items_buggy, check=False)


@scenario("fold_array_subregions", "fold over 1000 elements with one sub-region per iteration",
          everywhere(clean()))
def _fold_array(ctx: ScenarioContext):
    rt = ctx.rt
    values = _draw(ctx, FOLD_ITEMS)
    with RootArray(rt, 2) as ml:
        acc, arr = ml
        mlroot.mlroot_alloc(rt, arr, len(values), 0)
        for i, n in enumerate(values):
            mlroot.mlroot_set_field_long(rt, arr, i, n)
        ml_box(rt, acc, 0)
        acc.cell, stats = bindings.fold_array(rt, acc.cell, arr.cell)
        ctx.metrics["fold"] = stats
        if stats.peak_live > stats.params + 1:
            raise ScenarioFailure(f"peak live_count {stats.peak_live} exceeds {stats.params + 1}")
        if stats.final_live != stats.params:
            raise ScenarioFailure(f"{stats.final_live - stats.params} roots leaked by the loop")
        if ml_unbox(rt, acc) != sum(values):
            raise ScenarioFailure("fold result differs from the host sum")
        v = acc.cell
    return v


def _forbidden_while_released(rt: Runtime, p: heap.RootSlot) -> dict[str, Callable[[], object]]:
    return {
        "alloc": lambda: heap.alloc(rt, 1, 0),
        "collect": lambda: heap.collect(rt),
        "read_field": lambda: heap.read_field(rt, p.cell, 0),
        "write_field": lambda: heap.write_field(rt, p.cell, 0, heap.UNIT),
        "block_info": lambda: heap.block_info(rt, p.cell),
        "alloc_string": lambda: heap.alloc_string(rt, b"x"),
        "structural_serialize": lambda: heap.structural_serialize(rt, [p]),
        "mlroot_alloc": lambda: mlroot.mlroot_alloc(rt, p, 1, 0),
        "mlroot_get_long": lambda: mlroot.mlroot_get_long(rt, p),
        "mlroot_set_long": lambda: mlroot.mlroot_set_long(rt, p, 1),
        "mlroot_get_field": lambda: mlroot.mlroot_get_field(rt, p, p, 0),
        "mlroot_set_field": lambda: mlroot.mlroot_set_field(rt, p, 0, p),
        "mlroot_set_field_long": lambda: mlroot.mlroot_set_field_long(rt, p, 0, 1),
        "mlroot_get_size": lambda: mlroot.mlroot_get_size(rt, p),
        "mlregion_new_root": lambda: mlregion.mlregion_new_root(rt),
        "mlregion_enter": lambda: mlregion.mlregion_enter(rt),
        "frame_begin": lambda: legacy_ffi.frame_begin(rt),
    }


@scenario("lock_release", "release the runtime, reacquire locally, allocate, release again",
          everywhere(clean()))
def _lock_release(ctx: ScenarioContext):
    rt = ctx.rt
    (n,) = _draw(ctx, 1)
    with _boxed_args(ctx, [n]) as args:
        region, (p,) = mlregion.region_begin_with_params(rt, [args[0].cell])
    before = heap.heap_digest(rt)
    cell_before = p.cell
    mlregion.mlregion_release_runtime_system(rt)
    for name, op in _forbidden_while_released(rt, p).items():
        try:
            op()
        except RuntimeReleased:
            pass
        else:
            raise ScenarioFailure(f"{name} ran while the runtime was released")
        if heap.heap_digest(rt) != before or p.cell != cell_before:
            raise ScenarioFailure(f"{name} modified the heap while released")
    mlregion.mlregion_reacquire_runtime_system(rt)
    held = []
    for i in range(REACQUIRED_ALLOCS):
        s = mlregion.mlregion_new_root(rt)
        mlroot.mlroot_alloc(rt, s, 2, 0)
        mlroot.mlroot_set_field(rt, s, 0, p)
        mlroot.mlroot_set_field_long(rt, s, 1, i)
        held.append(s)
    got = heap.structural_serialize(rt, held)
    want = _shared_box_pairs(n, REACQUIRED_ALLOCS)
    if got != want:
        raise ScenarioFailure("reacquired section built the wrong graph")
    mlregion.mlregion_rerelease_runtime_system(rt)
    mlregion.mlregion_acquire_runtime_system(rt)
    _check_result(rt, p.cell, box_tree(n), "parameter after lock round trip")
    return mlregion.region_return(rt, region, p)


def _shared_box_pairs(n: int, count: int) -> bytes:
    """Serialization of ``count`` pairs ``(box n, i)`` all sharing one box."""
    parts = [b"b0:0:2(b1:0:1(i%d;)i0;)" % n]
    for i in range(1, count):
        parts.append(b"b%d:0:2(r1;i%d;)" % (i + 1, i))
    return b",".join(parts)


@scenario("callback_exception", "ML closures returning normally and raising, called from a region",
          everywhere(clean()))
def _callback_exception(ctx: ScenarioContext):
    rt = ctx.rt
    (n,) = _draw(ctx, 1)
    with _boxed_args(ctx, [n]) as args:
        region, (p,) = mlregion.region_begin_with_params(rt, [args[0].cell])
    clo = mlregion.mlregion_new_root(rt)
    res = mlregion.mlregion_new_root(rt)
    for fn, want in ((bindings.ml_raise_boom, legacy_ffi.CallbackStatus.EXCEPTION),
                     (bindings.ml_succ_box, legacy_ffi.CallbackStatus.NORMAL)):
        clo.cell = legacy_ffi.register_closure(rt, fn)
        counts = [r.live_count for r in mlregion.regions(rt)]
        status = mlregion.region_callback_exn(rt, clo, [p], res)
        if status is not want:
            raise ScenarioFailure(f"expected {want.value}, got {status.value}")
        if [r.live_count for r in mlregion.regions(rt)] != counts:
            raise ScenarioFailure("callback changed region root counts")
        if region.disabled:
            raise ScenarioFailure("region still disabled after the callback")
        if status is legacy_ffi.CallbackStatus.EXCEPTION:
            if mlroot.mlroot_get_string(rt, res) != b"boom":
                raise ScenarioFailure("exception value lost")
        elif mlroot.mlroot_get_long(rt, res) != n + 1:
            raise ScenarioFailure("normal result wrong")
    return mlregion.region_return(rt, region, res)


def _entry_without_region(rt: Runtime, v: Value) -> Value:
    # forgot CAMLregion(&v)
    slot = mlregion.mlregion_new_root(rt)
    slot.cell = v
    return slot.cell


@scenario("region_missing", "external entry point that never sets up a region",
          everywhere(diag("NoCurrentRegion")), buggy=True)
def _region_missing(ctx: ScenarioContext):
    (n,) = _draw(ctx, 1)
    with _boxed_args(ctx, [n]) as args:
        with site("entry without region"):
            return _entry_without_region(ctx.rt, args[0].cell)


@scenario(
    "reentrant_region_missing",
    "entry point re-entered from an ML callback without its own region",
    everywhere(diag("RegionDisabled")),
    buggy=True,
)
def _reentrant_region_missing(ctx: ScenarioContext):
    rt = ctx.rt

    def ml_reenter(rt: Runtime, args, result) -> legacy_ffi.CallbackStatus:
        with site("re-entered entry point"):
            result.cell = _entry_without_region(rt, args[0].cell)
        return legacy_ffi.CallbackStatus.NORMAL

    (n,) = _draw(ctx, 1)
    with _boxed_args(ctx, [n]) as args:
        region, (p,) = mlregion.region_begin_with_params(rt, [args[0].cell])
        clo = mlregion.mlregion_new_root(rt)
        res = mlregion.mlregion_new_root(rt)
        clo.cell = legacy_ffi.register_closure(rt, ml_reenter)
        mlregion.region_callback_exn(rt, clo, [p], res)
        return mlregion.region_return(rt, region, res)


@scenario(
    "context_switch",
    "another context touches the region stack while the runtime is released",
    everywhere(diag("RegionContextMismatch")),
    buggy=True,
)
def _context_switch(ctx: ScenarioContext):
    rt = ctx.rt
    (n,) = _draw(ctx, 1)
    with _boxed_args(ctx, [n]) as args:
        region, (p,) = mlregion.region_begin_with_params(rt, [args[0].cell])
    mlregion.mlregion_release_runtime_system(rt)
    mlregion.switch_context(rt, 1)
    with site("context 1"):
        mlregion.mlregion_reacquire_runtime_system(rt)
    return None


# -- runner ----------------------------------------------------------------

def list_scenarios() -> list[tuple[str, str]]:
    return [(s.name, s.description) for s in SCENARIOS.values()]


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"no scenario named {name!r}", site="run_scenario") from None


def scenario_rng(name: str, seed: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


def run_scenario(name: str, mode: ModeConfig, metrics: dict | None = None) -> ScenarioReport:
    sc = get_scenario(name)
    rt = heap.runtime_new(mode.semispace_words, torture=mode.torture, defensive=mode.defensive)
    ctx = ScenarioContext(rt, scenario_rng(sc.rng_key or name, mode.seed))
    before = rt.root_count()
    digest = None
    try:
        result = sc.program(ctx)
        if result is not None:
            digest = hashlib.sha256(heap.serialize_values(rt, [result])).hexdigest()
        outcome = CLEAN
    except Diagnostic as d:
        outcome = Outcome("Diagnostic", diagnostic=d.kind, site=d.site)
    except ScenarioFailure as e:
        outcome = Outcome("Failure", text=str(e))
    except Exception as e:  # a crash inside a scenario is reported, not propagated
        outcome = Outcome("Failure", text=f"{type(e).__name__}: {e}")
    if metrics is not None:
        metrics.update(ctx.metrics)
    return ScenarioReport(
        name=name,
        mode=mode,
        outcome=outcome,
        result_digest=digest,
        root_count_delta=rt.root_count() - before,
        collections=rt.collections,
    )


def expectation_met(report: ScenarioReport) -> bool:
    return report.outcome.label in get_scenario(report.name).expected(report.mode)
