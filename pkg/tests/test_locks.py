from __future__ import annotations

import json
import random

import pytest

from criteria import coverage_mismatches
from generators import random_lock_module
from raceweaver.callgraph import build_call_graph
from raceweaver.kir import InstrRef, parse_module
from raceweaver.locks import LockConfig, LockConfigError, compute_lock_coverage, detect_lock_wrappers
from raceweaver.program import Program

T = "type T size 16 { field 0 8 lock; field 8 8 scalar }\n"


def _setup(text, config=None):
    program = Program(parse_module(text))
    cg = build_call_graph(program)
    wrappers = detect_lock_wrappers(program, cg, config)
    return program, cg, wrappers, compute_lock_coverage(program, cg, wrappers, config)


def _held_strs(cov, ref):
    return {str(r) for r in cov.locks_at(ref)}


WRAPPERS = T + """\
func my_lock(%p: *T) {
block b0:
  %l = addr %p : T [0]
  acquire %l
  ret
}
func outer(%p: *T) {
block b0:
  call my_lock(%p)
  ret
}
func maybe_lock(%p: *T, %c: scalar) {
block b0:
  br %c, b1, b2
block b1:
  %l = addr %p : T [0]
  acquire %l
  br b2
block b2:
  ret
}
func my_unlock(%p: *T) {
block b0:
  %l = addr %p : T [0]
  release %l
  ret
}
func rd_lock(%p: *T) {
block b0:
  %l = addr %p : T [0]
  acquire_read %l
  ret
}
"""


def test_direct_wrapper_detected():
    _, _, w, _ = _setup(WRAPPERS)
    (role,) = w["my_lock"]
    assert (role.kind, role.mode, role.arg_index) == ("acquire", "exclusive", 0)


def test_two_level_wrapper_found_in_a_later_round():
    _, _, w, _ = _setup(WRAPPERS)
    (inner,) = w["my_lock"]
    (outer,) = w["outer"]
    assert outer.kind == "acquire" and outer.round > inner.round


def test_conditional_acquire_is_not_a_wrapper():
    _, _, w, _ = _setup(WRAPPERS)
    assert "maybe_lock" not in w or not w["maybe_lock"]


def test_release_and_read_modes_propagate():
    _, _, w, _ = _setup(WRAPPERS)
    assert w["my_unlock"][0].kind == "release"
    assert w["rd_lock"][0].mode == "read"


def test_wrapper_call_covers_following_access():
    text = WRAPPERS + """\
func user(%p: *T) {
block b0:
  call outer(%p)
  %f = addr %p : T [8]
  store 1, %f
  call my_unlock(%p)
  store 2, %f
  ret
}
"""
    _, _, _, cov = _setup(text)
    assert _held_strs(cov, InstrRef("user", "b0", 2)) == {"T.0"}
    assert _held_strs(cov, InstrRef("user", "b0", 4)) == set()


def _entry_module(second_site_locks):
    extra = "\n".join(f"  acquire @{g}" for g in second_site_locks)
    return ("global L : lock\nglobal M : lock\n"
            "func F() {\nblock b0:\n  ret\n}\n"
            "func a() {\nblock b0:\n  acquire @L\n  call F()\n  release @L\n  ret\n}\n"
            f"func b() {{\nblock b0:\n{extra}\n  call F()\n  ret\n}}\n")


def test_entry_fact_is_caller_intersection():
    _, _, _, cov = _setup(_entry_module(["L", "M"]))
    assert _held_strs(cov, InstrRef("F", "b0", 0)) == {"@L"}


def test_entry_fact_with_an_unlocked_caller_is_empty():
    _, _, _, cov = _setup(_entry_module([]).replace("\n\n  call F()", "\n  call F()"))
    assert _held_strs(cov, InstrRef("F", "b0", 0)) == set()


def test_chain_implication_adds_suffix_only():
    text = ("type T size 16 { field 0 8 lock; field 8 8 scalar }\n"
            "type P size 24 { field 0 8 lock; field 8 16 T }\n"
            "func f(%p: *P, %t: *T) {\nblock b0:\n  %l = addr %p : P [8] [0]\n  acquire %l\n"
            "  %x = cmp eq 0, 0\n  release %l\n  %m = addr %t : T [0]\n  acquire %m\n  %y = cmp eq 0, 0\n  ret\n}\n")
    _, _, _, cov = _setup(text)
    assert _held_strs(cov, InstrRef("f", "b0", 2)) == {"P.8→T.0", "T.0"}
    assert _held_strs(cov, InstrRef("f", "b0", 6)) == {"T.0"}


def test_unresolved_lock_operand_contributes_nothing():
    text = ("func f(%x: scalar) {\nblock b0:\n  acquire %x\n  %y = cmp eq %x, 0\n  ret\n}\n")
    _, _, _, cov = _setup(text)
    assert cov.locks_at(InstrRef("f", "b0", 1)) == frozenset()
    assert cov.analysis.unresolved


def test_locks_survive_loops_without_release():
    text = T + ("func f(%p: *T, %c: scalar) {\nblock b0:\n  %l = addr %p : T [0]\n  acquire %l\n  br b1\n"
                "block b1:\n  %v = cmp eq %c, 0\n  br %c, b1, b2\nblock b2:\n  release %l\n  ret\n}\n")
    _, _, _, cov = _setup(text)
    assert _held_strs(cov, InstrRef("f", "b1", 0)) == {"T.0"}


def test_recursion_terminates_and_stays_sound():
    text = T + ("func r(%p: *T, %c: scalar) {\nblock b0:\n  br %c, b1, b2\nblock b1:\n  %l = addr %p : T [0]\n"
                "  acquire %l\n  call r(%p, %c)\n  br b2\nblock b2:\n  ret\n}\n"
                "func top(%p: *T, %c: scalar) {\nblock b0:\n  call r(%p, %c)\n  ret\n}\n")
    _, _, w, cov = _setup(text)
    assert "r" not in w or not w["r"]
    assert _held_strs(cov, InstrRef("r", "b0", 0)) == set()


def test_custom_lock_primitives():
    config = LockConfig.from_dict({"acquire": [{"name": "spin_lock"}], "release": [{"name": "spin_unlock"}]})
    text = T + ("func f(%p: *T) {\nblock b0:\n  %l = addr %p : T [0]\n  call spin_lock(%l)\n"
                "  %f = addr %p : T [8]\n  store 1, %f\n  call spin_unlock(%l)\n  ret\n}\n")
    _, _, _, cov = _setup(text, config)
    assert _held_strs(cov, InstrRef("f", "b0", 3)) == {"T.0"}


def test_lock_config_rejects_overlapping_sets(tmp_path):
    with pytest.raises(LockConfigError):
        LockConfig.from_dict({"acquire": [{"name": "x"}], "release": [{"name": "x"}]})
    with pytest.raises(LockConfigError):
        LockConfig.from_dict({"acquire": [{"name": "x", "mode": "shared"}]})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(LockConfigError):
        LockConfig.load(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"asserts": ["lockdep_assert_held"]}))
    assert LockConfig.load(good).asserts == frozenset({"lockdep_assert_held"})


@pytest.mark.parametrize("chunk", range(4))
def test_coverage_matches_path_oracle(chunk):
    bad = []
    for seed in range(chunk * 60, chunk * 60 + 60):
        bad.extend(coverage_mismatches(seed))
    assert bad == []


def test_coverage_is_stable_across_workers():
    for seed in range(10):
        m = parse_module(random_lock_module(random.Random(seed)))
        program = Program(m)
        cg = build_call_graph(program)
        one = compute_lock_coverage(program, cg, workers=1).held
        four = compute_lock_coverage(program, cg, workers=4).held
        assert one == four
