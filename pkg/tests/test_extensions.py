from __future__ import annotations

from conftest import CORPUS, analyze_text
from oracles import lock_held_along
from raceweaver.kir import InstrRef, parse_module
from raceweaver.pipeline import AnalysisConfig, analyze_module

M = "type m size 16 { field 0 8 lock; field 8 8 scalar }\n"
MUST = "func must_hold(%s: *m) {\nblock b0:\n  %l = addr %s : m [0]\n  assert_held %l\n  ret\n}\n"


def test_assertion_two_callers_witness_is_confirmed_by_path_replay():
    module = parse_module((CORPUS / "lockdep-two-callers.kir").read_text())
    a = analyze_module(module, AnalysisConfig())
    (v,) = a.assertion_violations
    assert v.site == InstrRef("must_hold", "b0", 1)
    assert [str(s) for s in v.witness] == ["bad_caller:b0:0"]
    assert str(v.lock) == "m.0"
    assert lock_held_along(module, list(v.witness), "m.0", v.site) is False
    good = InstrRef("good_caller", "b0", 2)
    assert lock_held_along(module, [good], "m.0", v.site) is True


def test_dominating_acquire_satisfies_assertion():
    a = analyze_text(M + "func f(%s: *m) {\nblock b0:\n  %l = addr %s : m [0]\n  acquire %l\n  assert_held %l\n"
                     "  release %l\n  ret\n}\n")
    assert a.assertion_violations == []


def test_acquire_on_one_branch_only_violates():
    a = analyze_text(M + "func f(%s: *m, %c: scalar) {\nblock b0:\n  %l = addr %s : m [0]\n  br %c, b1, b2\n"
                     "block b1:\n  acquire %l\n  br b2\nblock b2:\n  assert_held %l\n  ret\n}\n")
    (v,) = a.assertion_violations
    assert v.witness == ()


def test_all_callers_holding_the_lock_satisfy_assertion():
    callers = "".join(
        f"func c{i}(%s: *m) {{\nblock b0:\n  %l = addr %s : m [0]\n  acquire %l\n  call must_hold(%s)\n"
        f"  release %l\n  ret\n}}\n" for i in range(3))
    assert analyze_text(M + MUST + callers).assertion_violations == []


def test_deep_witness_is_shortest():
    text = M + MUST + (
        "func mid(%s: *m) {\nblock b0:\n  call must_hold(%s)\n  ret\n}\n"
        "func top(%s: *m) {\nblock b0:\n  call mid(%s)\n  ret\n}\n"
        "func ok(%s: *m) {\nblock b0:\n  %l = addr %s : m [0]\n  acquire %l\n  call mid(%s)\n  release %l\n  ret\n}\n")
    module = parse_module(text)
    (v,) = analyze_module(module, AnalysisConfig()).assertion_violations
    assert [str(s) for s in v.witness] == ["top:b0:0", "mid:b0:0"]
    assert lock_held_along(module, list(v.witness), "m.0", v.site) is False


def test_lockdep_extension_can_be_disabled():
    module = parse_module((CORPUS / "lockdep-two-callers.kir").read_text())
    assert analyze_module(module, AnalysisConfig(extensions=frozenset())).assertion_violations == []


def test_rw_violation_for_write_under_read_lock():
    module = parse_module((CORPUS / "tipc-rwlock.kir").read_text())
    (r,) = analyze_module(module, AnalysisConfig()).rw_violations
    assert r.access.instr.function == "tipc_lookup" and r.access.kind == "write"
    assert str(r.lock) == "tipc.0" and r.held_mode == "read"


def _rw(op_under_read):
    return M + ("func w(%s: *m) {\nblock b0:\n  %l = addr %s : m [0]\n  acquire_write %l\n  %f = addr %s : m [8]\n"
                "  store 1, %f\n  release_write %l\n  ret\n}\n"
                "func r(%s: *m) {\nblock b0:\n  %l = addr %s : m [0]\n  acquire_read %l\n  %f = addr %s : m [8]\n"
                + op_under_read + "  release_read %l\n  ret\n}\n")


def test_rw_reads_under_read_lock_are_fine():
    assert analyze_text(_rw("  %v = load %f\n")).rw_violations == []


def test_rw_write_under_write_lock_is_fine():
    assert analyze_text(_rw("  %v = load %f\n").replace("acquire_read", "acquire_write")
                        .replace("release_read", "release_write")).rw_violations == []


def test_rw_write_under_read_lock_reported_once():
    a = analyze_text(_rw("  store 2, %f\n"))
    assert len(a.rw_violations) == 1
    assert analyze_text(_rw("  store 2, %f\n"), extensions=frozenset()).rw_violations == []
