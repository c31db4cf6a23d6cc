import pytest
from hypothesis import given, strategies as st

from tagflow.engine import (
    DEAD, ROOT, UNIT, Deadlock, EngineFault, EvaluationError, Frame, StepLimitExceeded, Tag,
    TagDepthExceeded, Token, fire, run, run_dynamic,
)
from tagflow.frontend import compile_source, lower
from tagflow.graph import Graph, Op, call, const, output, ret
from tagflow.interpreter import evaluate
from tagflow.transform import eliminate_recursion

from conftest import loop_sum, programs

FIB = "result = fib({n})\nfib(n) = if n < 2 then n else fib(n - 1) + fib(n - 2)\n"


# {{{ tags

def test_tag_push_and_frames():
    t = ROOT.push(Frame("call", 1)).push(Frame("call", 0))
    assert t.frames() == [Frame("call", 0), Frame("call", 1)]
    assert repr(t) == "[C0,C1]"
    assert len(t) == 2
    assert Tag.from_frames(t.frames()) == t
    assert hash(Tag.from_frames(t.frames())) == hash(t)


@given(st.lists(st.tuples(st.sampled_from(["loop", "call"]), st.integers(0, 50)), max_size=12))
def test_tag_equality_is_structural(frames):
    fs = [Frame(k, v) for k, v in frames]
    a, b = Tag.from_frames(fs), Tag.from_frames(fs)
    assert a == b and hash(a) == hash(b)
    if fs:
        assert a != Tag.from_frames(fs[1:])

# }}}


# {{{ firing rule

def test_fire_arith_and_dead():
    t = ROOT
    assert fire(Op("Add"), [Token(t, 2.0), Token(t, 3.0)])[0] == (0, Token(t, 5.0))
    assert fire(Op("Mul"), [Token(t, 2.0), Token(t, DEAD)])[0][1].dead


def test_fire_switch_routes():
    out = dict(fire(Op("Switch"), [Token(ROOT, True), Token(ROOT, 7.0)]))
    assert out[0].payload == 7.0 and out[1].dead
    out = dict(fire(Op("Switch"), [Token(ROOT, False), Token(ROOT, 7.0)]))
    assert out[1].payload == 7.0 and out[0].dead


def test_fire_merge_prefers_live():
    out = fire(Op("Merge"), [Token(ROOT, DEAD), Token(ROOT, 4.0)])
    assert out[0] == (0, Token(ROOT, 4.0))


def test_fire_call_return_tagging():
    out = dict(fire(call(3), [Token(ROOT, 1.0)]))
    inner = out[0].tag
    assert inner.frames() == [Frame("call", 3)]
    assert out[-1] == Token(ROOT, UNIT)   # control stays at the caller's tag
    back = fire(ret(3), [Token(inner, 9.0), Token(inner, UNIT)])
    assert back[0] == (0, Token(ROOT, 9.0))
    assert fire(ret(2), [Token(inner, 9.0), Token(inner, UNIT)]) == []


def test_fire_dead_call_only_signals_control():
    out = fire(call(0), [Token(ROOT, DEAD)])
    assert out == [(-1, Token(ROOT, DEAD))]


def test_fire_return_on_loop_frame_is_fault():
    t = ROOT.push(Frame("loop", 0))
    with pytest.raises(EngineFault):
        fire(ret(0), [Token(t, 1.0)])


def test_fire_next_increments_and_drops_dead():
    t = ROOT.push(Frame("loop", 4))
    out = fire(Op("Next"), [Token(t, 1.0)])
    assert out[0][1].tag.frames()[0] == Frame("loop", 5)
    assert fire(Op("Next"), [Token(t, DEAD)]) == []


def test_fire_mismatched_tags_rejected():
    with pytest.raises(ValueError):
        fire(Op("Add"), [Token(ROOT, 1.0), Token(ROOT.push(Frame("call", 0)), 1.0)])

# }}}


# {{{ whole runs

@pytest.mark.parametrize("n, expect", [(0, 0.0), (1, 1.0), (2, 3.0), (5, 15.0), (20, 210.0)])
def test_while_loop(n, expect):
    value, stats = run(loop_sum(n))
    assert value == expect
    assert stats.max_tag_depth == 1
    assert stats.live_firings["next_i"] == n


def test_fact_static_and_dynamic(fact_source):
    p = compile_source(fact_source)
    g = eliminate_recursion(p)
    v, st = run(g)
    assert v == 11.0
    assert st.graph_nodes_before == st.graph_nodes_after == len(g.nodes)
    vd, sd = run_dynamic(p)
    assert vd == 11.0
    assert sd.clones["fact"] == 3
    assert sd.nodes_materialized > len(p.graphs["fact"].nodes)


@pytest.mark.parametrize("n, expect", [(10, 55.0), (15, 610.0)])
def test_fib(n, expect):
    p = compile_source(FIB.format(n=n))
    assert run(eliminate_recursion(p))[0] == expect
    assert run_dynamic(p)[0] == expect


def test_ack_and_tak():
    ack = ("result = ack(2, 3)\nack(m, n) = if m == 0 then n + 1 else if n == 0 then ack(m - 1, 1) "
           "else ack(m - 1, ack(m, n - 1))")
    p = compile_source(ack)
    assert run(eliminate_recursion(p))[0] == 9.0 == run_dynamic(p)[0]


def test_dead_recursive_branch_terminates():
    p = compile_source("result = f(0)\nf(n) = if n == 0 then 42 else f(n - 1) * 2")
    v, st = run(eliminate_recursion(p))
    assert v == 42.0
    assert st.max_tag_depth == 1


def test_tag_depth_limit():
    p = compile_source("result = f(1)\nf(n) = f(n + 1)")
    with pytest.raises(TagDepthExceeded):
        run(eliminate_recursion(p), max_tag_depth=50)


def test_step_limit():
    p = compile_source(FIB.format(n=12))
    with pytest.raises(StepLimitExceeded):
        run(eliminate_recursion(p), max_steps=100)


def test_division_by_zero():
    with pytest.raises(EvaluationError):
        run(eliminate_recursion(compile_source("result = f(0)\nf(x) = 1 / x")))


def test_division_by_zero_in_dead_branch_is_harmless():
    p = compile_source("result = f(0)\nf(x) = if x == 0 then 0 else 1 / x")
    assert run(eliminate_recursion(p))[0] == 0.0


def test_deadlock_reports_stuck_instances():
    g = Graph("main", 0)
    g.add_node("c", const(1.0))
    g.add_node("k", call(0))
    g.add_node("a", Op("Add"))
    g.add_node("o", output(0))
    g.connect("c", 0, "k", 0)
    g.connect("k", 0, "a", 0)     # inner tag
    g.add_node("t", const(2.0))
    g.connect_control("k", "t")   # root tag
    g.connect("t", 0, "a", 1)
    g.connect("a", 0, "o", 0)
    with pytest.raises(Deadlock) as ei:
        run(g)
    assert {n for n, _ in ei.value.stuck} == {"a"}


def test_fncall_graph_rejected_by_static_run(fact_source):
    with pytest.raises(EngineFault):
        run(compile_source(fact_source).graphs["fact"])


def test_trace_lines(fact_source):
    lines = []
    run(eliminate_recursion(compile_source(fact_source)), trace=lines.append)
    assert lines[-1] == "node=result.out5 tag=[] op=Output out=11"
    assert any("tag=[C1,C1,C0]" in line for line in lines)


def test_track_tags_counts_instances(fact_source):
    _, st = run(eliminate_recursion(compile_source(fact_source)), track_tags=True)
    assert st.firings_by_tag[("fact.mul7", Tag.from_frames([Frame("call", 0)]))] == 1
    assert st.max_live_tags >= 1

# }}}


# {{{ properties

@given(programs())
def test_static_dynamic_interpreter_agree(ast):
    try:
        expect = evaluate(ast)
    except Exception:
        return
    p = lower(ast)
    assert run(eliminate_recursion(p))[0] == expect
    assert run_dynamic(p)[0] == expect


@given(programs(), st.integers(0, 10_000), st.booleans())
def test_schedule_independence(ast, seed, concurrent):
    try:
        evaluate(ast)
    except Exception:
        return
    g = eliminate_recursion(lower(ast))
    v0, s0 = run(g)
    v1, s1 = run(g, seed=seed, concurrent=concurrent)
    assert v0 == v1
    assert s0.firings == s1.firings

# }}}
