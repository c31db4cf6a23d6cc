import pytest
from hypothesis import settings, strategies as st

from tagflow.frontend import Apply, Ast, BinOp, Definition, If, Neg, Not, Number, Var
from tagflow.graph import Graph, Op, Program, const, is_exclusive_merge, merge, output
from tagflow.transform import collect_call_sites, reachable_functions

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_ARITH = ["+", "-", "*"]
_CMP = ["==", "<"]


@st.composite
def expressions(draw, params, callees, depth=3):
    """Random expression over *params* calling functions in *callees* (name -> arity)."""
    leaves = [st.builds(Number, st.integers(0, 9).map(float))]
    if params:
        leaves.append(st.sampled_from(params).map(Var))
    if depth <= 0:
        return draw(st.one_of(leaves))
    kind = draw(st.sampled_from(["leaf", "bin", "bin", "neg", "if", "call", "call"]))
    sub = lambda: draw(expressions(params, callees, depth - 1))  # noqa: E731
    if kind == "bin":
        return BinOp(draw(st.sampled_from(_ARITH)), sub(), sub())
    if kind == "neg":
        return Neg(sub())
    if kind == "if":
        cond = BinOp(draw(st.sampled_from(_CMP)), sub(), sub())
        if draw(st.booleans()):
            cond = Not(cond)
        return If(cond, sub(), sub())
    if kind == "call" and callees:
        name = draw(st.sampled_from(sorted(callees)))
        if callees[name] == 0:
            return Var(name)
        return Apply(name, tuple(sub() for _ in range(callees[name])))
    return draw(st.one_of(leaves))


@st.composite
def programs(draw, recursive=False, max_functions=4):
    """Random well-scoped program whose entry is ``result``.

    Non-recursive programs only call later-defined functions and always
    terminate; recursive ones may call anything (for structural tests).
    """
    n = draw(st.integers(1, max_functions))
    arity = {f"f{i}": draw(st.integers(0, 3)) for i in range(n)}
    defs = []
    for i in range(n):
        name = f"f{i}"
        params = [f"x{j}" for j in range(arity[name])]
        if recursive:
            callees = dict(arity)
        else:
            callees = {f"f{j}": arity[f"f{j}"] for j in range(i + 1, n)}
        defs.append(Definition(name, tuple(params), draw(expressions(params, callees))))
    entry_body = draw(expressions([], arity, depth=2))
    # make sure at least f0 is reachable
    f0 = Var("f0") if arity["f0"] == 0 else Apply("f0", tuple(Number(float(k)) for k in range(arity["f0"])))
    entry = Definition("result", (), BinOp("+", entry_body, f0))
    return Ast((entry, *defs))


@pytest.fixture
def fact_source():
    return "result = fact(3) + 5\nfact(n) = if n == 1 then n else n * fact(n - 1)\n"


def loop_sum(n: int) -> Graph:
    """while i < n+1: s += i; i += 1 -- built by hand from Enter/Merge/Switch/Next/Exit."""
    g = Graph("main", 0)
    g.add_node("i0", const(1.0))
    g.add_node("s0", const(0.0))
    g.add_node("lim", const(n + 1.0))
    g.add_node("one", const(1.0))
    g.add_node("lt", Op("Lt"))
    for v in "is":
        g.add_node(f"enter_{v}", Op("Enter"))
        g.add_node(f"m_{v}", merge(exclusive=True))
        g.add_node(f"sw_{v}", Op("Switch"))
        g.add_node(f"next_{v}", Op("Next"))
        g.add_node(f"exit_{v}", Op("Exit"))
        g.connect(f"{v}0", 0, f"enter_{v}", 0)
        g.connect(f"enter_{v}", 0, f"m_{v}", 0)
        g.connect(f"next_{v}", 0, f"m_{v}", 1)
        g.connect("lt", 0, f"sw_{v}", 0)
        g.connect(f"m_{v}", 0, f"sw_{v}", 1)
        g.connect(f"sw_{v}", 1, f"exit_{v}", 0)
    g.connect("m_i", 0, "lt", 0)
    g.connect("lim", 0, "lt", 1)
    g.add_node("inc", Op("Add"))
    g.connect("sw_i", 0, "inc", 0)
    g.connect("one", 0, "inc", 1)
    g.connect("inc", 0, "next_i", 0)
    g.add_node("acc", Op("Add"))
    g.connect("sw_s", 0, "acc", 0)
    g.connect("sw_i", 0, "acc", 1)
    g.connect("acc", 0, "next_s", 0)
    g.add_node("out", output(0))
    g.connect("exit_s", 0, "out", 0)
    return g


def count_law(p: Program, g: Graph) -> dict:
    """Per callee: (Call nodes, exclusive Merges, Returns) and (n*m, m, n)."""
    sites = collect_call_sites(p, reachable_functions(p, p.entry))
    res = {}
    for f, ss in sites.items():
        m, n = p.graphs[f].arity, len(ss)
        params = {f"{f}.{x}" for x in p.graphs[f].params()}
        calls = [e.src for e in g.data_edges if e.dst in params and g.nodes[e.src].kind == "Call"]
        merges = [x for x in params if is_exclusive_merge(g.nodes[x])]
        # each Return hangs off the first Call of its site by a control edge
        rets = {d for s, d in g.control_edges if s in set(calls) and g.nodes[d].kind == "Return"}
        res[f] = ((len(calls), len(merges), len(rets)), (n * m, m, n))
    return res
