"""Reverse-mode differentiation of dataflow programs.

For every function ``f`` of a program a gradient graph ``grad.f`` is derived:
it takes the parameters of ``f`` plus the output gradient ``dy`` and returns
``(y, dx_0, ..., dx_{m-1})``.  A call ``z = h(a)`` inside ``f`` keeps its
forward call and gains a call ``grad.h(a, dz)``; that is the *naive* scheme,
where every gradient call re-executes the forward body of its callee.

:func:`fuse_forward_backward` pairs each forward call with the gradient call
sharing its arguments and replaces both by one call to ``fused.h``.  The
paired graph is cyclic at the function level (``dz`` depends on ``z``), which
the static tagged graph tolerates because each parameter enters the callee
through its own ``Call`` node.  Dynamic expansion cannot run fused programs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import Graph, Op, Program, const, fncall, merge, output, param, topological_order

GRAD_PREFIX = "grad."
FUSED_PREFIX = "fused."
DRIVER = "grad_driver"


class DifferentiationError(Exception):
    pass


#: Kinds whose inputs receive no gradient (piecewise constant results).
NON_DIFFERENTIABLE = frozenset({"Eq", "Lt", "Not"})
#: Kinds that carry no gradient information at all.
NO_INPUTS = frozenset({"Const", "Param"})
UNSUPPORTED = frozenset({"Enter", "Exit", "Next", "Send", "Recv", "Call", "Return"})

GRADIENT_RULES = {
    "Add": "dx1 = dy, dx2 = dy",
    "Sub": "dx1 = dy, dx2 = -dy",
    "Mul": "dx1 = dy*x2, dx2 = dy*x1",
    "Div": "dx1 = dy/x2, dx2 = -(dy*x1/(x2*x2))",
    "Neg": "dx = -dy",
    "Identity": "dx = dy",
    "Switch": "dx = Merge(dy_true, dy_false); no gradient for the predicate",
    "Merge": "dx_i = Switch(pred, dy) port i",
    "FnCall": "dx = grad.h(x, dy)",
    "Eq": "no gradient", "Lt": "no gradient", "Not": "no gradient",
}


def grad_name(f: str) -> str:
    return GRAD_PREFIX + f


def fused_name(f: str) -> str:
    return FUSED_PREFIX + f


class _Builder:
    def __init__(self, g: Graph):
        self.src = g
        self.out = Graph(grad_name(g.name), g.arity + 1)
        self.counter = 0
        self.sites = 0
        for n, op in g.nodes.items():
            if op.kind != "Output":
                self.out.add_node(n, op)
        for e in g.data_edges:
            if g.nodes[e.dst].kind != "Output":
                self.out.connect(*e)
        for s, d in g.control_edges:
            self.out.connect_control(s, d)
        self.dy = self.out.add_node("g.dy", param(g.arity))

    def node(self, kind: str, args: tuple = (), *inputs: tuple[str, int]) -> tuple[str, int]:
        self.counter += 1
        nid = self.out.add_node(f"g{self.counter}.{kind.lower()}", Op(kind, args))
        for i, (s, p) in enumerate(inputs):
            self.out.connect(s, p, nid, i)
        return nid, 0

    def zeros_like(self, ref: tuple[str, int]) -> tuple[str, int]:
        # keeps the tag and deadness of ref
        self.counter += 1
        c = self.out.add_node(f"g{self.counter}.zero", const(0.0))
        return self.node("Mul", (), ref, (c, 0))

    def sum(self, terms: list[tuple[str, int]]) -> tuple[str, int]:
        acc = terms[0]
        for t in terms[1:]:
            acc = self.node("Add", (), acc, t)
        return acc


def _active_nodes(g: Graph) -> set[str]:
    """Nodes whose value depends on a parameter through data edges."""
    succ: dict[str, list[str]] = {n: [] for n in g.nodes}
    for e in g.data_edges:
        succ[e.src].append(e.dst)
    seen = set(g.params())
    stack = list(seen)
    while stack:
        for d in succ[stack.pop()]:
            if d not in seen:
                seen.add(d)
                stack.append(d)
    return seen


def differentiate_graph(g: Graph) -> Graph:
    """Build ``grad.<g.name>``: inputs ``(x..., dy)``, outputs ``(y, dx...)``.

    Forward nodes keep their ids; gradient nodes get ids starting with ``g``.
    Calls to ``h`` become calls to ``grad.h`` alongside the forward call.
    """
    for n, op in g.nodes.items():
        if op.kind in UNSUPPORTED:
            raise DifferentiationError(f"{g.name}.{n}: no gradient for {op.kind}")
    outs = g.outputs()
    if len(outs) != 1:
        raise DifferentiationError(f"{g.name}: expected one output, found {len(outs)}")
    b = _Builder(g)
    ins = g.inputs_of()
    active = _active_nodes(g)
    contrib: dict[tuple[str, int], list[tuple[str, int]]] = {}

    def add(ref: tuple[str, int], gr: tuple[str, int]) -> None:
        if ref[0] in active:
            contrib.setdefault(ref, []).append(gr)

    def grad_of(n: str, port: int = 0) -> tuple[str, int] | None:
        terms = contrib.get((n, port))
        return b.sum(terms) if terms else None

    y_src = ins[outs[0]][0]
    b.out.add_node("g.out0", output(0))
    b.out.connect(y_src[0], y_src[1], "g.out0", 0)
    add(y_src, (b.dy, 0))

    for n in reversed(topological_order(g)):
        op = g.nodes[n]
        k = op.kind
        if k in NO_INPUTS or k == "Output" or k in NON_DIFFERENTIABLE or n not in active:
            continue
        x = ins[n]
        if k == "Switch":
            g0, g1 = grad_of(n, 0), grad_of(n, 1)
            if g0 is None and g1 is None:
                continue
            g0 = g0 or b.zeros_like((n, 0))
            g1 = g1 or b.zeros_like((n, 1))
            m = b.node("Merge", (), g0, g1)
            add(x[1], m)
            continue
        if k == "FnCall":
            dz = grad_of(n, 0)
            if dz is None:
                continue
            callee, _ = op.args
            arity = len(x)
            b.sites += 1
            gc = b.out.add_node(f"g{b.counter + 1}.call", fncall(grad_name(callee), b.sites))
            b.counter += 1
            for i in range(arity):
                b.out.connect(x[i][0], x[i][1], gc, i)
            b.out.connect(dz[0], dz[1], gc, arity)
            for i in range(arity):
                add(x[i], (gc, 1 + i))
            continue
        dy = grad_of(n, 0)
        if dy is None:
            continue
        if k == "Add":
            add(x[0], dy)
            add(x[1], dy)
        elif k == "Sub":
            add(x[0], dy)
            if x[1][0] in active:
                add(x[1], b.node("Neg", (), dy))
        elif k == "Mul":
            if x[0][0] in active:
                add(x[0], b.node("Mul", (), dy, x[1]))
            if x[1][0] in active:
                add(x[1], b.node("Mul", (), dy, x[0]))
        elif k == "Div":
            if x[0][0] in active:
                add(x[0], b.node("Div", (), dy, x[1]))
            if x[1][0] in active:
                num = b.node("Mul", (), dy, x[0])
                den = b.node("Mul", (), x[1], x[1])
                add(x[1], b.node("Neg", (), b.node("Div", (), num, den)))
        elif k == "Neg":
            add(x[0], b.node("Neg", (), dy))
        elif k == "Identity":
            add(x[0], dy)
        elif k == "Merge":
            if op.args[:1] != ("pred",) or len(x) != 2:
                raise DifferentiationError(f"{g.name}.{n}: Merge without a predicate has no gradient")
            pred = (op.args[1], op.args[2])
            sw = b.node("Switch", (), pred, dy)[0]
            add(x[0], (sw, 0))
            add(x[1], (sw, 1))
        else:
            raise DifferentiationError(f"{g.name}.{n}: no gradient rule for {k}")

    for i, pnode in enumerate(g.params()):
        dx = grad_of(pnode) or b.zeros_like((pnode, 0))
        o = b.out.add_node(f"g.out{i + 1}", output(i + 1))
        b.out.connect(dx[0], dx[1], o, 0)
    return b.out


def gradient_program(p: Program, fn: str) -> Program:
    """Forward functions plus ``grad.h`` for every function reachable from *fn*."""
    from .transform import reachable_functions

    if fn not in p.graphs:
        raise DifferentiationError(f"unknown function {fn!r}")
    out = Program()
    for name in reachable_functions(p, fn):
        out.add(p.graphs[name].copy())
    for name in list(out.graphs):
        out.add(differentiate_graph(p.graphs[name]))
    return out


def driver_graph(f: Graph, at: list[float], wrt: list[int] | None = None) -> Graph:
    """Entry computing ``f(at)`` and ``grad.f(at, 1.0)``.

    Outputs are ``(y, dx_i for i in wrt)``.
    """
    if len(at) != f.arity:
        raise DifferentiationError(f"{f.name} takes {f.arity} arguments, got {len(at)}")
    wrt = list(range(f.arity)) if wrt is None else wrt
    d = Graph(DRIVER, 0)
    args = [d.add_node(f"x{i}", const(v)) for i, v in enumerate(at)]
    one = d.add_node("seed", const(1.0))
    fwd = d.add_node("fwd", fncall(f.name, 0))
    bwd = d.add_node("bwd", fncall(grad_name(f.name), 0))
    for i, a in enumerate(args):
        d.connect(a, 0, fwd, i)
        d.connect(a, 0, bwd, i)
    d.connect(one, 0, bwd, len(args))
    d.add_node("out0", output(0))
    d.connect(fwd, 0, "out0", 0)
    for j, i in enumerate(wrt):
        o = d.add_node(f"out{j + 1}", output(j + 1))
        d.connect(bwd, 1 + i, o, 0)
    return d


@dataclass
class FusionReport:
    paired: int = 0
    unpaired_forward: list = field(default_factory=list)


def _fuse_graph(g: Graph, report: FusionReport) -> Graph:
    ins = g.inputs_of()
    calls = {n: op for n, op in g.nodes.items() if op.kind == "FnCall"}
    fwd_by_key: dict[tuple, str] = {}
    for n, op in calls.items():
        if not op.args[0].startswith(GRAD_PREFIX):
            key = (op.args[0], tuple(ins[n][i] for i in range(len(ins[n]))))
            fwd_by_key.setdefault(key, n)
    pairs: dict[str, str] = {}   # grad call -> forward call
    for n, op in calls.items():
        if op.args[0].startswith(GRAD_PREFIX):
            base = op.args[0][len(GRAD_PREFIX):]
            m = len(ins[n]) - 1
            key = (base, tuple(ins[n][i] for i in range(m)))
            f = fwd_by_key.get(key)
            if f is None or f in pairs.values():
                raise DifferentiationError(
                    f"{g.name}.{n}: gradient call has no forward call with the same arguments")
            pairs[n] = f
    fwd_of = {f: gc for gc, f in pairs.items()}
    report.paired += len(pairs)
    name = g.name
    if name.startswith(GRAD_PREFIX):
        name = fused_name(name[len(GRAD_PREFIX):])
    out = Graph(name, g.arity)
    for n, op in g.nodes.items():
        if n in fwd_of:
            continue
        if n in pairs:
            out.add_node(n, fncall(fused_name(op.args[0][len(GRAD_PREFIX):]), op.args[1]))
        else:
            if op.kind == "FnCall":
                report.unpaired_forward.append((g.name, n))
            out.add_node(n, op)
    for e in g.data_edges:
        if e.dst in fwd_of:
            continue
        if e.src in fwd_of:
            # forward result now comes from port 0 of the fused call
            out.connect(fwd_of[e.src], 0, e.dst, e.dst_port)
        else:
            out.connect(*e)
    for s, d in g.control_edges:
        out.connect_control(s, d)
    return out


def fuse_forward_backward(p: Program) -> tuple[Program, FusionReport]:
    """Replace each (``h``, ``grad.h``) call pair by one ``fused.h`` call.

    Forward calls without a partner (their result needs no gradient) stay
    plain calls, so the forward functions they use are kept.
    """
    from .transform import reachable_functions

    report = FusionReport()
    fused = Program()
    for g in p.graphs.values():
        if g.name.startswith(GRAD_PREFIX) or g.name == p.entry:
            fused.add(_fuse_graph(g, report))
    for g in p.graphs.values():
        if g.name not in fused.graphs and not g.name.startswith(GRAD_PREFIX):
            fused.add(g.copy())
    fused.entry = p.entry
    if p.entry is not None:
        keep = set(reachable_functions(fused, p.entry))
        fused.graphs = {n: g for n, g in fused.graphs.items() if n in keep}
    return fused, report


def grad_program(p: Program, fn: str, at: list[float], wrt: list[int] | None = None,
                 scheme: str = "fused") -> Program:
    """Program whose entry returns ``(f(at), df/dx_i ...)`` for ``i`` in *wrt*."""
    if scheme not in ("naive", "fused"):
        raise ValueError(f"unknown scheme {scheme!r}")
    gp = gradient_program(p, fn)
    gp.add(driver_graph(p.graphs[fn], list(at), wrt))
    gp.entry = DRIVER
    if scheme == "fused":
        gp, _ = fuse_forward_backward(gp)
    return gp


def forward_op_firings(stats, fn: str, node: str, live: bool = True) -> int:
    """Total firings of forward node *node* of *fn* across all its copies.

    Works on stats from a static run, where node ids are ``<graph>.<node>``.
    """
    counts = stats.live_firings if live else stats.firings
    names = {f"{fn}.{node}", f"{grad_name(fn)}.{node}", f"{fused_name(fn)}.{node}"}
    return sum(c for k, c in counts.items() if k in names)
