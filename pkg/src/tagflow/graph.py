"""Dataflow graph data model: operators, graphs, programs.

A :class:`Graph` is a directed multigraph of operator nodes.  Data edges carry
explicit source and destination ports; control edges carry only a
synchronisation token.  A :class:`Program` is a set of named graphs, one per
function, plus the name of the entry graph.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple


#: Operators with no inputs at all.
INPUT_KINDS = frozenset({"Const", "Param", "Recv"})

#: Fixed number of data input ports per operator kind (``None`` = variable).
IN_ARITY: dict[str, int | None] = {
    "Const": 0, "Param": 0, "Recv": 0,
    "Output": 1,
    "Add": 2, "Sub": 2, "Mul": 2, "Div": 2, "Eq": 2, "Lt": 2,
    "Neg": 1, "Not": 1, "Identity": 1,
    "Switch": 2,
    "Merge": None,
    "Enter": 1, "Exit": 1, "Next": 1,
    "Call": 1, "Return": 1,
    "FnCall": None,
    "Send": None,
}

ALL_KINDS = frozenset(IN_ARITY)
BINARY_KINDS = frozenset({"Add", "Sub", "Mul", "Div", "Eq", "Lt"})
UNARY_KINDS = frozenset({"Neg", "Not", "Identity"})


class Op(NamedTuple):
    """An operator: its kind plus kind-specific arguments.

    ``Const(value)``, ``Param(index)``, ``Output(index)``, ``Call(label)``,
    ``Return(label)``, ``FnCall(name, site)``, ``Send(channel)``,
    ``Recv(channel)``.  ``Merge`` takes either no argument, ``("exclusive",)``
    for merges that receive at most one token per tag, or
    ``("pred", node, port)`` naming the predicate of the conditional it joins.
    """

    kind: str
    args: tuple = ()

    @property
    def arg(self):
        return self.args[0] if self.args else None

    def label(self) -> str:
        k = self.kind
        if k == "Const":
            return _fmt_num(self.args[0])
        if k in ("Call", "Return"):
            return f"{k}_{self.args[0]}"
        if k == "FnCall":
            return f"{self.args[0]}#{self.args[1]}"
        if k == "Param":
            return f"in_{self.args[0]}"
        if k == "Output":
            return "out" if self.args[0] == 0 else f"out_{self.args[0]}"
        if k in ("Send", "Recv"):
            return f"{k}[{self.args[0]}]"
        if k == "Merge" and self.args and self.args[0] == "exclusive":
            return "Merge*"
        return k


def const(value: float) -> Op:
    return Op("Const", (float(value),))


def param(index: int) -> Op:
    return Op("Param", (index,))


def output(index: int = 0) -> Op:
    return Op("Output", (index,))


def call(label: int) -> Op:
    return Op("Call", (label,))


def ret(label: int) -> Op:
    return Op("Return", (label,))


def fncall(name: str, site: int) -> Op:
    return Op("FnCall", (name, site))


def merge(exclusive: bool = False, pred: tuple[str, int] | None = None) -> Op:
    if exclusive:
        return Op("Merge", ("exclusive",))
    if pred is not None:
        return Op("Merge", ("pred", pred[0], pred[1]))
    return Op("Merge")


def is_exclusive_merge(op: Op) -> bool:
    return op.kind == "Merge" and op.args[:1] == ("exclusive",)


class Edge(NamedTuple):
    src: str
    src_port: int
    dst: str
    dst_port: int


@dataclass
class Graph:
    """A named dataflow graph with ``arity`` formal parameters."""

    name: str
    arity: int = 0
    nodes: dict[str, Op] = field(default_factory=dict)
    data_edges: list[Edge] = field(default_factory=list)
    control_edges: list[tuple[str, str]] = field(default_factory=list)

    def add_node(self, node_id: str, op: Op) -> str:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node id {node_id!r} in graph {self.name!r}")
        self.nodes[node_id] = op
        return node_id

    def connect(self, src: str, src_port: int, dst: str, dst_port: int) -> None:
        self.data_edges.append(Edge(src, src_port, dst, dst_port))

    def connect_control(self, src: str, dst: str) -> None:
        self.control_edges.append((src, dst))

    def in_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.data_edges if e.dst == node_id]

    def out_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.data_edges if e.src == node_id]

    def inputs_of(self) -> dict[str, dict[int, tuple[str, int]]]:
        """Map ``node -> {dst_port: (src, src_port)}``."""
        res: dict[str, dict[int, tuple[str, int]]] = {n: {} for n in self.nodes}
        for e in self.data_edges:
            res.setdefault(e.dst, {})[e.dst_port] = (e.src, e.src_port)
        return res

    def nodes_of_kind(self, *kinds: str) -> list[str]:
        return [n for n, op in self.nodes.items() if op.kind in kinds]

    def outputs(self) -> list[str]:
        """Output node ids ordered by output index."""
        outs = [n for n, op in self.nodes.items() if op.kind == "Output"]
        return sorted(outs, key=lambda n: self.nodes[n].args[0])

    def params(self) -> list[str]:
        ps = [n for n, op in self.nodes.items() if op.kind == "Param"]
        return sorted(ps, key=lambda n: self.nodes[n].args[0])

    @property
    def n_outputs(self) -> int:
        return len(self.outputs())

    def copy(self) -> Graph:
        return Graph(self.name, self.arity, dict(self.nodes),
                     list(self.data_edges), list(self.control_edges))

    def is_lazy_const(self, node_id: str, _ctrl_dsts: set | None = None) -> bool:
        """True for a Const with no control inputs (materialised on demand)."""
        if self.nodes[node_id].kind != "Const":
            return False
        if _ctrl_dsts is None:
            _ctrl_dsts = {d for _, d in self.control_edges}
        return node_id not in _ctrl_dsts

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for op in self.nodes.values():
            counts[op.kind] = counts.get(op.kind, 0) + 1
        return counts


@dataclass
class Program:
    graphs: dict[str, Graph] = field(default_factory=dict)
    entry: str | None = None

    def __getitem__(self, name: str) -> Graph:
        return self.graphs[name]

    def __iter__(self) -> Iterator[Graph]:
        return iter(self.graphs.values())

    def add(self, g: Graph) -> Graph:
        self.graphs[g.name] = g
        return g

    def copy(self) -> Program:
        return Program({n: g.copy() for n, g in self.graphs.items()}, self.entry)


# {{{ validation

@dataclass(frozen=True)
class Violation:
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.where}: {self.message}"


def validate(g: Graph) -> list[Violation]:
    """Check the structural invariants of *g*.  Never raises, never mutates."""
    out: list[Violation] = []
    where = lambda n: f"{g.name}/{n}"  # noqa: E731

    for src, dst in g.control_edges:
        for n in (src, dst):
            if n not in g.nodes:
                out.append(Violation(f"{g.name}/cedge {src}->{dst}",
                                     f"unknown node {n!r}"))
        if src in g.nodes and g.nodes[src].kind in ("Switch", "Output", "Send"):
            out.append(Violation(where(src),
                                 f"{g.nodes[src].kind} cannot source a control edge"))

    in_ports: dict[str, list[int]] = {n: [] for n in g.nodes}
    out_count: dict[str, int] = {n: 0 for n in g.nodes}
    for e in g.data_edges:
        bad = False
        for n in (e.src, e.dst):
            if n not in g.nodes:
                out.append(Violation(f"{g.name}/edge {e.src}:{e.src_port}->{e.dst}:{e.dst_port}",
                                     f"unknown node {n!r}"))
                bad = True
        if bad:
            continue
        in_ports[e.dst].append(e.dst_port)
        out_count[e.src] += 1
        sk = g.nodes[e.src].kind
        if sk == "Switch":
            if e.src_port not in (0, 1):
                out.append(Violation(where(e.src), f"Switch has no output port {e.src_port}"))
        elif sk not in ("FnCall",) and e.src_port != 0:
            out.append(Violation(where(e.src), f"{sk} has no output port {e.src_port}"))

    ctrl_in = {n: 0 for n in g.nodes}
    for _, d in g.control_edges:
        if d in ctrl_in:
            ctrl_in[d] += 1

    output_idx: dict[int, list[str]] = {}
    param_idx: dict[int, list[str]] = {}
    for n, op in g.nodes.items():
        k = op.kind
        if k not in ALL_KINDS:
            out.append(Violation(where(n), f"unknown operator kind {k!r}"))
            continue
        ports = in_ports[n]
        if k in INPUT_KINDS:
            if ports:
                out.append(Violation(where(n), f"input node {k} has {len(ports)} incoming data edge(s)"))
            if k == "Param":
                param_idx.setdefault(op.args[0], []).append(n)
            continue
        if k == "Output":
            output_idx.setdefault(op.args[0], []).append(n)
            if len(ports) != 1:
                out.append(Violation(where(n), f"Output has {len(ports)} incoming data edges, expected 1"))
            if out_count[n]:
                out.append(Violation(where(n), "Output has outgoing data edges"))
            continue
        expected = IN_ARITY[k]
        if expected is None:
            expected = len(set(ports))
            if k == "Merge" and expected == 0:
                out.append(Violation(where(n), "Merge has no inputs"))
            if k == "Send" and expected == 0 and ctrl_in[n] != 1:
                out.append(Violation(where(n), "Send needs one data or one control input"))
        dup = sorted({p for p in ports if ports.count(p) > 1})
        for p in dup:
            out.append(Violation(where(n), f"port {p} fed by {ports.count(p)} edges"))
        missing = sorted(set(range(expected)) - set(ports))
        if missing:
            out.append(Violation(where(n), f"{k} input port(s) {missing} not connected"))
        extra = sorted(p for p in set(ports) if p >= expected or p < 0)
        if extra:
            out.append(Violation(where(n), f"{k} has no input port(s) {extra}"))
        if k in ("Call", "Return") and (not isinstance(op.args[0], int) or op.args[0] < 0):
            out.append(Violation(where(n), f"{k} label must be a non-negative integer"))

    if not output_idx:
        out.append(Violation(g.name, "graph has no Output node"))
    for idx, ns in sorted(output_idx.items()):
        if len(ns) > 1:
            out.append(Violation(g.name, f"{len(ns)} Output nodes with index {idx}: {sorted(ns)}"))
    if output_idx and sorted(output_idx) != list(range(len(output_idx))):
        out.append(Violation(g.name, f"Output indices {sorted(output_idx)} are not contiguous from 0"))
    if sorted(param_idx) != list(range(g.arity)):
        out.append(Violation(g.name, f"Param indices {sorted(param_idx)} do not match arity {g.arity}"))
    for idx, ns in sorted(param_idx.items()):
        if len(ns) > 1:
            out.append(Violation(g.name, f"{len(ns)} Param nodes with index {idx}"))
    return out


def validate_program(p: Program) -> list[Violation]:
    out: list[Violation] = []
    for g in p.graphs.values():
        out.extend(validate(g))
        for n, op in g.nodes.items():
            if op.kind != "FnCall":
                continue
            callee = p.graphs.get(op.args[0])
            if callee is None:
                out.append(Violation(f"{g.name}/{n}", f"call to undefined function {op.args[0]!r}"))
                continue
            nargs = len({e.dst_port for e in g.data_edges if e.dst == n})
            if nargs != callee.arity:
                out.append(Violation(f"{g.name}/{n}",
                                     f"{op.args[0]} takes {callee.arity} argument(s), got {nargs}"))
    if p.entry is not None:
        if p.entry not in p.graphs:
            out.append(Violation("program", f"entry {p.entry!r} is not defined"))
        elif p.graphs[p.entry].arity != 0:
            out.append(Violation("program", f"entry {p.entry!r} must have arity 0"))
    return out

# }}}


# {{{ DOT export

def _q(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _dot_body(g: Graph, prefix: str, indent: str) -> list[str]:
    lines = []
    for n, op in g.nodes.items():
        shape = "box" if op.kind in ("Call", "Return", "Send", "Recv") else "ellipse"
        if op.kind in INPUT_KINDS or op.kind == "Output":
            shape = "plaintext" if op.kind == "Const" else "circle"
        lines.append(f"{indent}{_q(prefix + n)} [label={_q(op.label())}, shape={shape}];")
    for e in g.data_edges:
        attrs = []
        if g.nodes.get(e.src, Op("?")).kind in ("Switch", "FnCall") or e.src_port:
            attrs.append(f"taillabel={_q(str(e.src_port))}")
        if IN_ARITY.get(g.nodes.get(e.dst, Op("?")).kind, 1) != 1:
            attrs.append(f"headlabel={_q(str(e.dst_port))}")
        a = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f"{indent}{_q(prefix + e.src)} -> {_q(prefix + e.dst)}{a};")
    for s, d in g.control_edges:
        lines.append(f"{indent}{_q(prefix + s)} -> {_q(prefix + d)} [style=dashed];")
    return lines


def to_dot(g: Graph) -> str:
    """Render *g* in DOT syntax.  Control edges are dashed."""
    lines = [f"digraph {_q(g.name)} {{", "  node [fontname=Helvetica];"]
    lines += _dot_body(g, "", "  ")
    lines.append("}")
    return "\n".join(lines) + "\n"


def program_to_dot(p: Program) -> str:
    """Render every graph of *p* as its own cluster."""
    lines = ["digraph program {", "  node [fontname=Helvetica];"]
    for name, g in p.graphs.items():
        lines.append(f"  subgraph {_q('cluster_' + name)} {{")
        lines.append(f"    label={_q(name)};")
        lines += _dot_body(g, name + ".", "    ")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"

# }}}


# {{{ text serialisation

class GraphParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _fmt_num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def _op_text(op: Op) -> str:
    k = op.kind
    if k == "Const":
        return f"Const {float(op.args[0])!r}"
    if k == "Merge":
        if not op.args:
            return "Merge"
        if op.args[0] == "exclusive":
            return "Merge exclusive"
        return f"Merge pred {op.args[1]}:{op.args[2]}"
    return " ".join([k, *(str(a) for a in op.args)])


def serialize(p: Program) -> str:
    lines = []
    for g in p.graphs.values():
        lines.append(f"graph {g.name} arity {g.arity}")
        for n, op in g.nodes.items():
            lines.append(f"node {n} {_op_text(op)}")
        for e in g.data_edges:
            lines.append(f"edge {e.src}:{e.src_port} -> {e.dst}:{e.dst_port}")
        for s, d in g.control_edges:
            lines.append(f"cedge {s} -> {d}")
    if p.entry is not None:
        lines.append(f"entry {p.entry}")
    return "\n".join(lines) + "\n"


_INT_ARG = {"Param", "Output", "Call", "Return", "Send", "Recv"}
_ENDPOINT = re.compile(r"^(\S+):(-?\d+)$")


def _parse_op(words: list[str], lineno: int, col: int) -> Op:
    k, rest = words[0], words[1:]
    if k not in ALL_KINDS:
        raise GraphParseError(f"unknown operator {k!r}", lineno, col)
    try:
        if k == "Const":
            (v,) = rest
            return Op(k, (float(v),))
        if k in _INT_ARG:
            if k == "Output" and not rest:
                return output(0)
            (v,) = rest
            return Op(k, (int(v),))
        if k == "FnCall":
            name, site = rest
            return Op(k, (name, int(site)))
        if k == "Merge":
            if not rest:
                return Op(k)
            if rest == ["exclusive"]:
                return merge(exclusive=True)
            tag, ep = rest
            m = _ENDPOINT.match(ep)
            if tag != "pred" or not m:
                raise ValueError
            return merge(pred=(m.group(1), int(m.group(2))))
        if rest:
            raise ValueError
        return Op(k)
    except ValueError:
        raise GraphParseError(f"bad arguments for {k}: {' '.join(rest)!r}", lineno, col) from None


def deserialize(text: str) -> Program:
    """Parse the line-oriented graph format produced by :func:`serialize`."""
    p = Program()
    g: Graph | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        col = len(line) - len(line.lstrip()) + 1
        words = line.split()
        head = words[0]
        if head == "graph":
            if len(words) != 4 or words[2] != "arity" or not words[3].isdigit():
                raise GraphParseError("expected 'graph <name> arity <m>'", lineno, col)
            if words[1] in p.graphs:
                raise GraphParseError(f"duplicate graph {words[1]!r}", lineno, col)
            g = p.add(Graph(words[1], int(words[3])))
        elif head == "entry":
            if len(words) != 2:
                raise GraphParseError("expected 'entry <name>'", lineno, col)
            p.entry = words[1]
        elif g is None:
            raise GraphParseError(f"{head!r} outside of a graph block", lineno, col)
        elif head == "node":
            if len(words) < 3:
                raise GraphParseError("expected 'node <id> <op> [args]'", lineno, col)
            if words[1] in g.nodes:
                raise GraphParseError(f"duplicate node {words[1]!r}", lineno, col)
            op_col = line.index(words[2], line.index(words[1]) + len(words[1])) + 1
            g.nodes[words[1]] = _parse_op(words[2:], lineno, op_col)
        elif head == "edge":
            a = _ENDPOINT.match(words[1]) if len(words) == 4 else None
            b = _ENDPOINT.match(words[3]) if len(words) == 4 else None
            if not (a and b and words[2] == "->"):
                raise GraphParseError("expected 'edge <src>:<port> -> <dst>:<port>'", lineno, col)
            g.connect(a.group(1), int(a.group(2)), b.group(1), int(b.group(2)))
        elif head == "cedge":
            if len(words) != 4 or words[2] != "->":
                raise GraphParseError("expected 'cedge <src> -> <dst>'", lineno, col)
            g.connect_control(words[1], words[3])
        else:
            raise GraphParseError(f"unknown directive {head!r}", lineno, col)
    return p

# }}}


def topological_order(g: Graph, nodes: Iterable[str] | None = None) -> list[str]:
    """Kahn's algorithm over data and control edges; raises on cycles."""
    nodes = list(g.nodes if nodes is None else nodes)
    keep = set(nodes)
    indeg = {n: 0 for n in nodes}
    succ: dict[str, list[str]] = {n: [] for n in nodes}
    for s, d in [(e.src, e.dst) for e in g.data_edges] + list(g.control_edges):
        if s in keep and d in keep:
            indeg[d] += 1
            succ[s].append(d)
    order = [n for n in nodes if indeg[n] == 0]
    i = 0
    while i < len(order):
        for d in succ[order[i]]:
            indeg[d] -= 1
            if indeg[d] == 0:
                order.append(d)
        i += 1
    if len(order) != len(nodes):
        raise ValueError(f"graph {g.name!r} has a cycle")
    return order
