"""Turn a set of function graphs into one static graph using Call/Return tagging.

Every call site ``i`` of a function ``f`` with ``m`` parameters becomes ``m``
``Call(i)`` nodes; each parameter of ``f`` becomes a ``Merge`` gathering the
matching ``Call`` outputs; the result of ``f`` fans out to one ``Return(i)``
per call site, and a control edge from the first ``Call(i)`` to each
``Return(i)`` carries deadness around the body.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import Graph, Program, call, merge, ret, validate_program


class TransformError(Exception):
    pass


@dataclass
class CallSite:
    callee: str
    label: int
    caller: str
    node: str
    #: parameter index -> (source node, source port) in the caller graph
    args: dict[int, tuple[str, int]] = field(default_factory=dict)
    #: output port -> [(destination node, destination port)] in the caller graph
    dests: dict[int, list[tuple[str, int]]] = field(default_factory=dict)


CallSiteTable = dict  # callee name -> list[CallSite], ordered by label


def collect_call_sites(p: Program, graphs: list[str] | None = None) -> CallSiteTable:
    """Number the ``FnCall`` nodes of every callee ``0..n-1``.

    Order is definition order of the calling graphs, then node order.
    """
    table: CallSiteTable = {}
    names = list(p.graphs) if graphs is None else [n for n in p.graphs if n in set(graphs)]
    for gname in names:
        g = p.graphs[gname]
        calls = [n for n, op in g.nodes.items() if op.kind == "FnCall"]
        if not calls:
            continue
        wanted = set(calls)
        args: dict[str, dict[int, tuple[str, int]]] = {n: {} for n in calls}
        dests: dict[str, dict[int, list]] = {n: {} for n in calls}
        for e in g.data_edges:
            if e.dst in wanted:
                args[e.dst][e.dst_port] = (e.src, e.src_port)
            if e.src in wanted:
                dests[e.src].setdefault(e.src_port, []).append((e.dst, e.dst_port))
        for n in calls:
            callee = g.nodes[n].args[0]
            sites = table.setdefault(callee, [])
            sites.append(CallSite(callee, len(sites), gname, n, args[n], dests[n]))
    return table


def reachable_functions(p: Program, root: str) -> list[str]:
    seen = {root}
    stack = [root]
    while stack:
        g = p.graphs[stack.pop()]
        for op in g.nodes.values():
            if op.kind == "FnCall" and op.args[0] not in seen:
                if op.args[0] not in p.graphs:
                    raise TransformError(f"call to undefined function {op.args[0]!r}")
                seen.add(op.args[0])
                stack.append(op.args[0])
    return [n for n in p.graphs if n in seen]


def call_node_id(callee: str, label: int, arg: int) -> str:
    return f"{callee}.call{label}.{arg}"


def return_node_id(callee: str, label: int, out: int = 0) -> str:
    return f"{callee}.ret{label}" if out == 0 else f"{callee}.ret{label}.{out}"


def eliminate_recursion(p: Program, numbering: dict[str, list[int]] | None = None) -> Graph:
    """Build the single static graph for ``p.entry``.

    *numbering* optionally maps a callee to a permutation giving the label of
    each of its call sites (in collection order); any permutation is
    semantically equivalent.
    """
    if p.entry is None or p.entry not in p.graphs:
        raise TransformError("program has no entry graph")
    entry = p.entry
    if p.graphs[entry].arity != 0:
        raise TransformError(f"entry {entry!r} must have arity 0, has {p.graphs[entry].arity}")
    problems = [v for v in validate_program(p) if "undefined" in v.message or "argument" in v.message]
    if problems:
        raise TransformError("; ".join(map(str, problems)))

    kept = reachable_functions(p, entry)
    table = collect_call_sites(p, kept)
    if entry in table:
        raise TransformError(f"entry {entry!r} cannot be called")
    if numbering:
        for callee, perm in numbering.items():
            sites = table.get(callee, [])
            if sorted(perm) != list(range(len(sites))):
                raise TransformError(f"numbering for {callee!r} is not a permutation")
            for s, lab in zip(sites, perm):
                s.label = lab
            sites.sort(key=lambda s: s.label)

    site_of: dict[tuple[str, str], CallSite] = {}
    for sites in table.values():
        for s in sites:
            site_of[(s.caller, s.node)] = s

    def resolve(gname: str, node: str, port: int) -> tuple[str, int]:
        op = p.graphs[gname].nodes[node]
        if op.kind == "FnCall":
            s = site_of[(gname, node)]
            return return_node_id(s.callee, s.label, port), 0
        return f"{gname}.{node}", port

    out = Graph(entry, 0)
    for gname in kept:
        g = p.graphs[gname]
        is_entry = gname == entry
        for n, op in g.nodes.items():
            if op.kind == "FnCall" or (op.kind == "Output" and not is_entry):
                continue
            if op.kind == "Param":
                out.add_node(f"{gname}.{n}", merge(exclusive=True))
            elif op.kind == "Merge" and op.args[:1] == ("pred",):
                out.add_node(f"{gname}.{n}", merge(pred=resolve(gname, op.args[1], op.args[2])))
            else:
                out.add_node(f"{gname}.{n}", op)
        for e in g.data_edges:
            dk = g.nodes[e.dst].kind
            if dk == "FnCall" or (dk == "Output" and not is_entry):
                continue
            src, sp = resolve(gname, e.src, e.src_port)
            out.connect(src, sp, f"{gname}.{e.dst}", e.dst_port)
        for s, d in g.control_edges:
            if g.nodes[s].kind == "FnCall" or g.nodes[d].kind == "FnCall":
                raise TransformError(f"control edge touching call node in {gname!r}")
            out.connect_control(f"{gname}.{s}", f"{gname}.{d}")

    for callee in kept:
        sites = table.get(callee, [])
        if callee == entry:
            continue
        g = p.graphs[callee]
        params = g.params()
        outputs = g.outputs()
        ins = g.inputs_of()
        for s in sites:
            for a, pnode in enumerate(params):
                cid = out.add_node(call_node_id(callee, s.label, a), call(s.label))
                src, sp = resolve(s.caller, *s.args[a])
                out.connect(src, sp, cid, 0)
                out.connect(cid, 0, f"{callee}.{pnode}", s.label)
            for k, onode in enumerate(outputs):
                rid = out.add_node(return_node_id(callee, s.label, k), ret(s.label))
                src, sp = resolve(callee, *ins[onode][0])
                out.connect(src, sp, rid, 0)
                if params:
                    out.connect_control(call_node_id(callee, s.label, 0), rid)
    return out


def transform(p: Program) -> Graph:
    return eliminate_recursion(p)
