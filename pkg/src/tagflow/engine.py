"""Tagged token-matching executor.

Tokens are ``(tag, payload)`` pairs.  A node instance ``(node, tag)`` fires
once every input port holds a token with exactly that tag; ``Merge`` is the
exception and fires on the first live arrival.  ``DEAD`` is the hiaton: strict
operators propagate it, ``Switch`` produces it on the untaken side.

Two drivers share the same machinery:

* :func:`run` executes a fixed graph (the output of the recursion transform).
  The graph never changes; call contexts live entirely in the tags.
* :func:`run_dynamic` executes an untransformed program by instantiating a
  fresh copy of the callee graph at every live ``FnCall``.
"""

from __future__ import annotations

import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .graph import Graph, Op, Program, is_exclusive_merge


# {{{ payloads, frames, tags

class _Dead:
    __slots__ = ()

    def __repr__(self) -> str:
        return "DEAD"

    def __reduce__(self):
        return "DEAD"


DEAD = _Dead()
UNIT = True  # payload of live control tokens


class Frame(NamedTuple):
    kind: str   # "loop" or "call"
    value: int

    def __str__(self) -> str:
        return f"{'L' if self.kind == 'loop' else 'C'}{self.value}"


# Frames are encoded as ints inside tags: loop iteration n -> n, call label i -> ~i.

def encode_frame(f: Frame) -> int:
    return f.value if f.kind == "loop" else ~f.value


def decode_frame(code: int) -> Frame:
    return Frame("loop", code) if code >= 0 else Frame("call", ~code)


class Tag:
    """Immutable stack of frames sharing suffixes; head is the innermost scope."""

    __slots__ = ("head", "tail", "depth", "_hash")

    def __init__(self, head: int | None, tail: Tag | None):
        self.head = head
        self.tail = tail
        if tail is None:
            self.depth = 0
            self._hash = 0x345678
        else:
            self.depth = tail.depth + 1
            self._hash = hash((head, tail._hash))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Tag) or self._hash != other._hash or self.depth != other.depth:
            return False
        a, b = self, other
        while a is not b:
            if a.head != b.head:
                return False
            a, b = a.tail, b.tail
        return True

    def push(self, frame: Frame | int) -> Tag:
        return Tag(frame if isinstance(frame, int) else encode_frame(frame), self)

    def frames(self) -> list[Frame]:
        out = []
        t = self
        while t.tail is not None:
            out.append(decode_frame(t.head))
            t = t.tail
        return out

    @classmethod
    def from_frames(cls, frames) -> Tag:
        t = ROOT
        for f in reversed(list(frames)):
            t = t.push(f)
        return t

    def __repr__(self) -> str:
        return "[" + ",".join(str(f) for f in self.frames()) + "]"

    def __len__(self) -> int:
        return self.depth


ROOT = Tag(None, None)


class Token(NamedTuple):
    tag: Tag
    payload: object   # float, bool, or DEAD

    @property
    def dead(self) -> bool:
        return self.payload is DEAD

# }}}


# {{{ errors

class EngineError(Exception):
    """Base class for run failures."""


class EvaluationError(EngineError):
    """A value-level fault such as division by zero."""


class StepLimitExceeded(EngineError):
    pass


class TagDepthExceeded(EngineError):
    pass


class Deadlock(EngineError):
    def __init__(self, message: str, stuck: list):
        super().__init__(message + (": " + ", ".join(map(str, stuck[:20])) if stuck else ""))
        self.stuck = stuck


class EngineFault(EngineError):
    """The graph violates an assumption of the executor (construction bug)."""

# }}}


# {{{ operator semantics

K_CONST, K_PARAM, K_OUTPUT, K_ADD, K_SUB, K_MUL, K_DIV, K_NEG, K_EQ, K_LT, K_NOT, \
    K_IDENT, K_SWITCH, K_MERGE, K_ENTER, K_EXIT, K_NEXT, K_CALL, K_RETURN, \
    K_FNCALL, K_SEND, K_RECV = range(22)

KIND_CODE = {
    "Const": K_CONST, "Param": K_PARAM, "Output": K_OUTPUT, "Add": K_ADD,
    "Sub": K_SUB, "Mul": K_MUL, "Div": K_DIV, "Neg": K_NEG, "Eq": K_EQ,
    "Lt": K_LT, "Not": K_NOT, "Identity": K_IDENT, "Switch": K_SWITCH,
    "Merge": K_MERGE, "Enter": K_ENTER, "Exit": K_EXIT, "Next": K_NEXT,
    "Call": K_CALL, "Return": K_RETURN, "FnCall": K_FNCALL, "Send": K_SEND,
    "Recv": K_RECV,
}

#: Operators that create tags.
GENERATORS = frozenset({K_CALL, K_ENTER, K_NEXT})

CTRL = -1  # pseudo output port for control tokens


def _div(a, b):
    if b == 0:
        raise EvaluationError("division by zero")
    return a / b


_ARITH = {
    K_ADD: lambda a, b: a + b,
    K_SUB: lambda a, b: a - b,
    K_MUL: lambda a, b: a * b,
    K_DIV: _div,
    K_EQ: lambda a, b: a == b,
    K_LT: lambda a, b: a < b,
}


def _f_arith(fn):
    def f(arg, tag, ins, maxd):
        a, b = ins[0], ins[1]
        if a is DEAD or b is DEAD or DEAD in ins[2:]:
            return [(0, tag, DEAD), (CTRL, tag, DEAD)]
        v = fn(a, b)
        if v != v:
            raise EvaluationError("operation produced NaN")
        return [(0, tag, v), (CTRL, tag, UNIT)]
    return f


def _f_unary(fn):
    def f(arg, tag, ins, maxd):
        if DEAD in ins:
            return [(0, tag, DEAD), (CTRL, tag, DEAD)]
        return [(0, tag, fn(ins[0])), (CTRL, tag, UNIT)]
    return f


def _f_switch(arg, tag, ins, maxd):
    pred, d = ins[0], ins[1]
    if pred is DEAD or d is DEAD or DEAD in ins[2:]:
        return [(0, tag, DEAD), (1, tag, DEAD)]
    if pred:
        return [(0, tag, d), (1, tag, DEAD)]
    return [(0, tag, DEAD), (1, tag, d)]


def _f_pass(arg, tag, ins, maxd):
    v = ins[0]
    return [(0, tag, v), (CTRL, tag, DEAD if v is DEAD else UNIT)]


def _f_strict_pass(arg, tag, ins, maxd):
    v = DEAD if DEAD in ins else ins[0]
    return [(0, tag, v), (CTRL, tag, DEAD if v is DEAD else UNIT)]


def _f_const(arg, tag, ins, maxd):
    v = DEAD if DEAD in ins else arg
    return [(0, tag, v), (CTRL, tag, DEAD if v is DEAD else UNIT)]


def _f_push(loop):
    def f(arg, tag, ins, maxd):
        if DEAD in ins:
            return [(CTRL, tag, DEAD)]
        if tag.depth >= maxd:
            raise TagDepthExceeded(f"tag depth limit {maxd} exceeded")
        return [(0, Tag(0 if loop else ~arg, tag), ins[0]), (CTRL, tag, UNIT)]
    return f


def _f_next(arg, tag, ins, maxd):
    if DEAD in ins:
        return []
    head = tag.head
    if head is None or head < 0:
        raise EngineFault(f"Next on tag {tag!r} without a loop frame")
    new = Tag(head + 1, tag.tail)
    return [(0, new, ins[0]), (CTRL, new, UNIT)]


def _f_none(arg, tag, ins, maxd):
    return []


_FIRE = [_f_none] * 22
for _k, _fn in _ARITH.items():
    _FIRE[_k] = _f_arith(_fn)
_FIRE[K_NEG] = _f_unary(lambda a: -a)
_FIRE[K_NOT] = _f_unary(lambda a: not a)
_FIRE[K_IDENT] = _f_unary(lambda a: a)
_FIRE[K_SWITCH] = _f_switch
_FIRE[K_MERGE] = _FIRE[K_PARAM] = _FIRE[K_RECV] = _f_pass
_FIRE[K_RETURN] = _FIRE[K_EXIT] = _f_strict_pass
_FIRE[K_CONST] = _f_const
_FIRE[K_CALL] = _f_push(False)
_FIRE[K_ENTER] = _f_push(True)
_FIRE[K_NEXT] = _f_next


def _apply(kind: int, arg, tag: Tag, ins: list, max_depth: int) -> list:
    """Fire one operator instance; return ``[(port, tag, payload)]``.

    ``ins`` holds the data payloads followed by control payloads.  For
    ``Return``/``Exit`` *tag* is already the restored (popped) tag.
    ``Output``, ``Send`` and ``FnCall`` are handled by the executor.
    """
    return _FIRE[kind](arg, tag, ins, max_depth)


def fire(op: Op, inputs: list[Token]) -> list[tuple[int, Token]]:
    """Pure firing rule for one operator on tokens sharing a tag.

    Returns ``(output_port, token)`` pairs; port ``-1`` is the control output.
    ``Return(i)`` and ``Exit`` take the token as it arrives (with the callee or
    loop frame still on the tag).
    """
    kind = KIND_CODE[op.kind]
    arg = op.args[0] if op.args else None
    if kind == K_MERGE:
        live = [t for t in inputs if t.payload is not DEAD]
        pick = live[0] if live else inputs[0]
        return [(p, Token(t, v)) for p, t, v in _apply(kind, arg, pick.tag, [pick.payload], 1 << 62)]
    if not inputs:
        raise ValueError(f"{op.kind} needs at least one input")
    tag = inputs[0].tag
    if any(t.tag != tag for t in inputs):
        raise ValueError("inputs carry different tags")
    if kind in (K_RETURN, K_EXIT):
        head = tag.head
        if head is None:
            raise EngineFault(f"{op.kind} on the empty tag")
        if kind == K_RETURN:
            if head >= 0:
                raise EngineFault(f"Return on tag {tag!r} whose head is a loop frame")
            if head != ~arg:
                return []
        elif head < 0:
            raise EngineFault(f"Exit on tag {tag!r} whose head is a call frame")
        tag = tag.tail
    if kind in (K_OUTPUT, K_SEND):
        return [(0, Token(tag, inputs[0].payload))]
    if kind == K_CONST and not inputs:
        return [(0, Token(tag, arg))]
    payloads = [t.payload for t in inputs]
    return [(p, Token(t, v)) for p, t, v in _apply(kind, arg, tag, payloads, 1 << 62)]

# }}}


# {{{ compiled graphs

class Template:
    """Index-based form of a graph used by the executor."""

    def __init__(self, g: Graph, program: Program | None = None):
        self.name = g.name
        self.graph = g
        ids = list(g.nodes)
        self.ids = ids
        idx = {n: i for i, n in enumerate(ids)}
        self.index = idx
        N = len(ids)
        self.kind = [KIND_CODE[g.nodes[n].kind] for n in ids]
        self.arg = [g.nodes[n].args[0] if g.nodes[n].args else None for n in ids]
        nports = [0] * N
        for e in g.data_edges:
            d = idx[e.dst]
            nports[d] = max(nports[d], e.dst_port + 1)
        ncin = [0] * N
        for _, d in g.control_edges:
            ncin[idx[d]] += 1
        self.nports = nports
        self.ncin = ncin
        lazy = [self.kind[i] == K_CONST and ncin[i] == 0 for i in range(N)]
        self.lazy = lazy
        nouts = [2 if k == K_SWITCH else 1 for k in self.kind]
        for e in g.data_edges:
            s = idx[e.src]
            nouts[s] = max(nouts[s], e.src_port + 1)
        outs: list[list[list[tuple[int, int]]]] = [[[] for _ in range(nouts[i])] for i in range(N)]
        proto: list[list] = [[None] * (nports[i] + ncin[i]) + [0] for i in range(N)]
        need = [nports[i] + ncin[i] for i in range(N)]
        for e in g.data_edges:
            s, d = idx[e.src], idx[e.dst]
            if lazy[s]:
                if self.kind[d] in (K_MERGE, K_RETURN, K_EXIT):
                    raise EngineFault(f"{g.nodes[e.dst].kind} {e.dst!r} fed by an ungated constant")
                proto[d][e.dst_port] = self.arg[s]
                need[d] -= 1
            else:
                outs[s][e.src_port].append((d, e.dst_port))
        couts: list[list[tuple[int, int]]] = [[] for _ in range(N)]
        seen = [0] * N
        for s_id, d_id in g.control_edges:
            s, d = idx[s_id], idx[d_id]
            couts[s].append((d, nports[d] + seen[d]))
            seen[d] += 1
        self.outs = outs
        self.couts = couts
        self.proto = proto
        self.need = need
        self.merge_expected = [
            (1 if is_exclusive_merge(g.nodes[ids[i]]) else nports[i]) if self.kind[i] == K_MERGE else 0
            for i in range(N)]
        # delivery mode: 0 fires on one token, 1 matches in the store,
        # 2 exclusive merge, 3 counting merge, 4 Return/Exit
        dmode = []
        for i in range(N):
            k = self.kind[i]
            if k == K_MERGE:
                dmode.append(2 if self.merge_expected[i] == 1 else 3)
            elif k in (K_RETURN, K_EXIT):
                dmode.append(4)
            else:
                dmode.append(0 if need[i] == 1 else 1)
        self.dmode = dmode
        self.fn = [_FIRE[k] for k in self.kind]
        self.params = {g.nodes[n].args[0]: idx[n] for n in ids if g.nodes[n].kind == "Param"}
        self.output_index = {idx[n]: g.nodes[n].args[0] for n in ids if g.nodes[n].kind == "Output"}
        self.n_outputs = len(self.output_index)
        self.startup = [
            i for i in range(N)
            if need[i] == 0 and not lazy[i]
            and self.kind[i] not in (K_MERGE, K_RECV, K_PARAM, K_RETURN, K_EXIT)]

    def __len__(self) -> int:
        return len(self.ids)


class _Activation:
    __slots__ = ("tpl", "base", "parent", "call_node", "fired", "live")

    def __init__(self, tpl: Template, base: int, counts: dict, parent=None, call_node: int = -1):
        self.tpl = tpl
        self.base = base
        self.parent = parent
        self.call_node = call_node
        # firing counters are shared by all activations of one template
        c = counts.get(tpl.name)
        if c is None:
            c = counts[tpl.name] = ([0] * len(tpl), [0] * len(tpl))
        self.fired, self.live = c

# }}}


@dataclass
class RunStats:
    firings: Counter = field(default_factory=Counter)
    live_firings: Counter = field(default_factory=Counter)
    firings_by_tag: Counter | None = None
    steps: int = 0
    max_live_tags: int = 0
    max_pending: int = 0
    max_tag_depth: int = 0
    dropped_returns: int = 0
    graph_nodes_before: int = 0
    graph_nodes_after: int = 0
    nodes_materialized: int = 0
    clones: Counter = field(default_factory=Counter)

    def summary(self) -> dict:
        d = {
            "steps": self.steps,
            "firings": sum(self.firings.values()),
            "live_firings": sum(self.live_firings.values()),
            "max_pending": self.max_pending,
            "max_tag_depth": self.max_tag_depth,
            "dropped_returns": self.dropped_returns,
            "graph_nodes": self.graph_nodes_after,
        }
        if self.firings_by_tag is not None:
            d["max_live_tags"] = self.max_live_tags
        if self.nodes_materialized:
            d["nodes_materialized"] = self.nodes_materialized
            d["clones"] = sum(self.clones.values())
        return d


def format_payload(v) -> str:
    if v is DEAD:
        return "*"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return repr(v)


class Executor:
    """Token-matching scheduler over one or more graph activations.

    The distributed simulator drives executors step by step through
    :meth:`step`, :meth:`inject` and the ``on_send``/``on_generate`` hooks.
    """

    def __init__(self, root: Template, *, max_tag_depth: int = 100_000,
                 max_steps: int = 10**9, seed: int | None = None,
                 trace: Callable[[str], None] | None = None,
                 track_tags: bool = False,
                 templates: dict[str, Template] | None = None,
                 on_send: Callable | None = None,
                 on_generate: Callable | None = None):
        self.max_tag_depth = max_tag_depth
        self.max_steps = max_steps
        self.rng = random.Random(seed) if seed is not None else None
        self.trace = trace
        self.templates = templates
        self.on_send = on_send
        self.on_generate = on_generate
        self._counts: dict[str, tuple[list, list]] = {}
        self.root = _Activation(root, 0, self._counts)
        self.next_base = len(root)
        self.store: dict = {}
        self.mstate: dict = {}
        self.ready: list = []
        self.results: dict[int, object] = {}
        self.stats = RunStats()
        self.stats.firings_by_tag = Counter() if track_tags else None
        self._tag_pending: Counter | None = Counter() if track_tags else None
        self.dynamic = templates is not None

    # {{{ token routing

    def start(self) -> None:
        for n in self.root.tpl.startup:
            self.ready.append((self.root, n, ROOT, self.root.tpl.proto[n][:]))

    def deliver(self, act: _Activation, n: int, port: int, tag: Tag, val) -> None:
        tpl = act.tpl
        mode = tpl.dmode[n]
        if mode == 0:
            ins = tpl.proto[n][:]
            ins[port] = val
            self.ready.append((act, n, tag, ins))
            return
        if mode == 2:
            self.ready.append((act, n, tag, [val]))
            return
        if mode == 3:
            key = (act.base + n, tag)
            st = self.mstate.get(key)
            if st is None:
                st = self.mstate[key] = [0, False]
            st[0] += 1
            if val is not DEAD and not st[1]:
                st[1] = True
                self.ready.append((act, n, tag, [val]))
            if st[0] >= tpl.merge_expected[n]:
                del self.mstate[key]
                if not st[1]:
                    self.ready.append((act, n, tag, [DEAD]))
            return
        if mode == 4:
            if port == 0:
                head = tag.head
                if head is None:
                    raise EngineFault(f"{tpl.ids[n]}: token on the empty tag")
                if tpl.kind[n] == K_RETURN:
                    if head >= 0:
                        raise EngineFault(f"{tpl.ids[n]}: Return on loop frame {tag!r}")
                    if head != ~tpl.arg[n]:
                        self.stats.dropped_returns += 1
                        return
                else:
                    if head < 0:
                        raise EngineFault(f"{tpl.ids[n]}: Exit on call frame {tag!r}")
                    if val is DEAD:
                        return
                tag = tag.tail
            elif val is DEAD:
                # a dead call never enters the body: its Return fires from control alone
                ins = tpl.proto[n][:]
                ins[0] = DEAD
                self.ready.append((act, n, tag, ins))
                return
            need = tpl.need[n]
            if need == 1:
                ins = tpl.proto[n][:]
                ins[port] = val
                self.ready.append((act, n, tag, ins))
                return
        need = tpl.need[n]
        key = (act.base + n, tag)
        store = self.store
        slot = store.get(key)
        if slot is None:
            slot = store[key] = tpl.proto[n][:]
            if len(store) > self.stats.max_pending:
                self.stats.max_pending = len(store)
            if self._tag_pending is not None:
                self._tag_pending[tag] += 1
                self.stats.max_live_tags = max(self.stats.max_live_tags, len(self._tag_pending))
        elif slot[port] is not None:
            raise EngineFault(f"{tpl.ids[n]}: two tokens for port {port} at tag {tag!r}")
        slot[port] = val
        slot[-1] += 1
        if slot[-1] == need:
            del store[key]
            if self._tag_pending is not None:
                c = self._tag_pending[tag] - 1
                if c:
                    self._tag_pending[tag] = c
                else:
                    del self._tag_pending[tag]
            self.ready.append((act, n, tag, slot))

    def inject(self, node: int, tag: Tag, val) -> None:
        """Hand a received token to a ``Recv`` node of the root activation."""
        self.ready.append((self.root, node, tag, [val]))

    # }}}

    # {{{ firing

    def _pop(self):
        ready = self.ready
        if self.rng is not None and len(ready) > 1:
            i = self.rng.randrange(len(ready))
            ready[i], ready[-1] = ready[-1], ready[i]
        return ready.pop()

    def _compute(self, entry) -> list:
        act, n, tag, ins = entry
        tpl = act.tpl
        return tpl.fn[n](tpl.arg[n], tag, ins, self.max_tag_depth)

    def _node_name(self, act, n):
        return (act.tpl.name, act.tpl.ids[n]) if self.dynamic else act.tpl.ids[n]

    def _emit(self, act, n, tag, ins, emissions) -> None:
        tpl = act.tpl
        k = tpl.kind[n]
        live = False
        if k == K_OUTPUT:
            v = ins[0]
            live = v is not DEAD
            if act.parent is None:
                self.results[tpl.output_index[n]] = v
            else:
                parent = act.parent
                pouts = parent.tpl.outs[act.call_node]
                k_out = tpl.output_index[n]
                if k_out < len(pouts):
                    for d, dp in pouts[k_out]:
                        self.deliver(parent, d, dp, tag, v)
        elif k == K_SEND:
            v = ins[0] if tpl.nports[n] else ins[-2]
            live = v is not DEAD
            self.on_send(act, n, tag, v)
        elif k == K_FNCALL:
            live = self._expand(act, n, tag, ins)
        else:
            outs = tpl.outs[n]
            deliver = self.deliver
            for port, t, v in emissions:
                if port == CTRL:
                    for d, dp in tpl.couts[n]:
                        deliver(act, d, dp, t, v)
                else:
                    if v is not DEAD:
                        live = True
                    for d, dp in outs[port]:
                        deliver(act, d, dp, t, v)
            if live and self.on_generate is not None and k in GENERATORS:
                self.on_generate(act, n, emissions[0][1])
        act.fired[n] += 1
        if live:
            act.live[n] += 1
        st = self.stats
        st.steps += 1
        if st.steps > self.max_steps:
            raise StepLimitExceeded(f"step limit {self.max_steps} exceeded")
        if tag.depth > st.max_tag_depth:
            st.max_tag_depth = tag.depth
        if st.firings_by_tag is not None:
            st.firings_by_tag[(self._node_name(act, n), tag)] += 1
        if self.trace is not None:
            out = "-"
            if k == K_SWITCH:
                out = ",".join(format_payload(v) for _, _, v in emissions)
            elif emissions:
                out = format_payload(emissions[0][2])
            elif k in (K_OUTPUT, K_SEND):
                out = format_payload(ins[0] if tpl.nports[n] else ins[-2])
            self.trace(f"node={tpl.ids[n]} tag={tag!r} op={tpl.graph.nodes[tpl.ids[n]].kind} out={out}")

    def _expand(self, act, n, tag, ins) -> bool:
        tpl = act.tpl
        args = ins[:tpl.nports[n]]
        outs = tpl.outs[n]
        if DEAD in ins[:-1]:
            for port_dsts in outs:
                for d, dp in port_dsts:
                    self.deliver(act, d, dp, tag, DEAD)
            return False
        callee = self.templates[tpl.arg[n]]
        child = _Activation(callee, self.next_base, self._counts, act, n)
        self.next_base += len(callee)
        self.stats.nodes_materialized += len(callee)
        self.stats.clones[callee.name] += 1
        for i, v in enumerate(args):
            self.ready.append((child, callee.params[i], tag, [v]))
        for s in callee.startup:
            self.ready.append((child, s, tag, callee.proto[s][:]))
        return True

    def step(self) -> bool:
        if not self.ready:
            return False
        entry = self._pop()
        self._emit(entry[0], entry[1], entry[2], entry[3], self._compute(entry))
        return True

    def run(self, concurrent: bool = False, threads: int = 4) -> None:
        if concurrent:
            self._run_concurrent(threads)
            return
        ready = self.ready
        compute = self._compute
        emit = self._emit
        pop = self._pop if self.rng is not None else ready.pop
        while ready:
            entry = pop()
            emit(entry[0], entry[1], entry[2], entry[3], compute(entry))

    def _run_concurrent(self, threads: int) -> None:
        rng = self.rng or random.Random(0)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            while self.ready:
                batch = self.ready
                self.ready = []
                rng.shuffle(batch)
                results = list(pool.map(self._compute, batch))
                for entry, em in zip(batch, results):
                    self._emit(entry[0], entry[1], entry[2], entry[3], em)

    def pending(self) -> list[tuple[str, Tag]]:
        """Node instances still waiting for tokens."""
        stuck = []
        for key in list(self.store) + list(self.mstate):
            gid, tag = key
            stuck.append((self._gid_name(gid), tag))
        return stuck

    def _gid_name(self, gid: int):
        if gid < len(self.root.tpl):
            return self.root.tpl.ids[gid]
        return f"#{gid}"

    def finish_stats(self) -> RunStats:
        st = self.stats
        st.firings = Counter()
        st.live_firings = Counter()
        tpls = {self.root.tpl.name: self.root.tpl}
        if self.templates:
            tpls.update(self.templates)
        for name, (fired, live) in self._counts.items():
            tpl = tpls[name]
            for i, c in enumerate(fired):
                if c:
                    key = (name, tpl.ids[i]) if self.dynamic else tpl.ids[i]
                    st.firings[key] = c
                    if live[i]:
                        st.live_firings[key] = live[i]
        return st

    # }}}


def _result(ex: Executor, n_outputs: int):
    if len(ex.results) != n_outputs:
        raise Deadlock("no result produced", ex.pending())
    vals = [ex.results[i] for i in range(n_outputs)]
    if any(v is DEAD for v in vals):
        raise EvaluationError("program result is dead")
    return vals[0] if n_outputs == 1 else tuple(vals)


def run(g: Graph, *, max_tag_depth: int = 100_000, max_steps: int = 10**9,
        seed: int | None = None, concurrent: bool = False, threads: int = 4,
        trace: Callable[[str], None] | None = None, track_tags: bool = False):
    """Execute a fixed graph; return ``(result, RunStats)``.

    ``seed`` randomises the ready-queue order; ``concurrent`` fires whole
    batches of ready instances on a thread pool.
    """
    if any(op.kind == "FnCall" for op in g.nodes.values()):
        raise EngineFault("graph still contains FnCall nodes; transform it first")
    before = len(g.nodes)
    tpl = Template(g)
    ex = Executor(tpl, max_tag_depth=max_tag_depth, max_steps=max_steps, seed=seed,
                  trace=trace, track_tags=track_tags)
    ex.start()
    ex.run(concurrent=concurrent, threads=threads)
    stats = ex.finish_stats()
    stats.graph_nodes_before = before
    stats.graph_nodes_after = len(g.nodes)
    stuck = ex.pending()
    if stuck:
        raise Deadlock("tokens left unmatched at quiescence", stuck)
    return _result(ex, tpl.n_outputs), stats


def run_dynamic(p: Program, *, max_tag_depth: int = 100_000, max_steps: int = 10**9,
                seed: int | None = None, trace: Callable[[str], None] | None = None,
                track_tags: bool = False, max_clones: int = 10**8):
    """Execute *p* by instantiating callee graphs at each live call."""
    if p.entry is None:
        raise EngineFault("program has no entry")
    templates = {name: Template(g) for name, g in p.graphs.items()}
    root = templates[p.entry]
    ex = Executor(root, max_tag_depth=max_tag_depth, max_steps=max_steps, seed=seed,
                  trace=trace, track_tags=track_tags, templates=templates)
    ex.stats.nodes_materialized = len(root)
    ex.start()
    ex.run()
    stats = ex.finish_stats()
    if sum(stats.clones.values()) > max_clones:
        raise StepLimitExceeded("expansion limit exceeded")
    stats.graph_nodes_before = stats.graph_nodes_after = sum(len(g.nodes) for g in p.graphs.values())
    stuck = ex.pending()
    if stuck:
        raise Deadlock("tokens left unmatched at quiescence", stuck)
    return _result(ex, root.n_outputs), stats
