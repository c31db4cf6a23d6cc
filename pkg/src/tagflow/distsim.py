"""In-process simulation of a tagged graph split across workers.

Cross-worker edges become ``Send``/``Recv`` pairs joined by a numbered
channel.  A worker's executor only fires a ``Recv`` at tag ``t`` once it
knows ``t`` exists in the scope of the sending node, i.e. once a tag
generator (``Call``, ``Enter``, ``Next``) in that scope produced ``t``
locally.  Without help, a worker that hosts a function body but none of its
generators never learns the tags and the run stalls; the tag tracker fixes
this by replaying the control skeleton of the graph on every such worker.

Workers are interleaved in one thread by a seeded RNG; messages travel as
bytes in the wire format of :func:`encode_message`.
"""

from __future__ import annotations

import random
import struct
from collections import Counter
from dataclasses import dataclass, field

from .engine import (
    DEAD, K_RECV, K_SEND, ROOT, Deadlock, EngineError, EvaluationError, Executor,
    StepLimitExceeded, Tag, Template, decode_frame, encode_frame,
)
from .graph import Graph, Op, const

CAPTURED = frozenset({"Call", "Enter", "Next", "Switch", "Merge", "Return", "Exit"})
GEN_KINDS = frozenset({"Call", "Enter", "Next"})
TRK = "trk."
CTRL_REF = -1


class PartitionError(ValueError):
    pass


# {{{ wire format

_HEAD = struct.Struct("<III")
_FRAME = struct.Struct("<BQ")
_PAYLOAD = struct.Struct("<Bd")


def encode_message(channel: int, tag: Tag, payload) -> bytes:
    """``u32 len | u32 channel | u32 nframes | (u8 kind, u64 value)* | u8 pkind | f64``.

    Frames are written innermost first; kind 0 is a loop frame, 1 a call
    frame.  Payload kind 0 is a number, 1 a boolean, 2 dead.
    """
    frames = tag.frames()
    body = [struct.pack("<II", channel, len(frames))]
    for f in frames:
        body.append(_FRAME.pack(0 if f.kind == "loop" else 1, f.value))
    if payload is DEAD:
        body.append(_PAYLOAD.pack(2, 0.0))
    elif isinstance(payload, bool):
        body.append(_PAYLOAD.pack(1, 1.0 if payload else 0.0))
    else:
        body.append(_PAYLOAD.pack(0, float(payload)))
    data = b"".join(body)
    return struct.pack("<I", len(data)) + data


def decode_message(buf: bytes) -> tuple[int, Tag, object]:
    (n,) = struct.unpack_from("<I", buf, 0)
    if n != len(buf) - 4:
        raise ValueError(f"length prefix {n} does not match body of {len(buf) - 4} bytes")
    _, channel, nframes = _HEAD.unpack_from(buf, 0)
    off = _HEAD.size
    codes = []
    for _ in range(nframes):
        kind, value = _FRAME.unpack_from(buf, off)
        off += _FRAME.size
        if kind not in (0, 1):
            raise ValueError(f"bad frame kind {kind}")
        codes.append(value if kind == 0 else ~value)
    pkind, v = _PAYLOAD.unpack_from(buf, off)
    tag = ROOT
    for c in reversed(codes):
        tag = Tag(c, tag)
    if pkind == 2:
        payload = DEAD
    elif pkind == 1:
        payload = v != 0.0
    elif pkind == 0:
        payload = v
    else:
        raise ValueError(f"bad payload kind {pkind}")
    return channel, tag, payload

# }}}


# {{{ plans

def load_plan(text: str) -> dict[str, int]:
    """Parse lines ``node <id> -> worker <w>``; ``#`` starts a comment."""
    plan: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5 or parts[0] != "node" or parts[2] != "->" or parts[3] != "worker":
            raise PartitionError(f"line {lineno}: expected 'node <id> -> worker <w>'")
        try:
            plan[parts[1]] = int(parts[4])
        except ValueError:
            raise PartitionError(f"line {lineno}: worker must be an integer") from None
    return plan


def dump_plan(assignment: dict[str, int]) -> str:
    return "".join(f"node {n} -> worker {w}\n" for n, w in assignment.items())


def random_assignment(g: Graph, workers: int, seed: int = 0) -> dict[str, int]:
    rng = random.Random(seed)
    return {n: rng.randrange(workers) for n in g.nodes}

# }}}


# {{{ scope analysis

def _preds(g: Graph):
    data: dict[str, list[tuple[str, int]]] = {n: [] for n in g.nodes}
    ctrl: dict[str, list[str]] = {n: [] for n in g.nodes}
    for e in g.data_edges:
        data[e.dst].append((e.src, e.src_port))
    for s, d in g.control_edges:
        ctrl[d].append(s)
    return data, ctrl


class Scopes:
    """Which generators can have produced the tags a node fires at.

    ``ROOT`` in a scope stands for the root tag.  Tag generators have two
    scopes: their data output lives in ``{self}``, their control output (and
    their input) in the enclosing scope.
    """

    def __init__(self, g: Graph):
        self.g = g
        ctrl_dsts = {d for _, d in g.control_edges}
        self.lazy = {n for n, op in g.nodes.items() if op.kind == "Const" and n not in ctrl_dsts}
        data, ctrl = _preds(g)
        self.data_preds = data
        self.ctrl_preds = ctrl
        out: dict[str, frozenset] = {n: frozenset() for n in g.nodes if n not in self.lazy}
        inner: dict[str, frozenset] = dict(out)
        self._out = out
        self._in = inner
        changed = True
        while changed:
            changed = False
            for n in out:
                i = self._input_scope(n)
                o = self._output_scope(n, i)
                if i != inner[n] or o != out[n]:
                    inner[n], out[n] = i, o
                    changed = True

    def _input_scope(self, n: str, data_only: bool = False) -> frozenset:
        srcs = [(s, p) for s, p in self.data_preds[n] if s not in self.lazy]
        if not data_only:
            srcs += [(s, CTRL_REF) for s in self.ctrl_preds[n] if s not in self.lazy]
        if not srcs:
            return frozenset({ROOT})
        acc: set = set()
        for s, p in srcs:
            acc |= self.port_scope(s, p)
        return frozenset(acc)

    def _output_scope(self, n: str, inner: frozenset) -> frozenset:
        op = self.g.nodes[n]
        if op.kind in GEN_KINDS:
            return frozenset({n})
        if op.kind in ("Return", "Exit"):
            # the frame being popped comes in with the data, not the control edge
            inner = self._input_scope(n, data_only=True)
        if op.kind == "Return":
            acc: set = set()
            for c in inner:
                if c is not ROOT and self.g.nodes[c].kind == "Call" and self.g.nodes[c].args[0] == op.args[0]:
                    acc |= self._in[c]
            return frozenset(acc)
        if op.kind == "Exit":
            acc = set()
            for c in inner:
                if c is not ROOT and self.g.nodes[c].kind == "Enter":
                    acc |= self._in[c]
            return frozenset(acc)
        return inner

    def port_scope(self, n: str, port: int) -> frozenset:
        """Scope of the tokens on output *port* of *n* (``-1`` is control)."""
        if port == CTRL_REF and self.g.nodes[n].kind in ("Call", "Enter"):
            return self._in[n]
        return self._out[n]

    def __getitem__(self, n: str) -> frozenset:
        return self._out[n]

# }}}


# {{{ partitioning

@dataclass
class Channel:
    id: int
    kind: str          # data, control or pred
    src_worker: int
    dst_worker: int
    src: tuple[str, int]        # node and port in the original graph
    dst: str
    dst_port: int | None
    scope: frozenset = frozenset()


@dataclass
class Partition:
    graph: Graph
    assignment: dict[str, int]
    workers: list[Graph]
    channels: list[Channel] = field(default_factory=list)
    tracker: bool = False
    scopes: Scopes | None = None

    def channel_table(self) -> list[tuple[int, str, int, int]]:
        return [(c.id, c.kind, c.src_worker, c.dst_worker) for c in self.channels]


def partition(g: Graph, assignment: dict[str, int], workers: int | None = None,
              tracker: bool = True) -> Partition:
    """Split *g* by *assignment*; lazy constants go with their consumers."""
    scopes = Scopes(g)
    missing = [n for n in g.nodes if n not in scopes.lazy and n not in assignment]
    if missing:
        raise PartitionError(f"no worker assigned to {', '.join(missing[:5])}")
    nw = workers if workers is not None else 1 + max(assignment.get(n, 0) for n in g.nodes)
    for n in g.nodes:
        if n not in scopes.lazy and not 0 <= assignment[n] < nw:
            raise PartitionError(f"{n}: worker {assignment[n]} out of range 0..{nw - 1}")
    for s, d in g.control_edges:
        if g.nodes[s].kind in ("Switch", "Output", "Send"):
            raise PartitionError(f"control edge out of {g.nodes[s].kind} {s!r}")
    wg = [Graph(f"{g.name}@{w}", 0) for w in range(nw)]
    for n, op in g.nodes.items():
        if n not in scopes.lazy:
            wg[assignment[n]].add_node(n, op)
    part = Partition(g, dict(assignment), wg, [], tracker, scopes)

    def new_channel(kind, sw, dw, src, dst, dport, scope) -> Channel:
        ch = Channel(len(part.channels), kind, sw, dw, src, dst, dport, scope)
        part.channels.append(ch)
        wg[sw].add_node(f"send{ch.id}", Op("Send", (ch.id,)))
        wg[dw].add_node(f"recv{ch.id}", Op("Recv", (ch.id,)))
        return ch

    for e in g.data_edges:
        dw = assignment[e.dst]
        if e.src in scopes.lazy:
            if e.src not in wg[dw].nodes:
                wg[dw].add_node(e.src, g.nodes[e.src])
            wg[dw].connect(*e)
            continue
        sw = assignment[e.src]
        if sw == dw:
            wg[sw].connect(*e)
            continue
        ch = new_channel("data", sw, dw, (e.src, e.src_port), e.dst, e.dst_port,
                         scopes.port_scope(e.src, e.src_port))
        wg[sw].connect(e.src, e.src_port, f"send{ch.id}", 0)
        wg[dw].connect(f"recv{ch.id}", 0, e.dst, e.dst_port)
    for s, d in g.control_edges:
        sw, dw = assignment[s], assignment[d]
        if sw == dw:
            wg[sw].connect_control(s, d)
            continue
        ch = new_channel("control", sw, dw, (s, CTRL_REF), d, None, scopes.port_scope(s, CTRL_REF))
        wg[sw].connect_control(s, f"send{ch.id}")
        wg[dw].connect_control(f"recv{ch.id}", d)
    if tracker:
        _attach_tracker(part)
    return part


def build_tag_tracker(g: Graph, scopes: Scopes | None = None) -> tuple[Graph, dict[str, tuple[str, int]]]:
    """Reduced copy of *g* keeping only nodes that decide which tags exist.

    Returns the tracker graph (ids prefixed ``trk.``) and, for every tracker
    ``Switch``, the original source of its predicate.  Predicate ports are
    left unconnected; the caller wires them to a channel.  Suppressed nodes
    are bypassed: a port fed through several of them gets a strict ``Add``
    join so it fires, live or dead, exactly when all its sources have.
    """
    scopes = scopes or Scopes(g)
    lazy = scopes.lazy
    data, ctrl = scopes.data_preds, scopes.ctrl_preds
    captured = [n for n, op in g.nodes.items() if op.kind in CAPTURED]
    cap = set(captured)
    memo: dict[str, list[tuple[str, int]]] = {}

    def refs_of(n: str) -> list[tuple[str, int]]:
        if n in memo:
            return memo[n]
        memo[n] = []
        acc: list[tuple[str, int]] = []
        for s, p in data[n]:
            acc += _ref(s, p)
        for s in ctrl[n]:
            acc += _ref(s, CTRL_REF)
        memo[n] = list(dict.fromkeys(acc))
        return memo[n]

    def _ref(s: str, p: int) -> list[tuple[str, int]]:
        if s in lazy:
            return []
        if s in cap:
            return [(s, p)]
        return refs_of(s)

    t = Graph(f"{g.name}.tracker", 0)
    for n in captured:
        t.add_node(TRK + n, g.nodes[n])
    counter = [0]

    def fresh(kind: str, op: Op) -> str:
        counter[0] += 1
        return t.add_node(f"{TRK}{kind}{counter[0]}", op)

    def as_port(r: tuple[str, int]) -> tuple[str, int]:
        s, p = r
        if p != CTRL_REF:
            return TRK + s, p
        c = fresh("tick", const(0.0))
        t.connect_control(TRK + s, c)
        return c, 0

    def join(refs: list[tuple[str, int]]) -> tuple[str, int]:
        if not refs:
            return fresh("zero", const(0.0)), 0
        acc = as_port(refs[0])
        for r in refs[1:]:
            b = as_port(r)
            a = fresh("join", Op("Add"))
            t.connect(acc[0], acc[1], a, 0)
            t.connect(b[0], b[1], a, 1)
            acc = (a, 0)
        return acc

    preds: dict[str, tuple[str, int]] = {}
    for n in captured:
        op = g.nodes[n]
        for s, p in sorted(data[n], key=lambda sp: 0):
            pass
        by_port = {e.dst_port: (e.src, e.src_port) for e in g.data_edges if e.dst == n}
        for port in sorted(by_port):
            s, p = by_port[port]
            if op.kind == "Switch" and port == 0:
                preds[n] = (s, p)
                continue
            if s in lazy:
                src = fresh("zero", const(0.0)), 0
            else:
                src = join(_ref(s, p))
            t.connect(src[0], src[1], TRK + n, port)
        for s in ctrl[n]:
            if s in lazy:
                continue
            if s in cap:
                t.connect_control(TRK + s, TRK + n)
                continue
            refs = refs_of(s)
            if not refs:
                continue
            src = join(refs)
            if t.nodes[src[0]].kind in ("Switch",) or src[1] != 0:
                ident = fresh("ident", Op("Identity"))
                t.connect(src[0], src[1], ident, 0)
                src = (ident, 0)
            t.connect_control(src[0], TRK + n)
    return t, preds


def _attach_tracker(part: Partition) -> None:
    g, scopes = part.graph, part.scopes
    needs = sorted({c.dst_worker for c in part.channels if c.scope != frozenset({ROOT})})
    if not needs:
        return
    tracker, preds = build_tag_tracker(g, scopes)
    for w in needs:
        wg = part.workers[w]
        for n, op in tracker.nodes.items():
            wg.add_node(n, op)
        for e in tracker.data_edges:
            wg.connect(*e)
        for s, d in tracker.control_edges:
            wg.connect_control(s, d)
        for sw_node, (ps, pp) in preds.items():
            owner = part.assignment[sw_node]
            og = part.workers[owner]
            # tap whatever feeds the real Switch's predicate on its own worker
            local = next((e.src, e.src_port) for e in og.data_edges if e.dst == sw_node and e.dst_port == 0)
            if owner == w:
                wg.connect(local[0], local[1], TRK + sw_node, 0)
                continue
            ch = Channel(len(part.channels), "pred", owner, w, (ps, pp), TRK + sw_node, 0,
                         scopes.port_scope(ps, pp) if ps not in scopes.lazy else frozenset({ROOT}))
            part.channels.append(ch)
            og.add_node(f"send{ch.id}", Op("Send", (ch.id,)))
            og.connect(local[0], local[1], f"send{ch.id}", 0)
            wg.add_node(f"recv{ch.id}", Op("Recv", (ch.id,)))
            wg.connect(f"recv{ch.id}", 0, TRK + sw_node, 0)

# }}}


# {{{ simulation

@dataclass
class DistStats:
    steps: Counter = field(default_factory=Counter)         # per worker
    sends: Counter = field(default_factory=Counter)         # per channel
    receives: Counter = field(default_factory=Counter)      # per channel
    bytes_sent: int = 0
    messages: int = 0
    stuck: list = field(default_factory=list)

    @property
    def conserved(self) -> bool:
        return self.sends == self.receives


@dataclass
class DistResult:
    value: object
    stats: DistStats


class _Worker:
    def __init__(self, sim: _Sim, w: int, g: Graph, opts: dict):
        self.sim = sim
        self.w = w
        self.tpl = Template(g)
        self.ex = Executor(self.tpl, on_send=self._on_send, on_generate=self._on_generate, **opts)
        self.recv_node = {self.tpl.arg[i]: i for i in range(len(self.tpl)) if self.tpl.kind[i] == K_RECV}
        self.scheduled: set = set()
        self.arrived: dict = {}
        self.done: set = set()

    def _on_send(self, act, n, tag, v) -> None:
        ch = self.tpl.arg[n]
        self.sim.stats.sends[ch] += 1
        msg = encode_message(ch, tag, v)
        self.sim.stats.bytes_sent += len(msg)
        self.sim.stats.messages += 1
        self.sim.inflight.append(msg)

    def _on_generate(self, act, n, tag) -> None:
        nid = self.tpl.ids[n]
        if self.sim.tracker:
            if not nid.startswith(TRK):
                return
            nid = nid[len(TRK):]
        elif nid.startswith(TRK):
            return
        for ch in self.sim.recvs_by_gen[self.w].get(nid, ()):
            self.schedule(ch, tag)

    def schedule(self, ch: int, tag: Tag) -> None:
        key = (ch, tag)
        if key in self.scheduled or key in self.done:
            return
        if key in self.arrived:
            self._fire_recv(ch, tag, self.arrived.pop(key))
        else:
            self.scheduled.add(key)

    def arrive(self, ch: int, tag: Tag, v) -> None:
        key = (ch, tag)
        if key in self.arrived or key in self.done:
            raise EngineError(f"channel {ch}: second message at tag {tag!r}")
        if key in self.scheduled:
            self.scheduled.discard(key)
            self._fire_recv(ch, tag, v)
        else:
            self.arrived[key] = v

    def _fire_recv(self, ch: int, tag: Tag, v) -> None:
        self.done.add((ch, tag))
        self.sim.stats.receives[ch] += 1
        self.ex.inject(self.recv_node[ch], tag, v)


class _Sim:
    def __init__(self, part: Partition, seed: int, max_steps: int, opts: dict):
        self.part = part
        self.rng = random.Random(seed)
        self.max_steps = max_steps
        self.tracker = part.tracker
        self.stats = DistStats()
        self.inflight: list[bytes] = []
        self.recvs_by_gen: list[dict[str, list[int]]] = [{} for _ in part.workers]
        for c in part.channels:
            for gen in c.scope:
                if gen is not ROOT:
                    self.recvs_by_gen[c.dst_worker].setdefault(gen, []).append(c.id)
        self.chan = {c.id: c for c in part.channels}
        self.workers = [_Worker(self, w, g, opts) for w, g in enumerate(part.workers)]

    def run(self):
        for wk in self.workers:
            wk.ex.start()
        for c in self.part.channels:
            if ROOT in c.scope:
                self.workers[c.dst_worker].schedule(c.id, ROOT)
        total = 0
        rng = self.rng
        while True:
            busy = [wk for wk in self.workers if wk.ex.ready]
            n = len(busy) + (1 if self.inflight else 0)
            if n == 0:
                break
            i = rng.randrange(n)
            if i < len(busy):
                wk = busy[i]
                wk.ex.step()
                self.stats.steps[wk.w] += 1
                total += 1
                if total > self.max_steps:
                    raise StepLimitExceeded(f"step limit {self.max_steps} exceeded")
            else:
                j = rng.randrange(len(self.inflight))
                self.inflight[j], self.inflight[-1] = self.inflight[-1], self.inflight[j]
                ch, tag, v = decode_message(self.inflight.pop())
                self.workers[self.chan[ch].dst_worker].arrive(ch, tag, v)
        stuck = []
        for wk in self.workers:
            stuck += [("pending", wk.w, n, t) for n, t in wk.ex.pending()]
            stuck += [("unmatched", wk.w, ch, t) for ch, t in wk.arrived]
            stuck += [("waiting", wk.w, ch, t) for ch, t in wk.scheduled]
        self.stats.stuck = stuck
        results: dict[int, object] = {}
        for wk in self.workers:
            results.update(wk.ex.results)
        return results


def run_distributed(part: Partition, *, seed: int = 0, max_steps: int = 10**7,
                    max_tag_depth: int = 100_000, trace=None, strict: bool = True) -> DistResult:
    """Run a partitioned graph to quiescence.

    With *strict* a run that leaves tokens or messages behind, or produces
    no result, raises :class:`Deadlock`.
    """
    opts = {"max_tag_depth": max_tag_depth, "max_steps": max_steps, "trace": trace}
    sim = _Sim(part, seed, max_steps, opts)
    results = sim.run()
    n_out = sum(1 for op in part.graph.nodes.values() if op.kind == "Output")
    value = None
    if len(results) == n_out:
        vals = [results[i] for i in range(n_out)]
        if any(v is DEAD for v in vals):
            raise EvaluationError("program result is dead")
        value = vals[0] if n_out == 1 else tuple(vals)
    if strict and (value is None or sim.stats.stuck):
        raise Deadlock("distributed run stalled", sim.stats.stuck)
    return DistResult(value, sim.stats)

# }}}
