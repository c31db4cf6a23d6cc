import pytest
from hypothesis import given, strategies as st

from tagflow import corpus
from tagflow.distsim import (
    PartitionError, Scopes, build_tag_tracker, decode_message, dump_plan, encode_message,
    load_plan, partition, random_assignment, run_distributed,
)
from tagflow.engine import DEAD, ROOT, Deadlock, Tag, run
from tagflow.frontend import compile_source, lower
from tagflow.transform import eliminate_recursion

from conftest import loop_sum

SMALL = {"fib": ("fib", [8]), "ack": ("ack", [2, 1]), "tak": ("tak", [6, 4, 2]), "primes": ("primes", [20])}


def corpus_graph(name):
    a = corpus.load(name)
    if name in SMALL:
        a = corpus.with_entry(a, *SMALL[name])
    return eliminate_recursion(lower(a))


def fact_body_remote(g):
    """Everything in fact's body except its Call nodes goes to worker 1."""
    return {n: int(n.startswith("fact.") and g.nodes[n].kind != "Call") for n in g.nodes}


# {{{ wire format

tags = st.lists(st.integers(-50, 50), max_size=5).map(
    lambda cs: Tag.from_frames([]) if not cs else _tag(cs))


def _tag(codes):
    t = ROOT
    for c in codes:
        t = Tag(c, t)
    return t


@given(st.integers(0, 2**31), tags, st.one_of(st.floats(allow_nan=False), st.booleans(), st.just(DEAD)))
def test_message_roundtrip(ch, tag, payload):
    c, t, v = decode_message(encode_message(ch, tag, payload))
    assert (c, t) == (ch, tag)
    if payload is DEAD:
        assert v is DEAD
    else:
        assert v == payload and type(v) is type(payload if isinstance(payload, bool) else 0.0)


def test_message_length_checked():
    msg = encode_message(3, ROOT, 1.0)
    with pytest.raises(ValueError):
        decode_message(msg + b"\x00")

# }}}


# {{{ plans

def test_plan_roundtrip():
    plan = {"a": 0, "b.c": 3}
    assert load_plan(dump_plan(plan)) == plan


def test_plan_comments_and_errors():
    assert load_plan("# header\n\nnode x -> worker 1  # trailing\n") == {"x": 1}
    with pytest.raises(PartitionError, match="line 1"):
        load_plan("x -> 1\n")
    with pytest.raises(PartitionError, match="integer"):
        load_plan("node x -> worker one\n")


def test_partition_checks_assignment():
    g = corpus_graph("fact")
    plan = random_assignment(g, 2, 0)
    bad = dict(plan)
    bad.pop(next(n for n, op in g.nodes.items() if op.kind == "Merge"))
    with pytest.raises(PartitionError, match="no worker"):
        partition(g, bad, 2)
    with pytest.raises(PartitionError, match="out of range"):
        partition(g, plan, 1)

# }}}


# {{{ scopes and partitioning

def test_scopes_of_fact():
    g = corpus_graph("fact")
    sc = Scopes(g)
    calls = {n for n, op in g.nodes.items() if op.kind == "Call"}
    for n, op in g.nodes.items():
        if n in sc.lazy:
            continue
        if op.kind == "Call":
            assert sc[n] == {n}
        elif n.startswith("fact.") and op.kind not in ("Return",):
            assert sc[n] <= calls and sc[n]
        elif n.startswith("result."):
            assert sc[n] == {ROOT}


def test_single_worker_has_no_channels():
    g = corpus_graph("fact")
    part = partition(g, {n: 0 for n in g.nodes}, 1)
    assert part.channels == []
    assert run_distributed(part).value == run(g)[0]


def test_channels_connect_workers():
    g = corpus_graph("fact")
    part = partition(g, random_assignment(g, 3, 1), 3)
    for c in part.channels:
        assert c.src_worker != c.dst_worker
        assert f"send{c.id}" in part.workers[c.src_worker].nodes
        assert f"recv{c.id}" in part.workers[c.dst_worker].nodes
    kinds = {k for _, k, _, _ in part.channel_table()}
    assert kinds <= {"data", "control", "pred"}


def test_tracker_keeps_generators_and_decisions():
    g = corpus_graph("fact")
    trk, preds = build_tag_tracker(g)
    kinds = {op.kind for op in trk.nodes.values()}
    assert "Call" in kinds and "Switch" in kinds
    assert not kinds & {"Mul", "Output"}
    assert all(op.kind == "Switch" for n, op in g.nodes.items() if n in preds)

# }}}


# {{{ execution

@pytest.mark.parametrize("name", corpus.names())
def test_corpus_distributed(name):
    g = corpus_graph(name)
    ref = run(g)[0]
    for workers in (1, 2, 4):
        for seed in range(3):
            part = partition(g, random_assignment(g, workers, seed), workers)
            r = run_distributed(part, seed=seed)
            assert r.value == ref
            assert r.stats.stuck == []
            assert r.stats.conserved


def test_loop_distributed():
    g = loop_sum(6)
    for seed in range(5):
        part = partition(g, random_assignment(g, 3, seed), 3)
        assert run_distributed(part, seed=seed).value == 21


def test_untaken_remote_branch_terminates():
    g = corpus_graph("deadbranch")
    # the callee of the dead branch lives alone on worker 1
    plan = {n: int(n.startswith("g.") or n.startswith("f.call")) for n in g.nodes}
    part = partition(g, plan, 2)
    r = run_distributed(part, max_steps=10_000)
    assert r.value == 42
    assert r.stats.conserved and r.stats.messages > 0


def test_tracker_needed_for_remote_recursion():
    g = corpus_graph("fact")
    plan = fact_body_remote(g)
    with pytest.raises(Deadlock) as err:
        run_distributed(partition(g, plan, 2, tracker=False))
    assert err.value.stuck
    assert run_distributed(partition(g, plan, 2, tracker=True)).value == run(g)[0]


def test_non_strict_reports_stuck():
    g = corpus_graph("fact")
    r = run_distributed(partition(g, fact_body_remote(g), 2, tracker=False), strict=False)
    assert r.stats.stuck


def test_seeds_agree_on_traffic():
    g = corpus_graph("fib")
    part = partition(g, random_assignment(g, 2, 5), 2)
    a = run_distributed(part, seed=1)
    b = run_distributed(part, seed=2)
    assert a.value == b.value
    assert a.stats.sends == b.stats.sends

# }}}
