"""Command-line driver: ``tagflow run|graph|grad|bench``.

Exit status is 0 on success, 1 when the input program or plan is rejected or
the run fails for a program-level reason, and 2 on an internal fault.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import corpus
from .autodiff import DifferentiationError, forward_op_firings, grad_program
from .distsim import PartitionError, load_plan, partition, random_assignment, run_distributed
from .engine import EngineError, EngineFault, format_payload, run, run_dynamic
from .frontend import Ast, FrontendError, lower, parse
from .graph import GraphParseError, Program, program_to_dot, serialize, to_dot
from .interpreter import InterpreterError, evaluate
from .transform import TransformError, eliminate_recursion

DIAGNOSTIC_ERRORS = (FrontendError, TransformError, PartitionError, GraphParseError,
                     DifferentiationError, InterpreterError, OSError)


class UsageError(Exception):
    pass


def read_source(name: str) -> Ast:
    """Parse a file, falling back to a bundled corpus program of that name."""
    path = Path(name)
    if path.exists():
        return parse(path.read_text())
    stem = path.name[:-3] if path.name.endswith(".df") else path.name
    if stem in corpus.names():
        return corpus.load(stem)
    raise UsageError(f"{name}: no such file or corpus program")


def _numbers(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _apply_entry(ast: Ast, args) -> Ast:
    if args.call:
        fn, _, rest = args.call.partition("(")
        vals = _numbers(rest.rstrip(")"))
        ast = corpus.with_entry(ast, fn.strip(), vals)
    return ast


def _emit_stats(stats: dict, args) -> None:
    lines = [f"{k}={v}" for k, v in stats.items()]
    if args.stats:
        for line in lines:
            print(line)
    if args.stats_out:
        Path(args.stats_out).write_text("\n".join(lines) + "\n")


def _assignment(g, args) -> dict[str, int]:
    if args.plan:
        plan = load_plan(Path(args.plan).read_text())
        # unlisted nodes stay on worker 0
        return {n: plan.get(n, 0) for n in g.nodes}
    return random_assignment(g, args.workers, args.seed or 0)


def cmd_run(args) -> int:
    if args.mode == "distributed" and args.workers < 1:
        raise UsageError("--workers must be at least 1")
    ast = _apply_entry(read_source(args.source), args)
    p = lower(ast)
    trace = print if args.trace else None
    if args.mode == "dynamic":
        value, st = run_dynamic(p, max_steps=args.max_steps, max_tag_depth=args.max_tag_depth,
                                seed=args.seed, trace=trace)
        stats = st.summary()
        stats["cloned_nodes"] = st.nodes_materialized
    elif args.mode == "static":
        g = eliminate_recursion(p)
        value, st = run(g, max_steps=args.max_steps, max_tag_depth=args.max_tag_depth,
                        seed=args.seed, concurrent=args.concurrent, trace=trace)
        stats = st.summary()
    else:
        g = eliminate_recursion(p)
        part = partition(g, _assignment(g, args), args.workers, tracker=not args.no_tracker)
        res = run_distributed(part, seed=args.seed or 0, max_steps=args.max_steps,
                              max_tag_depth=args.max_tag_depth, trace=trace)
        value = res.value
        stats = {
            "workers": args.workers,
            "channels": len(part.channels),
            "messages": res.stats.messages,
            "bytes": res.stats.bytes_sent,
            "steps": sum(res.stats.steps.values()),
            "conserved": res.stats.conserved,
        }
    print(format_payload(value))
    _emit_stats(stats, args)
    return 0


def cmd_graph(args) -> int:
    ast = read_source(args.source)
    p = lower(ast)
    if args.stage == "lowered":
        out = program_to_dot(p) if args.format == "dot" else serialize(p)
    elif args.stage == "transformed":
        g = eliminate_recursion(p)
        out = to_dot(g) if args.format == "dot" else serialize(Program({g.name: g}, g.name))
    elif args.stage == "fused":
        fn, at = _grad_target(ast, args)
        gp = grad_program(p, fn, at, None, "fused")
        out = program_to_dot(gp) if args.format == "dot" else serialize(gp)
    else:
        g = eliminate_recursion(p)
        part = partition(g, _assignment(g, args), args.workers, tracker=not args.no_tracker)
        progs = Program({w.name: w for w in part.workers})
        if args.format == "dot":
            out = program_to_dot(progs)
        else:
            table = "".join(f"# channel {c} {k} {s} -> {d}\n" for c, k, s, d in part.channel_table())
            out = table + serialize(progs)
    sys.stdout.write(out if out.endswith("\n") else out + "\n")
    return 0


def _grad_target(ast: Ast, args) -> tuple[str, list[float]]:
    fn = getattr(args, "fn", None)
    at = _numbers(getattr(args, "at", None))
    if fn is None:
        fn, default = corpus.default_call(ast)
        at = at or default
    if ast.get(fn) is None:
        raise UsageError(f"unknown function {fn!r}")
    if len(at) != len(ast.get(fn).params):
        raise UsageError(f"{fn} takes {len(ast.get(fn).params)} arguments, got {len(at)}")
    return fn, at


def cmd_grad(args) -> int:
    ast = read_source(args.source)
    fn, at = _grad_target(ast, args)
    wrt = [int(i) for i in args.wrt.split(",")] if args.wrt else None
    p = lower(ast)
    gp = grad_program(p, fn, at, wrt, args.scheme)
    if args.mode == "dynamic":
        if args.scheme == "fused":
            raise UsageError("fused gradients need the static graph; use --mode static")
        res, st = run_dynamic(gp, max_steps=args.max_steps)
    else:
        res, st = run(eliminate_recursion(gp), max_steps=args.max_steps, seed=args.seed)
    value, grads = res[0], res[1:]
    print(f"value={format_payload(value)}")
    print("grad=" + ",".join(format_payload(x) for x in grads))
    stats = st.summary()
    if args.mode == "static":
        fwd = p.graphs[fn]
        for n, op in fwd.nodes.items():
            if op.kind in ("Add", "Sub", "Mul", "Div", "Neg"):
                stats[f"forward_firings[{n}]"] = forward_op_firings(st, fn, n)
    for k, v in stats.items():
        print(f"{k}={v}")
    return 0


#: program, function, default argument lists, quick argument lists
TABLE1 = [
    ("fib", "fib", [[20], [22], [24]], [[10], [12]]),
    ("ack", "ack", [[3, 2], [3, 3], [3, 4]], [[2, 2], [3, 1]]),
    ("tak", "tak", [[18, 12, 6]], [[6, 4, 2]]),
    ("primes", "primes", [[100], [500], [1000]], [[30], [60]]),
]


def bench_rows(quick: bool = False, compare=("static", "dynamic")) -> list[dict]:
    rows = []
    for prog, fn, sizes, small in TABLE1:
        base = corpus.load(prog)
        for vals in (small if quick else sizes):
            ast = corpus.with_entry(base, fn, vals)
            expect = evaluate(ast)
            p = lower(ast)
            row = {"program": f"{fn}({','.join(str(v) for v in vals)})", "expected": expect}
            ok = True
            for mode in compare:
                t0 = time.perf_counter()
                if mode == "static":
                    value, st = run(eliminate_recursion(p))
                else:
                    value, st = run_dynamic(p)
                row[f"{mode}_s"] = time.perf_counter() - t0
                row[f"{mode}_firings"] = sum(st.firings.values())
                row[f"{mode}_value"] = value
                ok = ok and value == expect
            row["ok"] = ok
            if "static" in compare and "dynamic" in compare:
                dyn, sta = row["dynamic_s"], row["static_s"]
                row["speedup_pct"] = 100.0 * (dyn - sta) / dyn if dyn else 0.0
            rows.append(row)
    return rows


def format_bench(rows: list[dict], compare) -> str:
    head = ["program", "value"] + [f"{m} (s)" for m in compare] + [f"{m} firings" for m in compare]
    if "speedup_pct" in rows[0]:
        head.append("speedup %")
    head.append("ok")
    lines = []
    for r in rows:
        cells = [r["program"], format_payload(r["expected"])]
        cells += [f"{r[m + '_s']:.3f}" for m in compare]
        cells += [str(r[m + "_firings"]) for m in compare]
        if "speedup_pct" in r:
            cells.append(f"{r['speedup_pct']:+.1f}")
        cells.append("yes" if r["ok"] else "NO")
        lines.append(cells)
    widths = [max(len(h), *(len(c[i]) for c in lines)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*c) for c in lines]
    return "\n".join(line.rstrip() for line in out)


def cmd_bench(args) -> int:
    if args.suite != "table1":
        raise UsageError(f"unknown suite {args.suite!r}")
    compare = tuple(args.compare.split(","))
    for m in compare:
        if m not in ("static", "dynamic"):
            raise UsageError(f"cannot compare mode {m!r}")
    rows = bench_rows(args.quick, compare)
    print(format_bench(rows, compare))
    print("speed-up = (dynamic - static) / dynamic; timings are informational")
    return 0 if all(r["ok"] for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tagflow", description="Tagged dataflow runtime for recursive programs")
    sub = ap.add_subparsers(dest="command", required=True)

    def limits(sp):
        sp.add_argument("--seed", type=int, default=None, help="scheduler seed")
        sp.add_argument("--max-steps", type=int, default=10**9)
        sp.add_argument("--max-tag-depth", type=int, default=100_000)

    def placement(sp):
        sp.add_argument("--workers", type=int, default=2)
        sp.add_argument("--plan", help="file of 'node <id> -> worker <w>' lines")
        sp.add_argument("--no-tracker", action="store_true", help="disable tag tracking")

    r = sub.add_parser("run", help="evaluate a program")
    r.add_argument("source")
    r.add_argument("--mode", choices=("static", "dynamic", "distributed"), default="static")
    r.add_argument("--call", help="override the entry, e.g. 'fib(10)'")
    r.add_argument("--concurrent", action="store_true", help="fire ready batches on a thread pool")
    r.add_argument("--trace", action="store_true", help="print one line per firing")
    r.add_argument("--stats", action="store_true", help="print key=value statistics")
    r.add_argument("--stats-out", help="write statistics to this file")
    limits(r)
    placement(r)
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("graph", help="print a graph as DOT or text")
    g.add_argument("source")
    g.add_argument("--stage", choices=("lowered", "transformed", "fused", "partitioned"), default="lowered")
    g.add_argument("--format", choices=("dot", "text"), default="dot")
    g.add_argument("--fn", help="function to differentiate for --stage fused")
    g.add_argument("--at", help="comma-separated arguments for --stage fused")
    g.add_argument("--seed", type=int, default=0)
    placement(g)
    g.set_defaults(func=cmd_graph)

    d = sub.add_parser("grad", help="value and gradient of a function")
    d.add_argument("source")
    d.add_argument("--fn")
    d.add_argument("--at", help="comma-separated argument values")
    d.add_argument("--wrt", help="comma-separated parameter indices (default: all)")
    d.add_argument("--scheme", choices=("naive", "fused"), default="fused")
    d.add_argument("--mode", choices=("static", "dynamic"), default="static")
    limits(d)
    d.set_defaults(func=cmd_grad)

    b = sub.add_parser("bench", help="static vs dynamic comparison table")
    b.add_argument("--suite", default="table1")
    b.add_argument("--compare", default="static,dynamic")
    b.add_argument("--quick", action="store_true", help="small inputs")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FrontendError as e:
        for d in e.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return 1
    except (UsageError, *DIAGNOSTIC_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except EngineFault as e:
        print(f"internal fault: {e}", file=sys.stderr)
        return 2
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"internal fault: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
