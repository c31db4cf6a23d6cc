"""Direct recursive evaluator for the surface language.

Used as the reference oracle against which the dataflow executors are
checked.  Evaluation is call-by-value and only the taken branch of an ``if``
is evaluated.
"""

from __future__ import annotations

import sys
from collections import Counter

from .frontend import Apply, Ast, BinOp, If, Neg, Not, Number, Var


class InterpreterError(Exception):
    pass


def _binop(op: str, a, b):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0:
            raise InterpreterError("division by zero")
        return a / b
    if op == "==":
        return a == b
    if op == "<":
        return a < b
    raise InterpreterError(f"unknown operator {op!r}")


class Interpreter:
    """Evaluate definitions of *ast*; ``calls`` counts invocations per function."""

    def __init__(self, ast: Ast):
        self.defs = {d.name: d for d in ast.definitions}
        self.entry = ast.entry
        self.calls: Counter[str] = Counter()

    def call(self, name: str, *args):
        d = self.defs[name]
        self.calls[name] += 1
        return self.eval(d.body, dict(zip(d.params, args)))

    def eval(self, e, env):
        # iterate through tail positions to keep Python stack usage low
        while True:
            if isinstance(e, Number):
                return e.value
            if isinstance(e, Var):
                if e.name in env:
                    return env[e.name]
                return self.call(e.name)
            if isinstance(e, BinOp):
                return _binop(e.op, self.eval(e.lhs, env), self.eval(e.rhs, env))
            if isinstance(e, Neg):
                return -self.eval(e.operand, env)
            if isinstance(e, Not):
                return not self.eval(e.operand, env)
            if isinstance(e, If):
                e = e.then if self.eval(e.cond, env) else e.orelse
                continue
            if isinstance(e, Apply):
                args = [self.eval(a, env) for a in e.args]
                return self.call(e.name, *args)
            raise InterpreterError(f"cannot evaluate {e!r}")

    def run(self):
        if self.entry is None:
            raise InterpreterError("program has no entry definition")
        return self.call(self.entry)


def evaluate(ast: Ast, name: str | None = None, *args):
    """Evaluate ``name(*args)`` (default: the entry) with a raised recursion limit."""
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 200_000))
    try:
        it = Interpreter(ast)
        return it.call(name, *args) if name is not None else it.run()
    finally:
        sys.setrecursionlimit(old)


def central_difference(ast: Ast, name: str, args, index: int, h: float = 1e-6) -> float:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` using the direct evaluator."""
    hi = list(map(float, args))
    lo = list(hi)
    hi[index] += h
    lo[index] -= h
    return (evaluate(ast, name, *hi) - evaluate(ast, name, *lo)) / (2 * h)
