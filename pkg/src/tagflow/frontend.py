"""Surface language: a small first-order functional notation.

::

    result  = fact(3) + 5
    fact(n) = if (n == 1) then n else n * fact(n - 1)

Precedence, lowest first: ``if/then/else``, ``==``/``<``, ``+``/``-``,
``*``, ``/``, unary ``-``/``not``, application and atoms.  All binary
operators are left associative.  ``#`` starts a line comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

from .graph import Graph, Op, Program, const, fncall, merge, output, param


# {{{ AST

@dataclass(frozen=True)
class Number:
    value: float
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: Expr
    rhs: Expr
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Neg:
    operand: Expr
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Not:
    operand: Expr
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class If:
    cond: Expr
    then: Expr
    orelse: Expr
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Apply:
    name: str
    args: tuple[Expr, ...]
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


Expr = Union[Number, Var, BinOp, Neg, Not, If, Apply]


@dataclass(frozen=True)
class Definition:
    name: str
    params: tuple[str, ...]
    body: Expr
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Ast:
    definitions: tuple[Definition, ...]

    def get(self, name: str) -> Definition | None:
        for d in self.definitions:
            if d.name == name:
                return d
        return None

    @property
    def entry(self) -> str | None:
        """``result`` if defined, else the first zero-parameter definition."""
        if self.get("result") is not None:
            return "result"
        for d in self.definitions:
            if not d.params:
                return d.name
        return None

# }}}


# {{{ diagnostics

@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.code}: {self.message}"


class FrontendError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


class ParseError(FrontendError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__([Diagnostic("syntax-error", message, line, column)])
        self.line = line
        self.column = column

# }}}


# {{{ lexer

KEYWORDS = {"if", "then", "else", "not"}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<op>==|[-+*/<=(),])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str       # num, ident, kw, op, nl, eof
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    toks: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            toks.append(Token("nl", text, line, col))
            line += 1
            line_start = m.end()
        elif kind == "ident":
            toks.append(Token("kw" if text in KEYWORDS else "ident", text, line, col))
        elif kind in ("num", "op"):
            toks.append(Token(kind, text, line, col))
        pos = m.end()
    toks.append(Token("eof", "", line, pos - line_start + 1))
    return toks

# }}}


# {{{ parser

_LEVELS = [("==", "<"), ("+", "-"), ("*",), ("/",)]


class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.i = 0
        self.depth = 0   # parenthesis nesting; newlines are insignificant inside

    def peek(self, skip_nl: bool = False) -> Token:
        j = self.i
        if skip_nl or self.depth:
            while self.toks[j].kind == "nl":
                j += 1
        return self.toks[j]

    def next(self, skip_nl: bool = False) -> Token:
        if skip_nl or self.depth:
            while self.toks[self.i].kind == "nl":
                self.i += 1
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, tok: Token, what: str):
        found = "end of input" if tok.kind == "eof" else (
            "newline" if tok.kind == "nl" else repr(tok.text))
        raise ParseError(f"expected {what}, found {found}", tok.line, tok.col)

    def expect(self, text: str, skip_nl: bool = True) -> Token:
        t = self.next(skip_nl)
        if t.text != text or t.kind not in ("op", "kw"):
            self.error(t, repr(text))
        return t

    def program(self) -> Ast:
        defs = []
        while True:
            t = self.peek(skip_nl=True)
            if t.kind == "eof":
                break
            defs.append(self.definition())
            t = self.peek()
            if t.kind not in ("nl", "eof"):
                self.error(t, "end of line")
        return Ast(tuple(defs))

    def definition(self) -> Definition:
        name = self.next(skip_nl=True)
        if name.kind != "ident":
            self.error(name, "a definition name")
        params: list[str] = []
        if self.peek().text == "(":
            self.next()
            self.depth += 1
            if self.peek().text != ")":
                while True:
                    p = self.next()
                    if p.kind != "ident":
                        self.error(p, "a parameter name")
                    params.append(p.text)
                    if self.peek().text == ",":
                        self.next()
                        continue
                    break
            self.depth -= 1
            self.expect(")", skip_nl=False)
        self.expect("=", skip_nl=False)
        body = self.expr()
        return Definition(name.text, tuple(params), body, (name.line, name.col))

    def expr(self) -> Expr:
        t = self.peek(skip_nl=True)
        if t.kind == "kw" and t.text == "if":
            self.next(skip_nl=True)
            cond = self.expr()
            self.expect("then")
            then = self.expr()
            self.expect("else")
            orelse = self.expr()
            return If(cond, then, orelse, (t.line, t.col))
        return self.binary(0)

    def binary(self, level: int) -> Expr:
        if level == len(_LEVELS):
            return self.unary()
        lhs = self.binary(level + 1)
        while True:
            t = self.peek()
            if t.kind == "op" and t.text in _LEVELS[level]:
                self.next()
                rhs = self.binary(level + 1)
                lhs = BinOp(t.text, lhs, rhs, (t.line, t.col))
            else:
                return lhs

    def unary(self) -> Expr:
        t = self.peek(skip_nl=True)
        if t.kind == "op" and t.text == "-":
            self.next(skip_nl=True)
            return Neg(self.unary(), (t.line, t.col))
        if t.kind == "kw" and t.text == "not":
            self.next(skip_nl=True)
            return Not(self.unary(), (t.line, t.col))
        return self.atom()

    def atom(self) -> Expr:
        t = self.next(skip_nl=True)
        pos = (t.line, t.col)
        if t.kind == "num":
            return Number(float(t.text), pos)
        if t.kind == "ident":
            if self.peek().text == "(" and self.peek().kind == "op":
                self.next()
                self.depth += 1
                args: list[Expr] = []
                if self.peek().text != ")":
                    while True:
                        args.append(self.expr())
                        if self.peek().text == ",":
                            self.next()
                            continue
                        break
                self.depth -= 1
                self.expect(")", skip_nl=False)
                return Apply(t.text, tuple(args), pos)
            return Var(t.text, pos)
        if t.kind == "op" and t.text == "(":
            self.depth += 1
            e = self.expr()
            self.depth -= 1
            self.expect(")", skip_nl=False)
            return e
        if t.kind == "kw" and t.text == "if":
            self.i -= 1
            return self.expr()
        self.error(t, "an expression")


def check(ast: Ast) -> list[Diagnostic]:
    """Scope and arity diagnostics for a parsed program."""
    diags: list[Diagnostic] = []
    arity: dict[str, int] = {}
    for d in ast.definitions:
        if d.name in arity:
            diags.append(Diagnostic("duplicate-definition", f"{d.name!r} is defined twice", *d.pos))
        arity.setdefault(d.name, len(d.params))
        if len(set(d.params)) != len(d.params):
            diags.append(Diagnostic("duplicate-parameter",
                                    f"parameters of {d.name!r} are not unique", *d.pos))

    def walk(e: Expr, scope: set[str]):
        if isinstance(e, Var):
            if e.name not in scope:
                code = "unbound-variable"
                if e.name in arity:
                    msg = f"{e.name!r} is a function; call it as {e.name}(...)"
                    if arity[e.name] == 0:
                        return
                else:
                    msg = f"unbound variable {e.name!r}"
                diags.append(Diagnostic(code, msg, *e.pos))
        elif isinstance(e, Apply):
            if e.name not in arity:
                diags.append(Diagnostic("unbound-function", f"undefined function {e.name!r}", *e.pos))
            elif arity[e.name] != len(e.args):
                diags.append(Diagnostic(
                    "arity-mismatch",
                    f"{e.name!r} takes {arity[e.name]} argument(s), got {len(e.args)}", *e.pos))
            for a in e.args:
                walk(a, scope)
        elif isinstance(e, BinOp):
            walk(e.lhs, scope)
            walk(e.rhs, scope)
        elif isinstance(e, (Neg, Not)):
            walk(e.operand, scope)
        elif isinstance(e, If):
            walk(e.cond, scope)
            walk(e.then, scope)
            walk(e.orelse, scope)

    for d in ast.definitions:
        walk(d.body, set(d.params))
    return diags


def parse(source: str) -> Ast:
    """Parse *source*; raise :class:`FrontendError` on any diagnostic."""
    ast = _Parser(tokenize(source)).program()
    diags = check(ast)
    if diags:
        raise FrontendError(diags)
    return ast

# }}}


# {{{ pretty printer

def _fmt(v: float) -> str:
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def pretty_expr(e: Expr) -> str:
    if isinstance(e, Number):
        return _fmt(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, BinOp):
        return f"({pretty_expr(e.lhs)} {e.op} {pretty_expr(e.rhs)})"
    if isinstance(e, Neg):
        return f"(-{pretty_expr(e.operand)})"
    if isinstance(e, Not):
        return f"(not {pretty_expr(e.operand)})"
    if isinstance(e, If):
        return (f"(if {pretty_expr(e.cond)} then {pretty_expr(e.then)} "
                f"else {pretty_expr(e.orelse)})")
    if isinstance(e, Apply):
        return f"{e.name}({', '.join(pretty_expr(a) for a in e.args)})"
    raise TypeError(e)


def pretty(ast: Ast) -> str:
    lines = []
    for d in ast.definitions:
        head = f"{d.name}({', '.join(d.params)})" if d.params else d.name
        lines.append(f"{head} = {pretty_expr(d.body)}")
    return "\n".join(lines) + "\n"

# }}}


# {{{ lowering

def free_vars(e: Expr) -> list[str]:
    """Variables referenced by *e*, in first-occurrence order."""
    seen: dict[str, None] = {}

    def walk(x: Expr):
        if isinstance(x, Var):
            seen.setdefault(x.name)
        elif isinstance(x, BinOp):
            walk(x.lhs)
            walk(x.rhs)
        elif isinstance(x, (Neg, Not)):
            walk(x.operand)
        elif isinstance(x, If):
            walk(x.cond)
            walk(x.then)
            walk(x.orelse)
        elif isinstance(x, Apply):
            for a in x.args:
                walk(a)

    walk(e)
    return list(seen)


_BINOPS = {"+": "Add", "-": "Sub", "*": "Mul", "/": "Div", "==": "Eq", "<": "Lt"}


@dataclass
class _Src:
    node: str
    port: int = 0
    is_const: bool = False


@dataclass
class _Ctx:
    env: dict[str, _Src]
    # Node whose firing marks "this context is active at tag t"; None only at
    # the top level of the entry graph, where everything runs at the root tag.
    trigger: str | None
    cond: _Src | None = None
    branch: int | None = None
    parent: _Ctx | None = None
    _pivot: str | None = None


class _Lowerer:
    def __init__(self, ast: Ast):
        self.ast = ast
        self.arity = {d.name: len(d.params) for d in ast.definitions}
        self.entry = ast.entry
        self.site_counter: dict[str, int] = {}

    def callee_arity(self, name: str) -> int:
        # zero-parameter helper functions take a hidden unit argument
        a = self.arity[name]
        return a if a or name == self.entry else 1

    def lower(self) -> Program:
        p = Program(entry=self.entry)
        for d in self.ast.definitions:
            p.add(self.lower_def(d))
        return p

    def lower_def(self, d: Definition) -> Graph:
        self.g = g = Graph(d.name, self.callee_arity(d.name))
        self.counter = 0
        env: dict[str, _Src] = {}
        for i in range(g.arity):
            pid = g.add_node(f"arg{i}", param(i))
            if i < len(d.params):
                env[d.params[i]] = _Src(pid)
        trigger = g.params()[0] if g.arity else None
        ctx = _Ctx(env, trigger)
        res = self.materialize(self.expr(d.body, ctx), ctx)
        out = self.fresh("out")
        g.add_node(out, output(0))
        g.connect(res.node, res.port, out, 0)
        return g

    def fresh(self, hint: str) -> str:
        self.counter += 1
        return f"{hint}{self.counter}"

    def pivot(self, ctx: _Ctx) -> str:
        """A single-output node that fires (live or dead) once per activation of ctx."""
        if ctx._pivot is None:
            parent = ctx.parent
            ptrig = self.ctx_trigger(parent)
            if ptrig is None:
                u = self.fresh("unit")
                self.g.add_node(u, const(0.0))
                data = _Src(u, 0, True)
            else:
                data = _Src(ptrig)
            sw = self.emit("Switch", Op("Switch"), [ctx.cond, data], parent)
            piv = self.fresh("pivot")
            self.g.add_node(piv, Op("Identity"))
            self.g.connect(sw, ctx.branch, piv, 0)
            ctx._pivot = piv
        return ctx._pivot

    def ctx_trigger(self, ctx: _Ctx) -> str | None:
        if ctx.trigger is None and ctx.parent is not None:
            ctx.trigger = self.pivot(ctx)
        return ctx.trigger

    def materialize(self, s: _Src, ctx: _Ctx) -> _Src:
        """Gate a bare constant on the context so it fires once per activation."""
        if s.is_const:
            trig = self.ctx_trigger(ctx)
            if trig is not None:
                self.g.connect_control(trig, s.node)
                return _Src(s.node, 0, False)
        return s

    def emit(self, hint: str, op: Op, ins: list[_Src], ctx: _Ctx) -> str:
        n = self.fresh(hint.lower())
        self.g.add_node(n, op)
        for port, s in enumerate(ins):
            self.g.connect(s.node, s.port, n, port)
        if all(s.is_const for s in ins):
            trig = self.ctx_trigger(ctx)
            if trig is not None:
                self.g.connect_control(trig, n)
        return n

    def expr(self, e: Expr, ctx: _Ctx) -> _Src:
        if isinstance(e, Number):
            n = self.fresh("c")
            self.g.add_node(n, const(e.value))
            return _Src(n, 0, True)
        if isinstance(e, Var):
            if e.name in ctx.env:
                return ctx.env[e.name]
            # bare reference to a zero-parameter function
            return self.expr(Apply(e.name, (), e.pos), ctx)
        if isinstance(e, BinOp):
            kind = _BINOPS[e.op]
            a = self.expr(e.lhs, ctx)
            b = self.expr(e.rhs, ctx)
            return _Src(self.emit(kind, Op(kind), [a, b], ctx))
        if isinstance(e, Neg):
            return _Src(self.emit("Neg", Op("Neg"), [self.expr(e.operand, ctx)], ctx))
        if isinstance(e, Not):
            return _Src(self.emit("Not", Op("Not"), [self.expr(e.operand, ctx)], ctx))
        if isinstance(e, Apply):
            args = [self.materialize(self.expr(a, ctx), ctx) for a in e.args]
            if not e.args and self.callee_arity(e.name) == 1:
                u = self.fresh("unit")
                self.g.add_node(u, const(0.0))
                args = [self.materialize(_Src(u, 0, True), ctx)]
            site = self.site_counter.get(e.name, 0)
            self.site_counter[e.name] = site + 1
            n = self.fresh("call")
            self.g.add_node(n, fncall(e.name, site))
            for port, s in enumerate(args):
                self.g.connect(s.node, s.port, n, port)
            return _Src(n)
        if isinstance(e, If):
            cond = self.materialize(self.expr(e.cond, ctx), ctx)
            live = [v for v in free_vars(e.then) + free_vars(e.orelse) if v in ctx.env]
            live = list(dict.fromkeys(live))
            env_t: dict[str, _Src] = {}
            env_f: dict[str, _Src] = {}
            for v in live:
                sw = self.emit("Switch", Op("Switch"), [cond, ctx.env[v]], ctx)
                env_t[v] = _Src(sw, 0)
                env_f[v] = _Src(sw, 1)
            ct = _Ctx(env_t, None, cond, 0, ctx)
            cf = _Ctx(env_f, None, cond, 1, ctx)
            t = self.materialize(self.expr(e.then, ct), ct)
            f = self.materialize(self.expr(e.orelse, cf), cf)
            m = self.fresh("merge")
            self.g.add_node(m, merge(pred=(cond.node, cond.port)))
            self.g.connect(t.node, t.port, m, 0)
            self.g.connect(f.node, f.port, m, 1)
            return _Src(m)
        raise TypeError(e)


def lower(ast: Ast) -> Program:
    """Lower each definition to a named graph with ``FnCall`` nodes."""
    return _Lowerer(ast).lower()


def compile_source(source: str) -> Program:
    return lower(parse(source))

# }}}
