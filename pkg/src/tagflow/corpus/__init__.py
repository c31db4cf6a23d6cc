"""Example programs written in the surface language."""

from __future__ import annotations

from importlib import resources

from ..frontend import Apply, Ast, Definition, Number, parse

#: Functions with a smooth enough body for finite-difference checks, with the
#: index of the argument to differentiate and a sampler range for it.
DIFFERENTIABLE = {
    "pow": ("pow", [0], (0.5, 2.0)),
    "geom": ("geom", [0], (-0.9, 0.9)),
    "poly": ("poly", [0], (-2.0, 2.0)),
    "rational": ("rational", [0], (-3.0, 3.0)),
    "piecewise": ("piecewise", [0], (-2.0, 2.0)),
    "risefact": ("rise", [0], (0.1, 3.0)),
    "mutual": ("even", [0], (0.5, 2.0)),
    "newton": ("newton", [0], (0.5, 9.0)),
    "smooth": ("smooth", [0, 1], (-1.5, 1.5)),
    "nested": ("nested", [0, 1], (0.1, 2.5)),
}


def names() -> list[str]:
    return sorted(p.name[:-3] for p in resources.files(__name__).iterdir() if p.name.endswith(".df"))


def source(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.df").read_text()


def load(name: str) -> Ast:
    return parse(source(name))


def with_entry(ast: Ast, fn: str, args) -> Ast:
    """Replace the ``result`` definition by ``result = fn(args)``."""
    defs = tuple(d for d in ast.definitions if d.name != "result")
    call = Apply(fn, tuple(Number(float(a)) for a in args))
    return Ast((Definition("result", (), call),) + defs)


def default_call(ast: Ast) -> tuple[str, list[float]]:
    """Function name and evaluated arguments of ``result = fn(args)``."""
    from ..interpreter import Interpreter

    d = ast.get("result")
    if d is None or not isinstance(d.body, Apply):
        raise ValueError("result is not a single call")
    it = Interpreter(ast)
    return d.body.name, [float(it.eval(a, {})) for a in d.body.args]
