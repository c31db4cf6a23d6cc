"""Recursive programs as static tagged dataflow graphs.

Pipeline: :func:`frontend.parse` -> :func:`frontend.lower` (one graph per
function, calls as ``FnCall``) -> :func:`transform.eliminate_recursion` (one
fixed graph with ``Call``/``Return`` tagging) -> :func:`engine.run`.
"""

from .autodiff import grad_program
from .distsim import partition, run_distributed
from .engine import DEAD, ROOT, Tag, run, run_dynamic
from .frontend import compile_source, lower, parse
from .interpreter import evaluate
from .transform import eliminate_recursion

__all__ = [
    "DEAD", "ROOT", "Tag", "compile_source", "eliminate_recursion", "evaluate",
    "grad_program", "lower", "parse", "partition", "run", "run_distributed", "run_dynamic",
]
