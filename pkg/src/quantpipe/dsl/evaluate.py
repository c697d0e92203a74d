"""Evaluation of expression trees against a panel."""
from __future__ import annotations

import numpy as np

from ..errors import DepthExceededError, FieldNotFoundError, UnknownOperatorError
from ..panel import PanelFrame
from .matrix import FactorMatrix
from .nodes import Call, Const, Expr, Field, depth, size
from .ops import Surface
from .registry import GROUP, REGISTRY

DEFAULT_MAX_DEPTH = 8
DEFAULT_MAX_NODES = 64


def required_fields(e: Expr) -> set[str]:
    """Panel fields an expression reads: meta leaves plus group parameters."""
    out: set[str] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Field):
            out.add(n.name)
        elif isinstance(n, Call):
            spec = REGISTRY[n.op]
            out.update(p for kind, p in zip(spec.params, n.params) if kind == GROUP)
            stack.extend(n.args)
    return out


def check_caps(e: Expr, max_depth: int = DEFAULT_MAX_DEPTH, max_nodes: int = DEFAULT_MAX_NODES) -> None:
    d = depth(e)
    if d > max_depth:
        raise DepthExceededError(f"expression depth {d} exceeds cap {max_depth}")
    s = size(e)
    if s > max_nodes:
        raise DepthExceededError(f"expression has {s} nodes, cap is {max_nodes}")


def is_valid(e: Expr, max_depth: int = DEFAULT_MAX_DEPTH, max_nodes: int = DEFAULT_MAX_NODES) -> bool:
    """Structural validity: registered operators, matching arity/params, caps respected."""
    if depth(e) > max_depth or size(e) > max_nodes:
        return False
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Call):
            spec = REGISTRY.get(n.op)
            if spec is None or len(n.args) != spec.arity or len(n.params) != len(spec.params):
                return False
            for kind, p in zip(spec.params, n.params):
                if kind == "window" and not (isinstance(p, int) and p >= 2):
                    return False
                if kind == "fraction" and not (isinstance(p, float) and 0 <= p < 0.5):
                    return False
                if kind == GROUP and not isinstance(p, str):
                    return False
            stack.extend(n.args)
        elif isinstance(n, Const):
            if not np.isfinite(n.value):
                return False
        elif not isinstance(n, Field):
            return False
    return True


def evaluate(e: Expr, panel: PanelFrame, max_depth: int = DEFAULT_MAX_DEPTH) -> FactorMatrix:
    """Evaluate ``e`` over ``panel``; each date's output reads only that date and earlier."""
    d = depth(e)
    if d > max_depth:
        raise DepthExceededError(f"expression depth {d} exceeds cap {max_depth}")
    missing = required_fields(e) - set(panel.fields)
    if missing:
        raise FieldNotFoundError(f"unknown field(s): {', '.join(sorted(missing))}")
    cache: dict = {}
    s = _eval(e, panel, cache)
    return FactorMatrix(panel.dates, panel.instruments, s.v, s.m)


def _eval(e: Expr, panel: PanelFrame, cache: dict) -> Surface:
    hit = cache.get(e)
    if hit is not None:
        return hit
    if isinstance(e, Const):
        T, N, _ = panel.shape
        out = Surface(np.full((T, N), float(e.value)), np.ones((T, N), dtype=bool))
    elif isinstance(e, Field):
        v, m = panel.field(e.name)
        out = Surface(v, m)
    else:
        spec = REGISTRY.get(e.op)
        if spec is None:
            raise UnknownOperatorError(f"unknown operator {e.op!r}")
        args = [_eval(a, panel, cache) for a in e.args]
        params = []
        for kind, p in zip(spec.params, e.params):
            if kind == GROUP:
                v, m = panel.field(p)
                params.append(Surface(v, m))
            else:
                params.append(p)
        out = spec.fn(*args, *params)
    cache[e] = out
    return out
