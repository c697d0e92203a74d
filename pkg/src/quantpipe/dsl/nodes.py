"""Expression tree node types."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Field:
    name: str


@dataclass(frozen=True)
class Call:
    """Operator application: ``op(*args, *params)``.

    ``args`` are sub-expressions; ``params`` are the operator's literal
    parameters (window length, clip fraction, group field name).
    """

    op: str
    args: tuple["Expr", ...]
    params: tuple[Union[int, float, str], ...] = ()


Expr = Union[Const, Field, Call]


def depth(e: Expr) -> int:
    if isinstance(e, Call):
        return 1 + max((depth(a) for a in e.args), default=0)
    return 1


def size(e: Expr) -> int:
    if isinstance(e, Call):
        return 1 + sum(size(a) for a in e.args)
    return 1


def walk(e: Expr) -> Iterator[tuple[tuple[int, ...], Expr]]:
    """Pre-order traversal yielding ``(path, node)``; a path is a tuple of child indices."""
    stack = [((), e)]
    while stack:
        path, node = stack.pop()
        yield path, node
        if isinstance(node, Call):
            for k in range(len(node.args) - 1, -1, -1):
                stack.append((path + (k,), node.args[k]))


def get_at(e: Expr, path: tuple[int, ...]) -> Expr:
    for k in path:
        e = e.args[k]  # type: ignore[union-attr]
    return e


def replace_at(e: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    if not path:
        return new
    assert isinstance(e, Call)
    k = path[0]
    args = list(e.args)
    args[k] = replace_at(args[k], path[1:], new)
    return Call(e.op, tuple(args), e.params)


def depth_at(path: tuple[int, ...]) -> int:
    """1-based depth of the node at ``path``."""
    return len(path) + 1
