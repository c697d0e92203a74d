"""Operator registry: name -> category, arity, parameter kinds, implementation."""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable

from . import ops

WINDOW = "window"
FRACTION = "fraction"
GROUP = "group"

MIN_WINDOW = 2


@dataclass(frozen=True)
class OpSpec:
    name: str
    category: str  # elementwise | timeseries | cross_sectional | group | postprocess
    arity: int
    params: tuple[str, ...]
    fn: Callable

    @property
    def n_slots(self) -> int:
        return self.arity + len(self.params)


def _specs():
    E, TS, CS, G, PP = "elementwise", "timeseries", "cross_sectional", "group", "postprocess"
    yield OpSpec("neg", E, 1, (), ops.neg)
    yield OpSpec("abs", E, 1, (), ops.abs_)
    yield OpSpec("sign", E, 1, (), ops.sign)
    yield OpSpec("safe_sqrt", E, 1, (), ops.safe_sqrt)
    yield OpSpec("safe_log", E, 1, (), ops.safe_log)
    yield OpSpec("add", E, 2, (), ops.add)
    yield OpSpec("sub", E, 2, (), ops.sub)
    yield OpSpec("mul", E, 2, (), ops.mul)
    yield OpSpec("safe_div", E, 2, (), ops.safe_div)
    yield OpSpec("ts_mean", TS, 1, (WINDOW,), ops.ts_mean)
    yield OpSpec("ts_std", TS, 1, (WINDOW,), ops.ts_std)
    yield OpSpec("ts_delta", TS, 1, (WINDOW,), ops.ts_delta)
    yield OpSpec("ts_rank", TS, 1, (WINDOW,), ops.ts_rank)
    yield OpSpec("ts_max", TS, 1, (WINDOW,), ops.ts_max)
    yield OpSpec("ts_min", TS, 1, (WINDOW,), ops.ts_min)
    yield OpSpec("ts_corr", TS, 2, (WINDOW,), ops.ts_corr)
    yield OpSpec("decay_linear", TS, 1, (WINDOW,), ops.decay_linear)
    yield OpSpec("rank", CS, 1, (), ops.rank)
    yield OpSpec("zscore", CS, 1, (), ops.zscore)
    yield OpSpec("group_rank", G, 1, (GROUP,), ops.group_rank)
    yield OpSpec("group_demean", G, 1, (GROUP,), ops.group_demean)
    yield OpSpec("winsorize", PP, 1, (FRACTION,), ops.winsorize)
    yield OpSpec("neutralize", PP, 1, (GROUP,), ops.neutralize)


REGISTRY = MappingProxyType({s.name: s for s in _specs()})

# infix sugar accepted by the parser
INFIX = {"+": "add", "-": "sub", "*": "mul", "/": "safe_div"}


def lookup(name: str) -> OpSpec | None:
    return REGISTRY.get(name)
