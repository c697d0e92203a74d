"""Hypothesis strategies for expression trees (independent of the miner's generator)."""
from hypothesis import strategies as st

from quantpipe.dsl import REGISTRY, Call, Const, Field
from quantpipe.dsl.registry import FRACTION, GROUP, WINDOW

SERIES_FIELDS = ("close", "volume")
GROUP_FIELDS = ("sector",)


def _param(kind, groups):
    if kind == WINDOW:
        return st.integers(2, 6)
    if kind == FRACTION:
        return st.sampled_from([0.0, 0.01, 0.05, 0.1, 0.25])
    return st.sampled_from(groups)


def exprs(fields=SERIES_FIELDS, groups=GROUP_FIELDS, max_leaves=12, constants=None):
    """Random valid trees; ``groups=()`` drops the group operators."""
    const = constants if constants is not None else st.floats(-1e6, 1e6, allow_nan=False).map(Const)
    leaves = st.one_of(st.sampled_from(fields).map(Field), const)
    ops = [s for s in REGISTRY.values() if groups or GROUP not in s.params]

    def extend(children):
        calls = []
        for spec in ops:
            calls.append(st.builds(
                lambda args, params, name=spec.name: Call(name, tuple(args), tuple(params)),
                st.lists(children, min_size=spec.arity, max_size=spec.arity),
                st.tuples(*[_param(k, groups) for k in spec.params])))
        return st.one_of(calls)

    return st.recursive(leaves, extend, max_leaves=max_leaves)
