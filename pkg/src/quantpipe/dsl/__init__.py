"""Symbolic factor expressions: parse, print, validate, evaluate."""
from .evaluate import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_MAX_NODES,
    check_caps,
    evaluate,
    is_valid,
    required_fields,
)
from .matrix import FactorMatrix
from .nodes import Call, Const, Expr, Field, depth, size, walk
from .parser import parse, to_text, tokenize
from .registry import REGISTRY, OpSpec

__all__ = [
    "Call", "Const", "Expr", "Field", "FactorMatrix", "OpSpec", "REGISTRY",
    "DEFAULT_MAX_DEPTH", "DEFAULT_MAX_NODES",
    "check_caps", "depth", "evaluate", "is_valid", "parse", "required_fields",
    "size", "to_text", "tokenize", "walk",
]
