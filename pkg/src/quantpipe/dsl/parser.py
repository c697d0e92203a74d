"""Tokenizer, recursive-descent parser and canonical printer for factor expressions.

Grammar (prefix calls, with infix sugar)::

    expr    := term (("+" | "-") term)*
    term    := factor (("*" | "/") factor)*
    factor  := "-" factor | NUMBER | IDENT | IDENT "(" arglist ")" | "(" expr ")"
    arglist := expr ("," expr)*

Infix operators normalise to ``add``/``sub``/``mul``/``safe_div`` calls. A
minus sign directly in front of a number literal folds into a negative
constant.
"""
from __future__ import annotations

import math
import re
from typing import NamedTuple

from ..errors import (
    ArityError,
    ExprSyntaxError,
    LexError,
    ParameterError,
    UnknownOperatorError,
    WindowError,
)
from .nodes import Call, Const, Expr, Field
from .registry import FRACTION, GROUP, INFIX, MIN_WINDOW, WINDOW, lookup

_TOKEN = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[a-z_][a-z0-9_]*)"
    r"|(?P<punct>[(),+\-*/])"
)
_INT = re.compile(r"\d+$")


class Token(NamedTuple):
    kind: str  # num | ident | punct | eof
    text: str
    offset: int


def tokenize(text: str) -> list[Token]:
    out = []
    pos = 0
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        if mt is None:
            raise LexError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
        kind = mt.lastgroup
        if kind != "ws":
            out.append(Token(kind, mt.group(), _byte_offset(text, pos)))
        pos = mt.end()
    out.append(Token("eof", "", _byte_offset(text, len(text))))
    return out


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind == "eof":
            what = "end of input" if self.tok.kind == "eof" else repr(self.tok.text)
            if text == ")":
                raise ExprSyntaxError(f"unbalanced parenthesis: expected ')' but found {what}", self.tok.offset)
            raise ExprSyntaxError(f"expected {text!r} but found {what}", self.tok.offset)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "eof":
            if self.tok.text == ")":
                raise ExprSyntaxError("unbalanced parenthesis: unexpected ')'", self.tok.offset)
            raise ExprSyntaxError(f"unexpected token {self.tok.text!r}", self.tok.offset)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok.kind == "punct" and self.tok.text in "+-":
            op = INFIX[self.advance().text]
            left = Call(op, (left, self.term()))
        return left

    def term(self) -> Expr:
        left = self.factor()
        while self.tok.kind == "punct" and self.tok.text in "*/":
            op = INFIX[self.advance().text]
            left = Call(op, (left, self.factor()))
        return left

    def factor(self) -> Expr:
        t = self.tok
        if t.kind == "punct" and t.text == "-":
            self.advance()
            if self.tok.kind == "num":
                return Const(-_number(self.advance()))
            return Call("neg", (self.factor(),))
        if t.kind == "num":
            return Const(_number(self.advance()))
        if t.kind == "ident":
            self.advance()
            if self.tok.kind == "punct" and self.tok.text == "(":
                return self.call(t)
            return Field(t.text)
        if t.kind == "punct" and t.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if t.kind == "eof" else repr(t.text)
        raise ExprSyntaxError(f"expected an operand but found {what}", t.offset)

    def call(self, name: Token) -> Expr:
        spec = lookup(name.text)
        if spec is None:
            raise UnknownOperatorError(f"unknown operator {name.text!r}", name.offset)
        self.expect("(")
        items = [self.arg()]
        while self.tok.kind == "punct" and self.tok.text == ",":
            self.advance()
            items.append(self.arg())
        self.expect(")")
        if len(items) != spec.n_slots:
            raise ArityError(
                f"{spec.name} takes {spec.arity} expression argument(s) and "
                f"{len(spec.params)} parameter(s), got {len(items)} item(s)", name.offset)
        args = tuple(node for node, _ in items[:spec.arity])
        params = tuple(_param(kind, node, toks) for kind, (node, toks) in zip(spec.params, items[spec.arity:]))
        return Call(spec.name, args, params)

    def arg(self):
        start = self.i
        node = self.expr()
        return node, self.toks[start:self.i]


def _number(tok: Token) -> float:
    v = float(tok.text)
    if not math.isfinite(v):
        raise LexError(f"number out of range {tok.text!r}", tok.offset)
    return v


def _param(kind: str, node: Expr, toks: list[Token]):
    first = toks[0]
    single = len(toks) == 1
    if kind == WINDOW:
        if not (single and first.kind == "num" and _INT.match(first.text)):
            raise WindowError("window must be an integer literal", first.offset)
        w = int(first.text)
        if w < MIN_WINDOW:
            raise WindowError(f"window must be >= {MIN_WINDOW}, got {w}", first.offset)
        return w
    if kind == FRACTION:
        if not (single and first.kind == "num"):
            raise ParameterError("fraction parameter must be a number literal", first.offset)
        p = float(first.text)
        if not 0.0 <= p < 0.5:
            raise ParameterError(f"fraction must lie in [0, 0.5), got {p}", first.offset)
        return p
    if kind == GROUP:
        if not (single and first.kind == "ident"):
            raise ParameterError("group parameter must be a field name", first.offset)
        return first.text
    raise AssertionError(kind)


def parse(text: str) -> Expr:
    """Parse an expression string into a tree, checking operators, arity and parameters."""
    return _Parser(text).parse()


def to_text(e: Expr) -> str:
    """Canonical text: function-call syntax, ``", "`` separators, unary minus as a prefix."""
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Field):
        return e.name
    if e.op == "neg":
        (child,) = e.args
        if isinstance(child, Const) and not math.copysign(1.0, child.value) < 0:
            return f"-({to_text(child)})"
        return "-" + to_text(child)
    items = [to_text(a) for a in e.args] + [_param_text(p) for p in e.params]
    return f"{e.op}({', '.join(items)})"


def _param_text(p) -> str:
    if isinstance(p, bool):
        raise TypeError(p)
    if isinstance(p, int):
        return str(p)
    if isinstance(p, float):
        return repr(p)
    return p
