"""Arithmetic expressions over named parameters.

Transition probabilities of a parametric model are written as small
arithmetic expressions, e.g. ``"p"``, ``"1 - p"`` or ``"(1 - q) / 3"``.
The grammar is::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := number | ident | '(' expr ')'

with the usual precedence.  A subtraction whose left operand is the
literal ``1`` is stored as a dedicated complement node so that ``1 - p``
and ``1-(p)`` are structurally identical.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

__all__ = [
    "ExprSyntaxError",
    "Expr",
    "Num",
    "Param",
    "BinOp",
    "OneMinus",
    "parse_expr",
]


class ExprSyntaxError(ValueError):
    """Raised for malformed expressions; ``pos`` is the 0-based offset."""

    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos} in {text!r}")
        self.text = text
        self.pos = pos


class Expr:
    def evaluate(self, values: Mapping[str, float]) -> float:
        raise NotImplementedError

    def params(self) -> frozenset[str]:
        raise NotImplementedError

    def is_constant(self) -> bool:
        return not self.params()


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def evaluate(self, values):
        return self.value

    def params(self):
        return frozenset()

    def __str__(self):
        return repr(self.value) if not float(self.value).is_integer() else str(int(self.value))


@dataclass(frozen=True)
class Param(Expr):
    name: str

    def evaluate(self, values):
        return float(values[self.name])

    def params(self):
        return frozenset([self.name])

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class OneMinus(Expr):
    arg: Expr

    def evaluate(self, values):
        return 1.0 - self.arg.evaluate(values)

    def params(self):
        return self.arg.params()

    def __str__(self):
        inner = str(self.arg)
        if isinstance(self.arg, OneMinus) or (isinstance(self.arg, BinOp) and self.arg.op in "+-"):
            inner = f"({inner})"
        return f"1 - {inner}"


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, values):
        a = self.left.evaluate(values)
        b = self.right.evaluate(values)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b if b != 0 else math.nan

    def params(self):
        return self.left.params() | self.right.params()

    def __str__(self):
        def wrap(e, right_side):
            s = str(e)
            if isinstance(e, OneMinus):
                return f"({s})"
            if isinstance(e, BinOp):
                p, q = _PREC[e.op], _PREC[self.op]
                if p < q or (right_side and p == q):
                    return f"({s})"
            return s

        return f"{wrap(self.left, False)} {self.op} {wrap(self.right, True)}"


_TOKEN = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?|([A-Za-z_][A-Za-z_0-9]*)|(.))")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break
        start = m.start(m.lastindex) if m.lastindex else m.end()
        if m.group(1) is not None:
            tokens.append(("num", m.group(0).strip(), start))
        elif m.group(2) is not None:
            tokens.append(("id", m.group(2), start))
        elif m.group(3) is not None:
            ch = m.group(3)
            if ch not in "+-*/()":
                raise ExprSyntaxError(f"unexpected character {ch!r}", text, start)
            tokens.append(("op", ch, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            rhs = self.term()
            if op == "-" and isinstance(node, Num) and node.value == 1.0:
                node = OneMinus(rhs)
            else:
                node = BinOp(op, node, rhs)
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "id":
            return Param(val)
        if (kind, val) == ("op", "("):
            node = self.expr()
            kind, val, pos = self.take()
            if (kind, val) != ("op", ")"):
                raise ExprSyntaxError("expected ')'", self.text, pos)
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", self.text, pos)


def parse_expr(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    >>> str(parse_expr("1-(p)"))
    '1 - p'
    >>> parse_expr("p * (1 - q)").evaluate({"p": 0.5, "q": 0.2})
    0.4
    """
    parser = _Parser(text)
    node = parser.expr()
    kind, val, pos = parser.peek()
    if kind != "end":
        raise ExprSyntaxError(f"unexpected {val!r}", text, pos)
    return node
