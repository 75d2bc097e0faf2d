"""Small arithmetic expression language for drift and diffusion components.

Grammar (``^`` is right associative and binds tighter than unary minus)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | NAME | NAME "(" expr ")" | "norm" "(" "x" ")" | "(" expr ")"

Expressions evaluate on numpy arrays, one row per point. There are no
conditionals: piecewise fields belong in the builtin registry.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ArityMismatch, DSLSyntaxError, EvaluationError, UnknownIdentifier

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    index: int


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


@dataclass(frozen=True)
class Norm:
    """Euclidean norm of the whole state vector."""


Node = Union[Num, Var, Neg, BinOp, Call, Norm]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            start = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise DSLSyntaxError(
                f"unexpected character {source[start]!r}", _byte_offset(source, start),
                ("number", "identifier", "operator"),
            )
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), _byte_offset(source, m.start(kind))))
        pos = m.end()
    tokens.append(("end", "", _byte_offset(source, len(source))))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: Sequence[str], allow_norm: bool):
        self.tokens = _tokenize(source)
        self.i = 0
        self.variables = {name: k for k, name in enumerate(variables)}
        self.allow_norm = allow_norm

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, value, offset = self.take()
        if value != text or kind == "end":
            found = "end of input" if kind == "end" else repr(value)
            raise DSLSyntaxError(f"found {found}", offset, (repr(text),))

    def parse(self) -> Node:
        node = self.expr()
        kind, value, offset = self.peek()
        if kind != "end":
            raise DSLSyntaxError(f"unexpected {value!r}", offset, ("operator", "end of input"))
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and value == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, value, offset = self.take()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if value == "norm":
                if not self.allow_norm:
                    raise UnknownIdentifier(value, offset)
                self.expect("(")
                k2, v2, o2 = self.take()
                if v2 != "x":
                    raise ArityMismatch(f"norm takes the state vector 'x' (byte offset {o2})")
                self.expect(")")
                return Norm()
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                if self.peek()[1] == ",":
                    raise ArityMismatch(f"{value} takes exactly one argument (byte offset {offset})")
                self.expect(")")
                return Call(value, arg)
            if value in self.variables:
                return Var(value, self.variables[value])
            raise UnknownIdentifier(value, offset)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(value)
        raise DSLSyntaxError(f"found {found}", offset, ("number", "identifier", "'('", "'-'"))


def state_variables(d: int) -> tuple[str, ...]:
    return tuple(f"x{k + 1}" for k in range(d))


def parse_expression(source: str, variables: Sequence[str], allow_norm: bool = True) -> Node:
    """Parse one expression over the given variable names."""
    return _Parser(source, variables, allow_norm).parse()


def to_source(node: Node) -> str:
    """Print ``node`` so that ``parse_expression(to_source(node))`` gives it back."""
    if isinstance(node, Num):
        text = repr(float(node.value))
        return text if node.value >= 0 else f"({text})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Norm):
        return "norm(x)"
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    return f"({to_source(node.left)} {node.op} {to_source(node.right)})"


def _check(result: np.ndarray, bad: np.ndarray, what: str) -> np.ndarray:
    if np.any(bad):
        raise EvaluationError(f"{what} is undefined at {int(np.count_nonzero(bad))} point(s)")
    if not np.all(np.isfinite(result)):
        raise EvaluationError(f"{what} overflowed to a non-finite value")
    return result


def evaluate(node: Node, X: np.ndarray) -> np.ndarray:
    """Evaluate on ``X`` of shape ``(n, d)``; returns shape ``(n,)``."""
    X = np.asarray(X, dtype=float)
    with np.errstate(all="ignore"):
        return _eval(node, X)


def _eval(node: Node, X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    if isinstance(node, Num):
        return np.full(n, node.value)
    if isinstance(node, Var):
        return X[:, node.index].copy()
    if isinstance(node, Norm):
        return np.sqrt(np.sum(X * X, axis=1))
    if isinstance(node, Neg):
        return -_eval(node.operand, X)
    if isinstance(node, Call):
        a = _eval(node.arg, X)
        if node.func == "log":
            return _check(np.log(np.where(a > 0, a, 1.0)), a <= 0, "log")
        if node.func == "sqrt":
            return _check(np.sqrt(np.where(a >= 0, a, 0.0)), a < 0, "sqrt")
        return _check(getattr(np, node.func)(a), np.zeros(n, bool), node.func)
    a = _eval(node.left, X)
    b = _eval(node.right, X)
    if node.op == "+":
        return _check(a + b, np.zeros(n, bool), "+")
    if node.op == "-":
        return _check(a - b, np.zeros(n, bool), "-")
    if node.op == "*":
        return _check(a * b, np.zeros(n, bool), "*")
    if node.op == "/":
        return _check(a / np.where(b == 0, 1.0, b), b == 0, "division")
    # power: negative base needs an integer exponent, zero base a non-negative one
    bad = ((a < 0) & (b != np.round(b))) | ((a == 0) & (b < 0))
    return _check(np.power(np.where(bad, 1.0, a), b), bad, "power")


def evaluate_scalar(node: Node, x: Sequence[float]) -> float:
    return float(evaluate(node, np.asarray(x, dtype=float)[None, :])[0])


def is_constant(node: Node) -> bool:
    if isinstance(node, Num):
        return True
    if isinstance(node, (Var, Norm)):
        return False
    if isinstance(node, Neg):
        return is_constant(node.operand)
    if isinstance(node, Call):
        return is_constant(node.arg)
    return is_constant(node.left) and is_constant(node.right)


def split_components(source: str | Sequence[str]) -> list[str]:
    """Split ``"e1, e2"`` at top-level commas; lists pass through unchanged."""
    if not isinstance(source, str):
        return [str(s) for s in source]
    parts, depth, start = [], 0, 0
    for k, ch in enumerate(source):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(source[start:k])
            start = k + 1
    parts.append(source[start:])
    return [p.strip() for p in parts]


def literal(value: float) -> str:
    """Source text for a numeric literal, negative values included."""
    if not math.isfinite(value):
        raise ValueError("literals must be finite")
    return repr(float(value)) if value >= 0 else f"(-{repr(-float(value))})"
