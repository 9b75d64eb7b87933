"""Arithmetic expressions over ODE state variables.

Basis functions in a vector field are written as infix text such as
``"V - V^3/3 + R"`` and parsed into a small immutable AST.  The grammar is::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | "+" unary | power
    power  := atom ("^" INTEGER)*
    atom   := NUMBER | NAME | "(" expr ")"

``^`` binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``.  Exponents
must be non-negative integer literals.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Pow",
    "Expr",
    "ExpressionSyntaxError",
    "EvaluationError",
    "parse_expression",
    "evaluate_basis",
    "to_text",
    "to_source",
    "state_indices",
    "Monomial",
    "NonPolynomial",
    "NON_POLYNOMIAL",
    "polynomial_normal_form",
    "evaluate_polynomial",
    "from_polynomial",
]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # zero-based state index
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


Expr = Union[Num, Var, Neg, BinOp, Pow]


class ExpressionSyntaxError(ValueError):
    """Raised for malformed expression text; ``position`` is a 0-based offset."""

    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position} in {text!r}")


class EvaluationError(ArithmeticError):
    """Division by zero while evaluating ``subexpression``."""

    def __init__(self, subexpression: Expr):
        self.subexpression = subexpression
        super().__init__(f"division by zero in {to_text(subexpression)}")


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()])"
    r"|(?P<bad>\S)"
    r")"
)


class _Parser:
    def __init__(self, text: str, state_names: Sequence[str]):
        self.text = text
        self.names = {name: i for i, name in enumerate(state_names)}
        self.tokens: list[tuple[str, str, int]] = []
        for m in _TOKEN.finditer(text):
            kind = m.lastgroup
            if kind is None:
                continue
            value = m.group(kind)
            pos = m.start(kind)
            if kind == "bad":
                raise ExpressionSyntaxError(f"unexpected character {value!r}", text, pos)
            if value == "**":
                raise ExpressionSyntaxError("unsupported operator '**' (use '^')", text, pos)
            self.tokens.append((kind, value, pos))
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, pos: int | None = None):
        if pos is None:
            pos = self.peek()[2]
        raise ExpressionSyntaxError(message, self.text, pos)

    def parse(self) -> Expr:
        node = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            self.error(f"unexpected token {value!r}", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and value == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        node = self.atom()
        while self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            kind, value, pos = self.peek()
            if kind == "op" and value == "-":
                self.error("negative exponent not allowed", pos)
            if kind != "num":
                self.error("exponent must be a non-negative integer literal", pos)
            self.take()
            if not value.isdigit():
                self.error(f"non-integer exponent {value!r}", pos)
            node = Pow(node, int(value))
        return node

    def atom(self) -> Expr:
        kind, value, pos = self.take()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if value not in self.names:
                raise ExpressionSyntaxError(f"unknown identifier {value!r}", self.text, pos)
            return Var(self.names[value], value)
        if kind == "op" and value == "(":
            node = self.expr()
            k, v, p = self.take()
            if v != ")":
                raise ExpressionSyntaxError("expected ')'", self.text, p)
            return node
        if kind == "end":
            self.error("unexpected end of expression", pos)
        self.error(f"unexpected token {value!r}", pos)


def parse_expression(text: str, state_names: Sequence[str]) -> Expr:
    """Parse infix ``text`` with identifiers resolved against ``state_names``."""
    if not text or not text.strip():
        raise ExpressionSyntaxError("empty expression", text or "", 0)
    return _Parser(text, state_names).parse()


# --------------------------------------------------------------------------
# evaluation and printing


def evaluate_basis(expr: Expr, state):
    """Evaluate ``expr`` at ``state``.

    ``state`` is indexed along its last axis, so a 1-D vector gives a scalar and
    an ``(n, s)`` array gives ``n`` values.  Division by an exact zero raises
    :class:`EvaluationError`.
    """
    x = np.asarray(state, dtype=float)
    return _eval(expr, x)


def _eval(expr: Expr, x: np.ndarray):
    if isinstance(expr, Num):
        return expr.value if x.ndim <= 1 else np.full(x.shape[:-1], expr.value)
    if isinstance(expr, Var):
        return x[..., expr.index]
    if isinstance(expr, Neg):
        return -_eval(expr.operand, x)
    if isinstance(expr, Pow):
        return _eval(expr.base, x) ** expr.exponent
    left = _eval(expr.left, x)
    right = _eval(expr.right, x)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    if np.any(np.asarray(right) == 0):
        raise EvaluationError(expr)
    return left / right


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def to_text(expr: Expr) -> str:
    """Render ``expr`` back to parseable infix text (fully parenthesized)."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_text(expr.operand)})"
    if isinstance(expr, Pow):
        base = to_text(expr.base)
        if not isinstance(expr.base, (Var,)) and not base.startswith("("):
            base = f"({base})"
        return f"{base}^{expr.exponent}"
    return f"({to_text(expr.left)} {expr.op} {to_text(expr.right)})"


def to_source(expr: Expr, state: str = "x") -> str:
    """Python source for ``expr`` reading states as ``state[i]``."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return f"{state}[{expr.index}]"
    if isinstance(expr, Neg):
        return f"(-{to_source(expr.operand, state)})"
    if isinstance(expr, Pow):
        if expr.exponent == 0:
            return "1.0"
        base = to_source(expr.base, state)
        return "(" + "*".join([f"({base})"] * expr.exponent) + ")"
    return f"({to_source(expr.left, state)} {expr.op} {to_source(expr.right, state)})"


def state_indices(expr: Expr) -> frozenset[int]:
    """Indices of states referenced anywhere in ``expr``."""
    if isinstance(expr, Var):
        return frozenset({expr.index})
    if isinstance(expr, Num):
        return frozenset()
    if isinstance(expr, Neg):
        return state_indices(expr.operand)
    if isinstance(expr, Pow):
        return state_indices(expr.base)
    return state_indices(expr.left) | state_indices(expr.right)


# --------------------------------------------------------------------------
# polynomial normal form


@dataclass(frozen=True)
class Monomial:
    coefficient: float
    degrees: tuple[int, ...]


class NonPolynomial:
    """Marker returned when an expression divides by a state-dependent term."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NonPolynomial"


NON_POLYNOMIAL = NonPolynomial()

_Poly = dict  # degrees tuple -> coefficient


def _poly_add(p: _Poly, q: _Poly, scale: float = 1.0) -> _Poly:
    out = dict(p)
    for deg, c in q.items():
        out[deg] = out.get(deg, 0.0) + scale * c
    return out


def _poly_mul(p: _Poly, q: _Poly) -> _Poly:
    out: _Poly = {}
    for d1, c1 in p.items():
        for d2, c2 in q.items():
            deg = tuple(a + b for a, b in zip(d1, d2))
            out[deg] = out.get(deg, 0.0) + c1 * c2
    return out


def _expand(expr: Expr, s: int) -> _Poly | None:
    zero = (0,) * s
    if isinstance(expr, Num):
        return {zero: expr.value}
    if isinstance(expr, Var):
        deg = [0] * s
        deg[expr.index] = 1
        return {tuple(deg): 1.0}
    if isinstance(expr, Neg):
        inner = _expand(expr.operand, s)
        return None if inner is None else {d: -c for d, c in inner.items()}
    if isinstance(expr, Pow):
        base = _expand(expr.base, s)
        if base is None:
            return None
        out = {zero: 1.0}
        for _ in range(expr.exponent):
            out = _poly_mul(out, base)
        return out
    left = _expand(expr.left, s)
    right = _expand(expr.right, s)
    if left is None or right is None:
        return None
    if expr.op == "+":
        return _poly_add(left, right)
    if expr.op == "-":
        return _poly_add(left, right, -1.0)
    if expr.op == "*":
        return _poly_mul(left, right)
    nonzero = {d: c for d, c in right.items() if c != 0.0}
    if set(nonzero) - {zero} or not nonzero:
        return None
    divisor = nonzero[zero]
    return {d: c / divisor for d, c in left.items()}


def _canonical(poly: _Poly) -> tuple[Monomial, ...]:
    terms = [Monomial(c, d) for d, c in poly.items() if c != 0.0]
    # graded: total degree first, then higher powers of earlier states first
    terms.sort(key=lambda m: (sum(m.degrees), tuple(-d for d in m.degrees)))
    return tuple(terms)


def polynomial_normal_form(expr: Expr, n_states: int | None = None):
    """Expand ``expr`` into canonical monomials, or return ``NON_POLYNOMIAL``.

    Monomials are ordered by total degree and then by state index; like terms
    are combined and zero coefficients dropped.
    """
    if n_states is None:
        idx = state_indices(expr)
        n_states = max(idx) + 1 if idx else 1
    poly = _expand(expr, n_states)
    if poly is None:
        return NON_POLYNOMIAL
    return _canonical(poly)


def evaluate_polynomial(monomials: Sequence[Monomial], state):
    x = np.asarray(state, dtype=float)
    total = np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0
    for m in monomials:
        term = m.coefficient
        for i, d in enumerate(m.degrees):
            if d:
                term = term * x[..., i] ** d
        total = total + term
    return total


def from_polynomial(monomials: Sequence[Monomial], state_names: Sequence[str]) -> Expr:
    """Build an expression tree equivalent to a monomial list."""
    node: Expr | None = None
    for m in monomials:
        factors: Expr | None = None
        for i, d in enumerate(m.degrees):
            if d == 0:
                continue
            f: Expr = Var(i, state_names[i])
            if d > 1:
                f = Pow(f, d)
            factors = f if factors is None else BinOp("*", factors, f)
        if factors is None:
            term: Expr = Num(m.coefficient)
        elif m.coefficient == 1.0:
            term = factors
        else:
            term = BinOp("*", Num(m.coefficient), factors)
        node = term if node is None else BinOp("+", node, term)
    return node if node is not None else Num(0.0)
