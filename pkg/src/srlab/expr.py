"""Expression trees over named columns, with parsing, formatting,
IEEE-double evaluation, and an additive complexity measure.

An expression is an immutable tree whose leaves are real constants,
integer constants, or variables, and whose inner nodes apply a named
building block (operator or function).  Evaluation tracks an explicit
"invalid" state for out-of-real-domain applications: invalid propagates
through every operation (including multiplication by zero and raising
to the zeroth power) and is only mapped to NaN at the public boundary.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ExpressionError(ValueError):
    """Raised for malformed expressions or evaluation contract violations."""


class ParseError(ExpressionError):
    """Syntax or name error while parsing expression text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------

REAL = "real"
INT = "int"
VAR = "var"
CALL = "call"
SLOT = "slot"


@dataclass(frozen=True)
class Expression:
    """One node of an expression tree.

    kind is one of 'real', 'int', 'var', 'call', 'slot'.  Constants carry
    `value`; variables carry `name`; calls carry the block name plus
    children; slots carry a 1-based `index` and their argument variables
    as children.
    """

    kind: str
    name: str = ""
    value: float | int = 0
    index: int = 0
    children: tuple["Expression", ...] = ()
    _hash: int = field(init=False, repr=False, compare=False, default=0)

    def __post_init__(self):
        h = hash((self.kind, self.name, self.value, self.index, self.children))
        object.__setattr__(self, "_hash", h)

    def __hash__(self) -> int:
        return self._hash

    @property
    def is_constant(self) -> bool:
        return self.kind in (REAL, INT)


def real(value: float) -> Expression:
    value = float(value)
    if not math.isfinite(value):
        raise ExpressionError("constants must be finite")
    return Expression(REAL, value=value)


def integer(value: int) -> Expression:
    return Expression(INT, value=int(value))


def var(name: str) -> Expression:
    return Expression(VAR, name=name)


def call(block: str, *children: Expression) -> Expression:
    return Expression(CALL, name=block, children=tuple(children))


def slot(index: int, args: Sequence[str]) -> Expression:
    return Expression(SLOT, name=f"f{index}", index=index,
                      children=tuple(var(a) for a in args))


def node_count(e: Expression) -> int:
    # iterative: left-leaning chains get deeper than the recursion limit
    total = 0
    stack = [e]
    while stack:
        n = stack.pop()
        total += 1
        stack.extend(n.children)
    return total


def depth(e: Expression) -> int:
    best = 1
    stack = [(e, 1)]
    while stack:
        n, d = stack.pop()
        if d > best:
            best = d
        for c in n.children:
            stack.append((c, d + 1))
    return best


def variables(e: Expression) -> set[str]:
    if e.kind == VAR:
        return {e.name}
    out: set[str] = set()
    for c in e.children:
        out |= variables(c)
    return out


def contains_slot(e: Expression) -> bool:
    if e.kind == SLOT:
        return True
    return any(contains_slot(c) for c in e.children)


def substitute_slots(e: Expression, contents: Mapping[int, Expression]) -> Expression:
    """Replace each slot node by the expression given for its index."""
    if e.kind == SLOT:
        try:
            return contents[e.index]
        except KeyError:
            raise ExpressionError(f"no content for slot f{e.index}") from None
    if not e.children:
        return e
    return Expression(e.kind, name=e.name, value=e.value, index=e.index,
                      children=tuple(substitute_slots(c, contents) for c in e.children))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BuildingBlock:
    """A named operator/function with arity, complexity weight, numpy
    implementation, and an optional real-domain predicate returning the
    mask of argument points where the application is defined."""

    name: str
    arity: int
    weight: int
    func: Callable[..., np.ndarray]
    domain: Callable[..., np.ndarray] | None = None


def _dom_sqrt(a):
    return a >= 0.0


def _dom_log(a):
    return a > 0.0


def _dom_unit(a):
    return (a >= -1.0) & (a <= 1.0)


def _dom_divide(a, b):
    return b != 0.0


def _dom_pow(a, b):
    with np.errstate(invalid="ignore"):
        integral = b == np.round(b)
    return (a > 0.0) | ((a == 0.0) & (b >= 0.0)) | ((a < 0.0) & integral)


def _pow(a, b):
    # uniform small integer exponents run as binary multiplication chains:
    # sign-exact (so odd powers stay bitwise odd-symmetric), and the same
    # repeated-multiplication reading the complexity model prices
    b = np.asarray(b, dtype=float)
    k = float(b.flat[0]) if b.size else math.nan
    if math.isfinite(k) and k == int(k) and abs(k) <= 64 and np.all(b == k):
        out = _int_pow(np.asarray(a, dtype=float), abs(int(k)))
        if k < 0:
            with np.errstate(divide="ignore", over="ignore"):
                out = 1.0 / out
        return out
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        return np.power(a, b)


def _int_pow(a, k: int):
    if k == 0:
        return np.ones_like(a)
    acc = None
    sq = a
    while k:
        if k & 1:
            acc = sq if acc is None else acc * sq
        k >>= 1
        if k:
            sq = sq * sq
    return acc


CATALOG: dict[str, BuildingBlock] = {}


def _register(name, arity, weight, func, domain=None):
    CATALOG[name] = BuildingBlock(name, arity, weight, func, domain)


_register("add", 2, 1, np.add)
_register("subtract", 2, 1, np.subtract)
_register("multiply", 2, 1, np.multiply)
_register("divide", 2, 1, np.divide, _dom_divide)
_register("negate", 1, 1, np.negative)
_register("sin", 1, 3, np.sin)
_register("cos", 1, 3, np.cos)
_register("abs", 1, 3, np.abs)
_register("sqrt", 1, 3, np.sqrt, _dom_sqrt)
_register("floor", 1, 3, np.floor)
_register("exp", 1, 3, np.exp)
_register("log", 1, 3, np.log, _dom_log)
_register("asin", 1, 3, np.arcsin, _dom_unit)
_register("acos", 1, 3, np.arccos, _dom_unit)
_register("atan", 1, 3, np.arctan)
_register("max", 2, 2, np.maximum)
_register("min", 2, 2, np.minimum)
_register("atan2", 2, 2, np.arctan2)
_register("pow", 2, 2, _pow, _dom_pow)

#: infix operator spellings accepted by the parser
_OPERATOR_BLOCKS = {"+": "add", "-": "subtract", "*": "multiply", "/": "divide"}

#: weights for the leaf kinds, alongside the block weights above
DEFAULT_PROFILE: dict[str, int] = {name: b.weight for name, b in CATALOG.items()}
DEFAULT_PROFILE["variable"] = 1
DEFAULT_PROFILE["constant"] = 1


def complexity_profile(overrides: Mapping[str, int] | None = None) -> dict[str, int]:
    """Default per-block weights, optionally overridden per name."""
    profile = dict(DEFAULT_PROFILE)
    if overrides:
        for name, w in overrides.items():
            if name not in profile:
                raise ExpressionError(f"unknown block in weight overrides: {name!r}")
            profile[name] = int(w)
    return profile


def complexity(e: Expression, profile: Mapping[str, int] | None = None) -> int:
    """Additive size measure: sum of block weights over the tree.

    pow with an integer exponent k >= 2 is costed as the repeated product
    it abbreviates: (k - 1) multiplications plus k copies of the base.
    """
    p = profile if profile is not None else DEFAULT_PROFILE
    return _complexity(e, p)


def _complexity(e: Expression, p: Mapping[str, int]) -> int:
    if e.kind in (REAL, INT):
        return p["constant"]
    if e.kind == VAR:
        return p["variable"]
    if e.kind == SLOT:
        raise ExpressionError("complexity of a template slot is undefined; fill it first")
    if e.name == "pow" and e.children[1].kind == INT:
        k = int(e.children[1].value)
        if k >= 2:
            return (k - 1) * p["multiply"] + k * _complexity(e.children[0], p)
        if k == 1:
            return _complexity(e.children[0], p)
        if k == 0:
            return p["constant"]
    if e.name not in p:
        raise ExpressionError(f"unknown block: {e.name!r}")
    return p[e.name] + sum(_complexity(c, p) for c in e.children)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _eval(e: Expression, cols: Mapping[str, np.ndarray], n: int):
    """Return (values, invalid_mask) for every row."""
    if e.kind in (REAL, INT):
        return np.full(n, float(e.value)), np.zeros(n, dtype=bool)
    if e.kind == VAR:
        try:
            return cols[e.name], np.zeros(n, dtype=bool)
        except KeyError:
            known = ", ".join(sorted(cols)) or "(none)"
            raise ExpressionError(
                f"unbound variable {e.name!r}; known columns: {known}") from None
    if e.kind == SLOT:
        raise ExpressionError("cannot evaluate a template slot; fill it first")
    block = CATALOG.get(e.name)
    if block is None:
        raise ExpressionError(f"unknown block: {e.name!r}")
    parts = [_eval(c, cols, n) for c in e.children]
    vals = [p[0] for p in parts]
    bad = parts[0][1].copy()
    for _, b in parts[1:]:
        bad |= b
    if block.domain is not None:
        with np.errstate(invalid="ignore"):
            ok = block.domain(*vals)
        bad |= ~ok
    with np.errstate(all="ignore"):
        out = block.func(*vals)
    out = np.asarray(out, dtype=float)
    if bad.any():
        out = np.where(bad, np.nan, out)
    return out, bad


def evaluate_batch(e: Expression, data: Mapping[str, np.ndarray] | "object"):
    """Evaluate over columns; returns (values, valid).

    valid is False when any row is invalid or non-finite.  Invalid rows
    hold NaN in the returned values.
    """
    cols = _as_columns(data)
    n = len(next(iter(cols.values()))) if cols else 1
    vals, bad = _eval(e, cols, n)
    valid = not bad.any() and bool(np.isfinite(vals).all())
    return vals, valid


def evaluate(e: Expression, row: Mapping[str, float]) -> float:
    """Evaluate at one point; invalid applications yield NaN."""
    cols = {k: np.asarray([float(v)]) for k, v in row.items()}
    vals, _ = _eval(e, cols, 1)
    return float(vals[0])


def _as_columns(data) -> dict[str, np.ndarray]:
    if hasattr(data, "as_dict"):
        return data.as_dict()
    return {k: np.asarray(v, dtype=float) for k, v in dict(data).items()}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
  | (?P<space>\s+)
""", re.VERBOSE)

_SLOT_NAME = re.compile(r"^f(\d*)$", re.IGNORECASE)
_INT_LITERAL = re.compile(r"^\d+$")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "space":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, variables, allow_slots: bool):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = None if variables is None else set(variables)
        self.allow_slots = allow_slots

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value:
            raise ParseError(f"expected {value!r}, found {text or 'end of input'!r}", pos)
        return self.next()

    def parse(self) -> Expression:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {text!r}", pos)
        return e

    def expr(self) -> Expression:
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            e = call(_OPERATOR_BLOCKS[op], e, self.term())
        return e

    def term(self) -> Expression:
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            e = call(_OPERATOR_BLOCKS[op], e, self.unary())
        return e

    def unary(self) -> Expression:
        if self.peek()[1] == "-":
            self.next()
            return call("negate", self.unary())
        return self.power()

    def power(self) -> Expression:
        e = self.atom()
        if self.peek()[1] == "^":
            self.next()
            # '^' binds tighter than unary minus; right-associative
            return call("pow", e, self.unary())
        return e

    def atom(self) -> Expression:
        kind, text, pos = self.next()
        if kind == "number":
            if _INT_LITERAL.match(text):
                return integer(int(text))
            return real(float(text))
        if kind == "ident":
            if self.peek()[1] == "(":
                return self.application(text, pos)
            if self.variables is not None and text not in self.variables:
                known = ", ".join(sorted(self.variables)) or "(none)"
                raise ParseError(f"unknown variable {text!r}; known: {known}", pos)
            return var(text)
        if text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {text or 'end of input'!r}", pos)

    def application(self, name: str, pos: int) -> Expression:
        self.expect("(")
        args = []
        if self.peek()[1] != ")":
            args.append(self.expr())
            while self.peek()[1] == ",":
                self.next()
                args.append(self.expr())
        self.expect(")")
        lname = name.lower()
        m = _SLOT_NAME.match(name)
        if self.allow_slots and m is not None:
            index = int(m.group(1)) if m.group(1) else 1
            for a in args:
                if a.kind != VAR:
                    raise ParseError(
                        f"slot {name} arguments must be plain column names", pos)
            return Expression(SLOT, name=f"f{index}", index=index, children=tuple(args))
        block = CATALOG.get(lname)
        if block is None:
            raise ParseError(f"unknown function {name!r}", pos)
        if len(args) != block.arity:
            raise ParseError(
                f"{lname} takes {block.arity} argument(s), got {len(args)}", pos)
        return call(lname, *args)


def parse(text: str, variables: Iterable[str] | None = None, *,
          allow_slots: bool = False) -> Expression:
    """Parse infix text into an expression tree.

    Function names are case-insensitive; `^` denotes powers and binds
    tighter than unary minus.  When `variables` is given, bare names
    outside it are rejected.  Slot applications f(...), f1(...), ... are
    accepted only with allow_slots.
    """
    return _Parser(text, variables, allow_slots).parse()


# ---------------------------------------------------------------------------
# formatting
# ---------------------------------------------------------------------------

_PREC_ADD = 1
_PREC_MUL = 2
_PREC_NEG = 3
_PREC_POW = 4
_PREC_ATOM = 5

_INFIX = {"add": ("+", _PREC_ADD), "subtract": ("-", _PREC_ADD),
          "multiply": ("*", _PREC_MUL), "divide": ("/", _PREC_MUL)}


def format_expression(e: Expression, digits: int = 17) -> str:
    """Render to parseable infix text with constants shown at the given
    number of significant digits (display rounding only)."""
    if not 1 <= int(digits) <= 17:
        raise ExpressionError("digits must be in 1..17")
    text, _ = _format(e, int(digits))
    return text


def format_real(value: float, digits: int) -> str:
    """One real constant at N significant digits; keeps a decimal marker
    so the text re-parses as a real constant."""
    text = "%.*g" % (digits, value)
    if _INT_LITERAL.match(text.lstrip("-")):
        text += ".0"
    return text


def _format(e: Expression, digits: int):
    if e.kind == INT:
        v = int(e.value)
        return str(v), (_PREC_ATOM if v >= 0 else _PREC_NEG)
    if e.kind == REAL:
        text = format_real(float(e.value), digits)
        return text, (_PREC_ATOM if not text.startswith("-") else _PREC_NEG)
    if e.kind == VAR:
        return e.name, _PREC_ATOM
    if e.kind == SLOT:
        args = ", ".join(c.name for c in e.children)
        return f"{e.name}({args})", _PREC_ATOM
    if e.name == "negate":
        inner, prec = _format(e.children[0], digits)
        if prec < _PREC_NEG:
            inner = f"({inner})"
        return "-" + inner, _PREC_NEG
    if e.name == "pow":
        base, bprec = _format(e.children[0], digits)
        if bprec < _PREC_ATOM:
            base = f"({base})"
        expo, eprec = _format(e.children[1], digits)
        if eprec < _PREC_ATOM:
            expo = f"({expo})"
        return f"{base}^{expo}", _PREC_POW
    if e.name in _INFIX:
        sym, prec = _INFIX[e.name]
        left, lp = _format(e.children[0], digits)
        if lp < prec:
            left = f"({left})"
        right, rp = _format(e.children[1], digits)
        if rp <= prec:
            right = f"({right})"
        return f"{left}{sym}{right}", prec
    args = ", ".join(_format(c, digits)[0] for c in e.children)
    return f"{e.name}({args})", _PREC_ATOM
