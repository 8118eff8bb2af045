"""Deterministic expression rewrites: canonical form, angle folding,
nested-multiplication (Horner) layout, and display rounding.

The canonical form flattens sums and products, folds numeric
sub-expressions (with exact integer arithmetic on integer subtrees),
expands products/integer powers of sums under a growth guard, collects
similar terms and factors, and orders everything by a graded structural
key so equal trees always print identically.  Numerators and
denominators are canonicalized separately; quotients are never combined
over common denominators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .expr import (
    CALL, INT, REAL, SLOT, VAR,
    Expression, ExpressionError,
    call, complexity, evaluate_batch, integer, node_count, parse, real,
    variables,
)

#: expansion guard: a product/power of sums is expanded only when the
#: expanded tree has at most this many times the nodes of the original
EXPANSION_GROWTH_LIMIT = 4

#: hard ceiling on the term count an expansion trial may produce; without
#: it the relative guard re-baselines each normalization round and growth
#: compounds across rounds
EXPANSION_TERM_LIMIT = 48

#: additive angle offsets inside sin/cos smaller than this snap to zero
ANGLE_SNAP = 1e-9

_MAX_EXACT_INT = 2**53


class NotPolynomialError(ExpressionError):
    """Raised when an expression cannot be laid out as a polynomial in
    the requested variables."""


@dataclass(frozen=True)
class RewriteReport:
    original: Expression
    result: Expression
    rules: tuple[str, ...]
    complexity_before: int
    complexity_after: int


class _Ctx:
    def __init__(self, allowed=None, expand_limit=EXPANSION_GROWTH_LIMIT):
        self.allowed = None if allowed is None else frozenset(allowed)
        self.expand_limit = expand_limit
        self.term_limit = None if math.isinf(expand_limit) else EXPANSION_TERM_LIMIT
        self.rules: set[str] = set()

    def allow(self, name: str) -> bool:
        return self.allowed is None or name in self.allowed

    def fire(self, rule: str):
        self.rules.add(rule)


# ---------------------------------------------------------------------------
# numeric coefficients: int when exact, float otherwise
# ---------------------------------------------------------------------------

class _NonFiniteFold(Exception):
    """Constant folding left the float range; keep the tree un-normalized."""


def _safe_float(x):
    try:
        return float(x)
    except OverflowError:
        return math.inf if x > 0 else -math.inf


def _cadd(a, b):
    if isinstance(a, int) and isinstance(b, int):
        c = a + b
        return c if abs(c) <= _MAX_EXACT_INT else _safe_float(c)
    return _safe_float(a) + _safe_float(b)


def _cmul(a, b):
    if isinstance(a, int) and isinstance(b, int):
        c = a * b
        return c if abs(c) <= _MAX_EXACT_INT else _safe_float(c)
    return _safe_float(a) * _safe_float(b)


def _cdiv(a, b):
    if isinstance(a, int) and isinstance(b, int) and b != 0 and a % b == 0:
        return a // b
    fa, fb = _safe_float(a), _safe_float(b)
    if fb == 0.0:
        if fa == 0.0 or math.isnan(fa):
            return math.nan
        same = (fa > 0.0) == (math.copysign(1.0, fb) > 0.0)
        return math.inf if same else -math.inf
    return fa / fb


def _cpow(a, k: int):
    if isinstance(a, int) and a == 1:
        return 1
    if isinstance(a, int) and a == -1:
        return 1 if k % 2 == 0 else -1
    if isinstance(a, int) and k >= 0:
        # exact only while it stays cheap; giant powers go through floats
        if a == 0 or k * abs(a).bit_length() <= 64:
            c = a**k
            return c if abs(c) <= _MAX_EXACT_INT else _safe_float(c)
        a = _safe_float(a)
    fa = _safe_float(a)
    if fa == 0.0 and k < 0:
        return math.inf
    try:
        return fa**k
    except OverflowError:
        return math.inf if fa > 0.0 or k % 2 == 0 else -math.inf


def _const_node(c) -> Expression:
    if isinstance(c, int):
        return integer(c)
    if not math.isfinite(c):
        raise _NonFiniteFold
    return real(c)


# ---------------------------------------------------------------------------
# structural ordering
# ---------------------------------------------------------------------------

def _key(e: Expression):
    if e.kind == VAR:
        return (0, e.name, 0.0, ())
    if e.kind in (REAL, INT):
        return (1, "", _safe_float(e.value), ())
    if e.kind == SLOT:
        return (2, e.name, 0.0, tuple(_key(c) for c in e.children))
    return (3, e.name, 0.0, tuple(_key(c) for c in e.children))


def _deg(factors) -> int:
    return sum(max(k, 0) for _, k in factors)


def _term_key(factors):
    # graded: higher total degree first, then the structural keys
    return (-_deg(factors), tuple((_key(b), -k) for b, k in factors))


def _sorted_factors(fdict: dict) -> tuple:
    return tuple(sorted(((b, k) for b, k in fdict.items() if k != 0),
                        key=lambda p: _key(p[0])))


# ---------------------------------------------------------------------------
# normal form: {factor tuple -> numeric coefficient}
# ---------------------------------------------------------------------------

def _sum_add(a: dict, b: dict, ctx: _Ctx) -> dict:
    out = dict(a)
    for k, c in b.items():
        if k in out:
            ctx.fire("collect-terms")
            out[k] = _cadd(out[k], c)
        else:
            out[k] = c
    return {k: c for k, c in out.items() if c != 0}


def _sum_neg(a: dict) -> dict:
    return {k: _cmul(-1, c) for k, c in a.items()}


def _term_mul(fa, ca, fb, cb, ctx: _Ctx):
    fd = dict(fa)
    for base, k in fb:
        if base in fd:
            ctx.fire("collect-factors")
            fd[base] = fd[base] + k
        else:
            fd[base] = k
    return _sorted_factors(fd), _cmul(ca, cb)


def _cross(a: dict, b: dict, ctx: _Ctx) -> dict:
    out: dict = {}
    for fa, ca in a.items():
        for fb, cb in b.items():
            f, c = _term_mul(fa, ca, fb, cb, ctx)
            if f in out:
                ctx.fire("collect-terms")
                out[f] = _cadd(out[f], c)
            else:
                out[f] = c
    return {k: c for k, c in out.items() if c != 0}


def _atom_term(e: Expression) -> dict:
    return {((e, 1),): 1}


def _sum_mul(e: Expression, a: dict, b: dict, ctx: _Ctx) -> dict:
    if len(a) <= 1 and len(b) <= 1:
        return _cross(a, b, ctx)
    if ctx.term_limit is None or len(a) * len(b) <= ctx.term_limit:
        trial_ctx = _Ctx(ctx.allowed, ctx.expand_limit)
        trial = _cross(a, b, trial_ctx)
        before = node_count(e)
        if node_count(_rebuild(trial, trial_ctx)) <= ctx.expand_limit * before:
            ctx.rules |= trial_ctx.rules
            ctx.fire("expand-product")
            return trial
    # growth guard refused: keep the product opaque over canonical parts
    fa = _atom_factors(a, ctx)
    fb = _atom_factors(b, ctx)
    return _cross(fa, fb, ctx)


def _atom_factors(s: dict, ctx: _Ctx) -> dict:
    """A SumMap wrapped into a single opaque factor (sums stay intact)."""
    if len(s) <= 1:
        return s
    return _atom_term(_rebuild(s, ctx))


def _sum_div(e: Expression, a: dict, b: dict, ctx: _Ctx) -> dict:
    if not b:
        # denominator canonicalizes to exact zero: keep the quotient opaque
        return _atom_term(call("divide", _rebuild(a, ctx), integer(0)))
    if not a:
        return {}
    if len(b) == 1:
        (fb, cb), = b.items()
        if cb == 0:
            return _atom_term(call("divide", _rebuild(a, ctx), _rebuild(b, ctx)))
        if len(a) == 1 or not fb:
            # constant denominators (and single-term numerators) divide
            # term by term; sums are never duplicated across a quotient
            if len(a) > 1:
                ctx.fire("expand-quotient")
            out: dict = {}
            for fa, ca in a.items():
                fd = dict(fa)
                for base, k in fb:
                    if base in fd:
                        ctx.fire("collect-factors")
                    fd[base] = fd.get(base, 0) - k
                f = _sorted_factors(fd)
                c = _cdiv(ca, cb)
                out[f] = _cadd(out[f], c) if f in out else c
            return {k: c for k, c in out.items() if c != 0}
        num = _rebuild(a, ctx)
        fd = {num: 1}
        for base, k in fb:
            if base == num:
                ctx.fire("collect-factors")
            fd[base] = fd.get(base, 0) - k
        c = _cdiv(1, cb)
        return {_sorted_factors(fd): c} if c != 0 else {}
    den = _rebuild(b, ctx)
    if len(a) == 1:
        (fa, ca), = a.items()
        fd = dict(fa)
        if den in fd:
            ctx.fire("collect-factors")
        fd[den] = fd.get(den, 0) - 1
        return {_sorted_factors(fd): ca}
    num = _rebuild(a, ctx)
    if num == den:
        ctx.fire("cancel-quotient")
        return {(): 1}
    return {_sorted_factors({num: 1, den: -1}): 1}


def _sum_pow(e: Expression, ctx: _Ctx) -> dict:
    base, expo = e.children
    bsum = _tosum(base, ctx)
    ecanon = _canon_fix(expo, ctx)
    if ecanon.kind == INT:
        k = int(ecanon.value)
        if expo.kind != INT and k >= 2:
            # the exponent folded to an integer: the power now prices
            # as the repeated multiplication it stands for
            ctx.fire("expand-power")
        if k == 0:
            ctx.fire("unit-exponent")
            return {(): 1}
        if k == 1:
            ctx.fire("unit-exponent")
            return bsum
        if not bsum:
            if k > 0:
                return {}
            return _atom_term(call("pow", integer(0), ecanon))
        if k <= -1:
            # negative powers stay opaque: the repeated-multiplication
            # costing would reprice them if pushed into a denominator
            return _atom_term(call("pow", _rebuild(bsum, ctx), ecanon))
        if len(bsum) == 1:
            # a single-term base distributes the exponent over its factors
            (fb, cb), = bsum.items()
            f = {b: ek * k for b, ek in fb}
            c = _cpow(cb, k)
            return {_sorted_factors(f): c} if c != 0 else {}
        lim = ctx.term_limit
        if k >= 2 and (lim is None or (k <= lim and len(bsum) <= lim)):
            trial_ctx = _Ctx(ctx.allowed, ctx.expand_limit)
            trial: dict | None = dict(bsum)
            for _ in range(k - 1):
                trial = _cross(trial, bsum, trial_ctx)
                if lim is not None and len(trial) > lim:
                    trial = None
                    break
            if trial is not None and node_count(_rebuild(trial, trial_ctx)) \
                    <= ctx.expand_limit * node_count(e):
                ctx.rules |= trial_ctx.rules
                ctx.fire("expand-power")
                return trial
        return {((_rebuild(bsum, ctx), k),): 1}
    return _atom_term(call("pow", _rebuild(bsum, ctx), ecanon))


def _fold_call(e: Expression, kids, ctx: _Ctx):
    """Numeric folding of an all-constant application; None when the
    application is invalid or non-finite (left unfolded)."""
    if not kids or not all(c.is_constant for c in kids):
        return None
    if all(c.kind == INT for c in kids):
        ints = [int(c.value) for c in kids]
        exact = None
        if e.name == "abs":
            exact = abs(ints[0])
        elif e.name == "floor":
            exact = ints[0]
        elif e.name == "negate":
            exact = -ints[0]
        elif e.name == "max":
            exact = max(ints)
        elif e.name == "min":
            exact = min(ints)
        if exact is not None and abs(exact) <= _MAX_EXACT_INT:
            ctx.fire("fold-numeric")
            return {(): exact} if exact != 0 else {}
    vals, ok = evaluate_batch(Expression(CALL, name=e.name, children=tuple(kids)), {})
    if not ok:
        return None
    v = float(vals[0])
    ctx.fire("fold-numeric")
    if v == 0:
        return {}
    if e.name == "floor" and abs(v) <= _MAX_EXACT_INT:
        return {(): int(v)}
    return {(): v}


def _tosum(e: Expression, ctx: _Ctx) -> dict:
    if e.kind == INT:
        return {(): int(e.value)} if e.value != 0 else {}
    if e.kind == REAL:
        return {(): float(e.value)} if e.value != 0 else {}
    if e.kind == VAR or e.kind == SLOT:
        return _atom_term(e)
    name = e.name
    if name == "add":
        return _sum_add(_tosum(e.children[0], ctx), _tosum(e.children[1], ctx), ctx)
    if name == "subtract":
        return _sum_add(_tosum(e.children[0], ctx),
                        _sum_neg(_tosum(e.children[1], ctx)), ctx)
    if name == "negate":
        return _sum_neg(_tosum(e.children[0], ctx))
    if name == "multiply":
        return _sum_mul(e, _tosum(e.children[0], ctx), _tosum(e.children[1], ctx), ctx)
    if name == "divide":
        return _sum_div(e, _tosum(e.children[0], ctx), _tosum(e.children[1], ctx), ctx)
    if name == "pow":
        return _sum_pow(e, ctx)
    kids = [_canon_fix(c, ctx) for c in e.children]
    folded = _fold_call(e, kids, ctx)
    if folded is not None:
        return folded
    if name == "abs" and kids[0].kind == CALL and kids[0].name == "abs":
        ctx.fire("abs-idempotent")
        kids = [kids[0].children[0]]
    return _atom_term(Expression(CALL, name=name, children=tuple(kids)))


# ---------------------------------------------------------------------------
# rebuilding expressions from the normal form
# ---------------------------------------------------------------------------

def _chain(op: str, parts: Sequence[Expression]) -> Expression:
    acc = parts[0]
    for p in parts[1:]:
        acc = call(op, acc, p)
    return acc


def _factor_expr(base: Expression, k: int, ctx: _Ctx) -> Expression:
    if k == 1:
        return base
    if ctx.allow("pow"):
        return call("pow", base, integer(k))
    return _chain("multiply", [base] * k)


def _product_expr(parts: list[Expression], ctx: _Ctx) -> Expression:
    if not parts:
        return integer(1)
    if len(parts) == 1:
        return parts[0]
    if ctx.allow("multiply"):
        return _chain("multiply", parts)
    raise ExpressionError("cannot express a product: 'multiply' is not enabled")


def _negated(e: Expression, ctx: _Ctx) -> Expression:
    if ctx.allow("negate"):
        return call("negate", e)
    if ctx.allow("multiply"):
        return call("multiply", integer(-1), e)
    if ctx.allow("subtract"):
        return call("subtract", integer(0), e)
    raise ExpressionError("cannot express a negation with the enabled blocks")


def _term_expr(factors, coeff, ctx: _Ctx, *, signed: bool):
    """Build one term.

    signed=True builds the term with its sign included; signed=False
    builds the magnitude and returns (expression, sign_was_negative) so
    the caller can emit a subtraction.
    """
    neg = coeff < 0
    mag = _cmul(-1, coeff) if neg else coeff
    num = [(b, k) for b, k in factors if k > 0]
    den = [(b, k) for b, k in factors if k < 0]
    if not num and not den:
        return _const_node(coeff if signed else mag), neg
    nparts = [_factor_expr(b, k, ctx) for b, k in num]
    wrap = False
    const_part: Expression | None = None
    if neg and signed:
        if mag != 1:
            const_part = _const_node(coeff)
        elif den and not num:
            # the sign rides on the numerator constant for free
            const_part = _const_node(coeff)
        else:
            wrap = True
    elif mag != 1:
        const_part = _const_node(mag)
    if const_part is not None and nparts and not den and not ctx.allow("multiply") \
            and isinstance(mag, int):
        # repeated addition stands in for an integer coefficient
        expr = _chain("add", [_product_expr(nparts, ctx)] * int(mag))
        if neg and signed:
            expr = _negated(expr, ctx)
        return expr, neg
    parts = ([const_part] if const_part is not None else []) + nparts
    if not parts:
        parts = [integer(1)]
    expr = _product_expr(parts, ctx)
    if den:
        if not ctx.allow("divide"):
            raise ExpressionError("cannot express a quotient: 'divide' is not enabled")
        dparts = [_factor_expr(b, -k, ctx) for b, k in den]
        expr = call("divide", expr, _product_expr(dparts, ctx))
    if wrap:
        expr = _negated(expr, ctx)
    return expr, neg


def _rebuild(sm: dict, ctx: _Ctx) -> Expression:
    items = [(f, c) for f, c in sm.items() if c != 0]
    if not items:
        return integer(0)
    items.sort(key=lambda p: _term_key(p[0]))
    if items[0][1] < 0:
        # lead with the first term whose sign costs nothing: positive,
        # bare constant, coefficient != +-1, or a pure reciprocal whose
        # numerator constant can carry the sign
        for i, (f, c) in enumerate(items):
            if c > 0 or not f or c not in (1, -1) \
                    or all(k < 0 for _, k in f):
                items.insert(0, items.pop(i))
                break
    first_f, first_c = items[0]
    acc, _ = _term_expr(first_f, first_c, ctx, signed=True)
    for f, c in items[1:]:
        expr, neg = _term_expr(f, c, ctx, signed=False)
        if neg and ctx.allow("subtract"):
            acc = call("subtract", acc, expr)
        elif ctx.allow("add"):
            if neg:
                expr, _ = _term_expr(f, c, ctx, signed=True)
            acc = call("add", acc, expr)
        elif ctx.allow("subtract"):
            flipped, _ = _term_expr(f, _cmul(-1, c), ctx, signed=True)
            acc = call("subtract", acc, flipped)
        else:
            raise ExpressionError("cannot express a sum with the enabled blocks")
    return acc


def _canon_fix(e: Expression, ctx: _Ctx) -> Expression:
    # folding past the float range leaves the tree as-is; such candidates
    # evaluate as invalid anyway, the form just must be stable
    cur = e
    for _ in range(12):
        try:
            nxt = _rebuild(_tosum(cur, ctx), ctx)
        except _NonFiniteFold:
            return cur
        if nxt == cur:
            return cur
        cur = nxt
    return cur


def canonicalize(e: Expression, allowed: Iterable[str] | None = None) -> Expression:
    """Rewrite to the deterministic canonical form (a fixed point: applying
    canonicalize twice returns the same tree).  When `allowed` is given,
    the rebuilt tree only uses those block names."""
    return _canon_fix(e, _Ctx(allowed))


def expand(e: Expression) -> Expression:
    """Canonical form with the expansion growth guard lifted: products
    and integer powers of sums are always multiplied out."""
    return _canon_fix(e, _Ctx(None, expand_limit=math.inf))


def canonicalize_report(e: Expression,
                        allowed: Iterable[str] | None = None) -> RewriteReport:
    ctx = _Ctx(allowed)
    out = _canon_fix(e, ctx)
    if out != e:
        ctx.fire("normal-form")
    return RewriteReport(e, out, tuple(sorted(ctx.rules)),
                         complexity(e), complexity(out))


def canonically_equal(a: Expression, b: Expression) -> bool:
    """Structural equality of canonical forms, with integer-valued real
    constants considered equal to the same integer constant."""
    return _value_norm(canonicalize(a)) == _value_norm(canonicalize(b))


def _value_norm(e: Expression) -> Expression:
    if e.kind == REAL and float(e.value).is_integer() and abs(e.value) <= _MAX_EXACT_INT:
        return integer(int(e.value))
    if not e.children:
        return e
    return Expression(e.kind, name=e.name, value=e.value, index=e.index,
                      children=tuple(_value_norm(c) for c in e.children))


# ---------------------------------------------------------------------------
# angle folding
# ---------------------------------------------------------------------------

_TWO_PI = 2.0 * math.pi


def _wrap_angle(c: float) -> float:
    k = round(c / _TWO_PI)
    c2 = c - k * _TWO_PI
    if c2 <= -math.pi:
        c2 += _TWO_PI
    elif c2 > math.pi:
        c2 -= _TWO_PI
    return c2


def fold_angle(e: Expression) -> Expression:
    """Reduce additive constants inside sin/cos into (-pi, pi], snapping
    offsets below 1e-9 to zero, and normalize argument sign using
    sin(-u) = -sin(u), cos(-u) = cos(u)."""
    if not e.children:
        return e
    kids = tuple(fold_angle(c) for c in e.children)
    node = Expression(e.kind, name=e.name, value=e.value, index=e.index, children=kids)
    if e.kind != CALL or e.name not in ("sin", "cos"):
        return node
    ctx = _Ctx(None)
    sm = _tosum(_canon_fix(kids[0], ctx), ctx)
    c = sm.get(())
    if c is not None and abs(_safe_float(c)) <= _MAX_EXACT_INT:
        c2 = _wrap_angle(float(c))
        if abs(c2) < ANGLE_SNAP:
            sm = {k: v for k, v in sm.items() if k != ()}
        elif c2 != float(c):
            sm = dict(sm)
            sm[()] = c2
    flip = False
    items = sorted(((f, c) for f, c in sm.items() if c != 0),
                   key=lambda p: _term_key(p[0]))
    if items and items[0][1] < 0:
        flip = True
        sm = _sum_neg(dict(items))
    arg = _rebuild(sm, ctx)
    out = call(e.name, arg)
    if flip and e.name == "sin":
        return call("negate", out)
    return out


# ---------------------------------------------------------------------------
# nested-multiplication layout
# ---------------------------------------------------------------------------

def hornerize(e: Expression, order: Sequence[str | Expression]) -> Expression:
    """Lay the expression out as nested multiplications, treating the
    entries of `order` (outermost first) as the polynomial variables.
    Entries may be column names or expression texts (matched as whole
    subtrees).  Raises NotPolynomialError when the expression is not a
    polynomial in them."""
    if not order:
        raise ExpressionError("need at least one variable to nest by")
    atoms = [parse(a) if isinstance(a, str) else a for a in order]
    atoms = [canonicalize(a) for a in atoms]
    if len(set(atoms)) != len(atoms):
        raise ExpressionError("duplicate entries in the nesting order")
    ctx = _Ctx(None, expand_limit=math.inf)
    sm = _tosum(e, ctx)
    if not sm:
        return integer(0)
    avars = set()
    for a in atoms:
        avars |= variables(a)
    index = {a: i for i, a in enumerate(atoms)}
    poly: dict[tuple[int, ...], dict] = {}
    for factors, coeff in sm.items():
        exps = [0] * len(atoms)
        rest = {}
        for base, k in factors:
            if base in index:
                if k < 0:
                    raise NotPolynomialError(
                        f"negative power of {base.name or 'entry'} present")
                exps[index[base]] = k
            else:
                if variables(base) & avars:
                    raise NotPolynomialError(
                        "not a polynomial in the requested variables: "
                        f"a factor still contains {sorted(variables(base) & avars)}")
                rest[base] = k
        key = tuple(exps)
        bucket = poly.setdefault(key, {})
        f = _sorted_factors(rest)
        bucket[f] = _cadd(bucket[f], coeff) if f in bucket else coeff
    return _hbuild(poly, atoms, 0, ctx)


def _hbuild(poly: dict, atoms, li: int, ctx: _Ctx) -> Expression:
    if li == len(atoms):
        merged: dict = {}
        for exps, sm in poly.items():
            for f, c in sm.items():
                merged[f] = _cadd(merged[f], c) if f in merged else c
        return _rebuild(merged, ctx)
    groups: dict[int, dict] = {}
    for exps, sm in poly.items():
        sub = groups.setdefault(exps[li], {})
        key = exps
        if key in sub:
            for f, c in sm.items():
                sub[key][f] = _cadd(sub[key][f], c) if f in sub[key] else c
        else:
            sub[key] = dict(sm)
    es = sorted(groups)
    coefs = {ee: _hbuild(groups[ee], atoms, li + 1, ctx) for ee in es}
    atom = atoms[li]
    acc = coefs[es[-1]]
    for j in range(len(es) - 2, -1, -1):
        gap = es[j + 1] - es[j]
        part, negated = _hchain(atom, gap, acc, absorb_sign=True)
        op = "subtract" if negated else "add"
        acc = call(op, coefs[es[j]], part)
    if es[0] > 0:
        part, negated = _hchain(atom, es[0], acc, absorb_sign=False)
        acc = call("negate", part) if negated else part
    return acc


def _hchain(atom: Expression, count: int, tail: Expression, *,
            absorb_sign: bool):
    """Chain `count` copies of the atom against the tail coefficient.
    Unit coefficients vanish; with absorb_sign the enclosing sum takes a
    negative tail's sign (assembling with a subtraction), otherwise only
    unit negatives lift out (as a negation the caller must keep)."""
    negated = False
    stripped: Expression | None = tail
    if tail.kind in (REAL, INT):
        v = float(tail.value)
        if v == 1.0:
            stripped = None
        elif v == -1.0:
            stripped, negated = None, True
        elif v < 0 and absorb_sign:
            stripped = _const_node(_cmul(-1, tail.value if tail.kind == INT else v))
            negated = True
    elif absorb_sign and tail.kind == CALL and tail.name == "negate":
        stripped, negated = tail.children[0], True
    parts = [atom] * count + ([stripped] if stripped is not None else [])
    return _chain("multiply", parts), negated


# ---------------------------------------------------------------------------
# display rounding
# ---------------------------------------------------------------------------

def round_for_display(e: Expression, digits: int,
                      data: Mapping[str, np.ndarray] | None = None) -> Expression:
    """Round constants for presentation.

    Without data, every real constant is rounded to `digits` significant
    digits.  With data, the expression is canonicalized and each
    top-level term's coefficient keeps fewer digits the less that term
    contributes: base digits minus floor(log10(dominant max contribution
    / term max contribution)); terms whose digit budget reaches zero (or
    whose coefficient rounds to zero) are dropped.
    """
    if not 1 <= int(digits) <= 17:
        raise ExpressionError("digits must be in 1..17")
    digits = int(digits)
    if data is None:
        return _round_tree(e, digits)
    ctx = _Ctx(None)
    sm = _tosum(_canon_fix(e, ctx), ctx)
    if not sm:
        return integer(0)
    contribs = {}
    for f, c in sm.items():
        vals, _ = evaluate_batch(_rebuild({f: c}, ctx), data)
        with np.errstate(all="ignore"):
            m = np.nanmax(np.abs(vals)) if np.isfinite(vals).any() else 0.0
        contribs[f] = float(m)
    dominant = max(contribs.values())
    if dominant == 0.0:
        return _round_tree(_rebuild(sm, ctx), digits)
    out = {}
    for f, c in sm.items():
        if contribs[f] == 0.0:
            continue
        reduction = int(math.floor(math.log10(dominant / contribs[f])))
        dk = digits - reduction
        if contribs[f] < dominant:
            dk = min(dk, digits - 1)
        if dk <= 0:
            continue
        c2 = _round_coeff(c, min(dk, 17))
        if c2 == 0:
            continue
        out[f] = c2
    return _rebuild(out, ctx)


def _round_coeff(c, digits: int):
    if isinstance(c, int):
        return c
    v = float("%.*g" % (digits, float(c)))
    if v.is_integer() and abs(v) <= _MAX_EXACT_INT:
        return int(v)
    return v


def _round_tree(e: Expression, digits: int) -> Expression:
    if e.kind == REAL:
        v = float("%.*g" % (digits, float(e.value)))
        if v.is_integer() and abs(v) <= _MAX_EXACT_INT:
            return integer(int(v))
        return real(v)
    if not e.children:
        return e
    return Expression(e.kind, name=e.name, value=e.value, index=e.index,
                      children=tuple(_round_tree(c, digits) for c in e.children))
