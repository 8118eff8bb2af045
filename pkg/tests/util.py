"""Shared helpers for the test suite: ulp distance, random expression
trees, and reference data expressions."""
from __future__ import annotations

import math
import random

import numpy as np

from srlab import expr as E

# Dataset generator for the trigonometric benchmark: a deliberately
# redundant sum of products that collapses to cos(x)^4*sin(4*x).
MESSY_TRIG = (
    "cos(x)^3*sin(x) + cos(x)^3*sin(x)/2 + 2*cos(x)^3*cos(2*x)*sin(x)"
    " + cos(x)^3*cos(4*x)*sin(x)/2 - 3/2*cos(x)*sin(x)^3"
    " - 2*cos(x)*cos(2*x)*sin(x)^3 - cos(x)*cos(4*x)*sin(x)^3/2"
)

COMPACT_TRIG = "cos(x)^4*sin(4*x)"

# Same function written as a plain harmonic sum.
HARMONIC_TRIG = "(4*sin(2*x)+6*sin(4*x)+4*sin(6*x)+sin(8*x))/16"


def ulps_between(a: float, b: float) -> int:
    """Number of representable doubles strictly between a and b (0 when
    equal).  Positive/negative ranges handled via the ordered-int view."""
    if math.isnan(a) or math.isnan(b):
        return 0 if (math.isnan(a) and math.isnan(b)) else 1 << 62
    ia = np.float64(a).view(np.int64)
    ib = np.float64(b).view(np.int64)
    if ia < 0:
        ia = np.int64(-(2**63)) - ia - np.int64(1)
        ia = np.int64(-(ia + 1))
    if ib < 0:
        ib = np.int64(-(2**63)) - ib - np.int64(1)
        ib = np.int64(-(ib + 1))
    return abs(int(ia) - int(ib))


_UNARY = ["negate", "sin", "cos", "abs", "sqrt", "floor", "exp", "log",
          "asin", "acos", "atan"]
_BINARY = ["add", "subtract", "multiply", "divide", "max", "min",
           "atan2", "pow"]


def random_tree(rng: random.Random, names=("x", "y"), max_depth: int = 5,
                p_leaf: float = 0.3) -> E.Expression:
    """Grow a random expression tree over the default catalog."""
    if max_depth <= 1 or rng.random() < p_leaf:
        r = rng.random()
        if r < 0.4:
            return E.var(rng.choice(names))
        if r < 0.7:
            return E.integer(rng.randint(-10, 10))
        return E.real(rng.uniform(-10.0, 10.0))
    if rng.random() < 0.45:
        op = rng.choice(_UNARY)
        return E.call(op, random_tree(rng, names, max_depth - 1, p_leaf))
    op = rng.choice(_BINARY)
    if op == "pow" and rng.random() < 0.7:
        # mostly small integer exponents, as searches produce
        return E.call("pow", random_tree(rng, names, max_depth - 1, p_leaf),
                      E.integer(rng.randint(0, 4)))
    return E.call(op, random_tree(rng, names, max_depth - 1, p_leaf),
                  random_tree(rng, names, max_depth - 1, p_leaf))


def random_polynomial_tree(rng: random.Random, names=("x", "y"),
                           max_depth: int = 4) -> E.Expression:
    """Random tree limited to +,-,*,pow-with-small-int so canonical forms
    stay in the polynomial fragment."""
    if max_depth <= 1 or rng.random() < 0.35:
        r = rng.random()
        if r < 0.5:
            return E.var(rng.choice(names))
        if r < 0.8:
            return E.integer(rng.randint(-6, 6))
        return E.real(round(rng.uniform(-4.0, 4.0), 3))
    r = rng.random()
    if r < 0.3:
        return E.call("pow", random_polynomial_tree(rng, names, max_depth - 1),
                      E.integer(rng.randint(0, 3)))
    op = rng.choice(["add", "subtract", "multiply"])
    return E.call(op, random_polynomial_tree(rng, names, max_depth - 1),
                  random_polynomial_tree(rng, names, max_depth - 1))


def eval_scaled(e: E.Expression, cols: dict[str, np.ndarray]):
    """Evaluate like the engine while tracking, per row, the largest
    finite magnitude seen at any subtree.  Returns (values, invalid,
    scale); the scale is the natural yardstick for rounding tolerances
    because collection may cancel large intermediates."""
    n = len(next(iter(cols.values())))
    scale = np.zeros(n)

    def rec(node):
        nonlocal scale
        if node.kind in (E.REAL, E.INT):
            v = np.full(n, float(node.value))
            b = np.zeros(n, dtype=bool)
        elif node.kind == E.VAR:
            v = np.asarray(cols[node.name], dtype=float)
            b = np.zeros(n, dtype=bool)
        else:
            block = E.CATALOG[node.name]
            parts = [rec(c) for c in node.children]
            vs = [p[0] for p in parts]
            b = np.zeros(n, dtype=bool)
            for p in parts:
                b = b | p[1]
            if block.domain is not None:
                with np.errstate(invalid="ignore"):
                    b = b | ~block.domain(*vs)
            with np.errstate(all="ignore"):
                v = np.asarray(block.func(*vs), dtype=float)
            if b.any():
                v = np.where(b, np.nan, v)
        scale = np.fmax(scale, np.abs(np.where(np.isfinite(v), v, 0.0)))
        return v, b

    vals, bad = rec(e)
    return vals, bad, scale


def assert_close_in_ulps(e_in: E.Expression, e_out: E.Expression,
                         cols: dict[str, np.ndarray], ulps: int = 8,
                         extra_abs: float = 0.0):
    """Rows where the input is valid and finite must stay valid in the
    output and agree within `ulps` units of the evaluation scale (the
    largest intermediate either side computes; expansion can reassociate
    through large cancelling terms, so the output's own intermediates
    set part of the yardstick), plus an optional absolute allowance."""
    v0, bad0, s0 = eval_scaled(e_in, cols)
    v1, _, s1 = eval_scaled(e_out, cols)
    ok = ~bad0 & np.isfinite(v0)
    if not ok.any():
        return
    scale = np.maximum(np.maximum(s0, s1), np.abs(v0))
    tol = ulps * np.spacing(scale) + extra_abs
    assert np.isfinite(v1[ok]).all(), "canonical form lost validity"
    worst = np.max(np.abs(v0[ok] - v1[ok]) - tol[ok])
    assert worst <= 0.0, f"value drift {worst:.3e} beyond tolerance"


def blocks_used(e: E.Expression) -> set[str]:
    """Block names appearing in a tree, with variables and constants
    reported under their profile names."""
    out: set[str] = set()

    def walk(node):
        if node.kind == E.CALL:
            out.add(node.name)
        elif node.kind == E.VAR:
            out.add("variable")
        elif node.kind in (E.REAL, E.INT):
            out.add("constant")
        for child in node.children:
            walk(child)

    walk(e)
    return out
