"""Deterministic model refinement.

Three tools that clean up search-suggested forms: least-squares fitting
over an explicit basis of expressions (with contribution-based pruning of
negligible terms), identification of floating-point constants as small
exact combinations of known generators, and whole-expression constant
snapping guarded by re-scoring on the data.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .expr import (
    INT,
    REAL,
    Expression,
    call,
    evaluate_batch,
    format_expression,
    integer,
    parse,
    real,
    var,
)


class PolishError(ValueError):
    """Raised for invalid fitting or identification requests."""


# ---------------------------------------------------------------------------
# linear fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """A fit request: basis expressions, target column, prune cutoff.

    Terms whose maximum absolute contribution over all rows falls below
    prune_threshold times the dominant term's are dropped and the system
    re-solved; a threshold of zero disables pruning.
    """

    basis: tuple[Expression, ...]
    target: str
    prune_threshold: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        if not self.basis:
            raise PolishError("basis must not be empty")
        if not all(isinstance(t, Expression) for t in self.basis):
            raise PolishError("basis entries must be expressions")
        if not (math.isfinite(self.prune_threshold) and self.prune_threshold >= 0):
            raise PolishError("prune threshold must be finite and non-negative")
        if not self.target:
            raise PolishError("target column name must not be empty")


@dataclass(frozen=True)
class FitResult:
    """Solved coefficients aligned with the basis (pruned slots hold 0.0),
    the final max abs residual over all rows, indices of pruned terms, and
    each retained term's maximum absolute contribution over the rows."""

    coefficients: tuple[float, ...]
    max_abs_residual: float
    pruned: tuple[int, ...]
    max_contributions: tuple[float, ...]


def _design_matrix(d: Dataset, spec: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    y = d.column(spec.target)
    a = np.empty((y.size, len(spec.basis)))
    for j, term in enumerate(spec.basis):
        values, ok = evaluate_batch(term, d)
        finite = np.isfinite(values)
        if not ok or not finite.all():
            row = int(np.argmin(finite))
            raise PolishError(
                f"basis term '{format_expression(term)}' is invalid at row {row + 1}"
            )
        a[:, j] = values
    return a, y


def _integer_columns(a: np.ndarray) -> list[list[int]]:
    # doubles are dyadic rationals, so a power-of-two scale per column
    # turns its entries into exact integers
    from fractions import Fraction

    columns = []
    for j in range(a.shape[1]):
        fractions = [Fraction(float(v)) for v in a[:, j]]
        common = 1
        for f in fractions:
            common = common * f.denominator // math.gcd(common, f.denominator)
        columns.append([int(f * common) for f in fractions])
    return columns


def _gram_det(m: list[list[int]]) -> int:
    # fraction-free elimination; zero pivots cannot appear because every
    # leading principal minor of a Gram matrix of independent vectors is
    # positive, and callers only ever append one new vector at a time
    m = [row[:] for row in m]
    n = len(m)
    prev = 1
    for k in range(n - 1):
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) // prev
        prev = m[k][k]
    return m[n - 1][n - 1]


def _exact_dependents(a: np.ndarray) -> list[int]:
    """Indices of columns exactly dependent (over the rationals) on earlier ones."""
    columns = _integer_columns(a)
    independent: list[int] = []
    dependent: list[int] = []
    gram: list[list[int]] = []
    for j, col in enumerate(columns):
        cross = [sum(x * y for x, y in zip(columns[i], col)) for i in independent]
        grown = [gram[r] + [cross[r]] for r in range(len(independent))]
        grown.append(cross + [sum(x * x for x in col)])
        if _gram_det(grown) != 0:
            independent.append(j)
            gram = grown
        else:
            dependent.append(j)
    return dependent


def linear_fit(d: Dataset, spec: BasisSpec) -> FitResult:
    """Equilibrated least squares over the basis, then contribution pruning.

    Each basis column is scaled to unit max-abs before the orthogonal
    factorization, which also makes a term's maximum contribution equal to
    the magnitude of its scaled coefficient.  Near-singular systems are
    solved in the minimum-norm sense (small singular values truncated);
    the dependence error is reserved for columns that are exactly linearly
    dependent, decided in rational arithmetic so that a merely
    ill-conditioned basis still fits.  Raises PolishError when rows are too
    few, a term is invalid on some row, or columns are dependent.
    """
    a, y = _design_matrix(d, spec)
    n, m = a.shape
    if n < m:
        raise PolishError(f"fit needs at least {m} rows, dataset has {n}")
    scale = np.max(np.abs(a), axis=0)
    dead = np.where(scale == 0.0)[0]
    if dead.size:
        names = ", ".join(format_expression(spec.basis[j]) for j in dead)
        raise PolishError(f"basis columns are linearly dependent: {names}")
    a_scaled = a / scale

    kept = list(range(m))
    pruned: list[int] = []
    independence_verified = False
    while True:
        c_scaled, _, num_rank, _ = np.linalg.lstsq(a_scaled[:, kept], y, rcond=None)
        if num_rank < len(kept) and not independence_verified:
            bad = _exact_dependents(a[:, kept])
            if bad:
                names = ", ".join(format_expression(spec.basis[kept[j]]) for j in bad)
                raise PolishError(f"basis columns are linearly dependent: {names}")
            independence_verified = True
        contrib = np.abs(c_scaled)
        drop = contrib < spec.prune_threshold * contrib.max()
        if not drop.any():
            break
        pruned.extend(kept[j] for j in np.flatnonzero(drop))
        kept = [kept[j] for j in np.flatnonzero(~drop)]
        if not kept:
            break

    coefficients = np.zeros(m)
    contributions = np.zeros(m)
    if kept:
        coefficients[kept] = c_scaled / scale[kept]
        contributions[kept] = np.abs(c_scaled)
        fitted = a_scaled[:, kept] @ c_scaled
    else:
        fitted = np.zeros_like(y)
    residual = float(np.max(np.abs(y - fitted)))
    return FitResult(
        coefficients=tuple(coefficients.tolist()),
        max_abs_residual=residual,
        pruned=tuple(sorted(pruned)),
        max_contributions=tuple(contributions.tolist()),
    )


def arcsine_basis(count: int, x_column: str = "x", y_column: str = "value",
                  prune_threshold: float = 1e-12) -> BasisSpec:
    """The endpoint-accurate arcsine series with `count` coefficients.

    Basis: asin(x) plus x^(1+2k)*sqrt((1-x)(1+x)) for k = 0..count-2.  The
    square-root factor is spelled with separate (1-x) and (1+x) factors so
    the columns stay accurate at the interval ends.
    """
    if count < 1:
        raise PolishError("coefficient count must be at least 1")
    x = var(x_column)
    root = call("sqrt", call("multiply",
                             call("subtract", integer(1), x),
                             call("add", integer(1), x)))
    terms = [call("asin", x)]
    for k in range(count - 1):
        power = 1 + 2 * k
        lead = x if power == 1 else call("pow", x, integer(power))
        terms.append(call("multiply", lead, root))
    return BasisSpec(tuple(terms), y_column, prune_threshold)


def bifocal_fit(d: Dataset, count: int, x_column: str = "x",
                y_column: str = "value", prune_threshold: float = 1e-12) -> FitResult:
    """Fit the arcsine series of `arcsine_basis` to a column of d."""
    xs = d.column(x_column)
    if xs.min() < -1.0 or xs.max() > 1.0:
        raise PolishError(f"column {x_column} must lie in [-1, 1] for the arcsine basis")
    return linear_fit(d, arcsine_basis(count, x_column, y_column, prune_threshold))


def fit_expression(spec: BasisSpec, fit: FitResult) -> Expression:
    """Assemble the fitted model as a single expression.

    Retained terms appear as coefficient*term summands in basis order;
    pruned terms are omitted entirely.
    """
    total: Expression | None = None
    for j, term in enumerate(spec.basis):
        if j in fit.pruned:
            continue
        piece = call("multiply", real(fit.coefficients[j]), term)
        total = piece if total is None else call("add", total, piece)
    return integer(0) if total is None else total


def export_fit_csv(path, spec: BasisSpec, fit: FitResult) -> None:
    """Write retained terms as rows of term, coefficient, max contribution.

    Coefficients and contributions use shortest round-trip formatting, so
    reading the value back reproduces the double exactly.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["term", "coefficient", "max_contribution"])
        for j, term in enumerate(spec.basis):
            if j in fit.pruned:
                continue
            writer.writerow([
                format_expression(term),
                repr(fit.coefficients[j]),
                repr(fit.max_contributions[j]),
            ])


# ---------------------------------------------------------------------------
# constant identification
# ---------------------------------------------------------------------------

DEFAULT_GENERATORS: tuple[tuple[str, float], ...] = (
    ("1", 1.0),
    ("pi", math.pi),
    ("e", math.e),
    ("sqrt(2)", math.sqrt(2)),
    ("sqrt(3)", math.sqrt(3)),
    ("sqrt(5)", math.sqrt(5)),
    ("sqrt(6)", math.sqrt(6)),
    ("log(2)", math.log(2)),
)


@dataclass(frozen=True)
class ConstantLibrary:
    """Generators and bounds for recognizing constants as p/q * generator."""

    generators: tuple[tuple[str, float], ...] = DEFAULT_GENERATORS
    max_numerator: int = 64
    max_denominator: int = 64
    tolerance: float = 1e-12

    def __post_init__(self):
        values = [g for _, g in self.generators]
        if not values:
            raise PolishError("library needs at least one generator")
        if not all(math.isfinite(g) and g != 0.0 for g in values):
            raise PolishError("generators must be finite and non-zero")
        if len(set(values)) != len(values):
            raise PolishError("generators must be distinct")
        if self.max_numerator < 1 or self.max_denominator < 1:
            raise PolishError("rational bounds must be positive")
        if not (math.isfinite(self.tolerance) and self.tolerance >= 0):
            raise PolishError("tolerance must be finite and non-negative")


@dataclass(frozen=True)
class ConstantMatch:
    """One recognized exact form: numerator/denominator * generator."""

    text: str
    value: float
    generator: str
    numerator: int
    denominator: int
    rel_error: float


def _match_text(name: str, p: int, q: int) -> str:
    sign = "-" if p < 0 else ""
    p = abs(p)
    if name == "1":
        core = str(p) if q == 1 else f"{p}/{q}"
    else:
        top = name if p == 1 else f"{p}*{name}"
        core = top if q == 1 else f"{top}/{q}"
    return sign + core


_DEFAULT_LIBRARY = ConstantLibrary()


def identify_constant(v: float, lib: ConstantLibrary | None = None) -> list[ConstantMatch]:
    """Recognize v as p/q times a library generator.

    Returns every candidate within the library tolerance (relative), ranked
    by denominator size and then by error; an empty list means no match.
    """
    if lib is None:
        lib = _DEFAULT_LIBRARY
    if not math.isfinite(v):
        raise PolishError("value must be finite")
    if v == 0.0:
        return [ConstantMatch("0", 0.0, "1", 0, 1, 0.0)]
    found: list[tuple[tuple[int, float, int, int], ConstantMatch]] = []
    for order, (name, g) in enumerate(lib.generators):
        t = v / g
        if abs(t) > lib.max_numerator + 1:
            continue
        for q in range(1, lib.max_denominator + 1):
            p = round(t * q)
            if p == 0 or abs(p) > lib.max_numerator:
                continue
            if math.gcd(abs(p), q) != 1:
                continue
            candidate = p * g / q
            rel = abs(candidate - v) / abs(v)
            if rel <= lib.tolerance:
                match = ConstantMatch(_match_text(name, p, q), candidate,
                                      name, p, q, rel)
                found.append(((q, rel, abs(p), order), match))
    found.sort(key=lambda pair: pair[0])
    return [match for _, match in found]


# ---------------------------------------------------------------------------
# constant snapping
# ---------------------------------------------------------------------------


def _real_values(node: Expression, out: list[float]) -> None:
    if node.kind == REAL:
        out.append(float(node.value))
    for child in node.children:
        _real_values(child, out)


def _replace_nth_real(node: Expression, target: int, replacement: Expression,
                      counter: list[int]) -> Expression:
    if node.kind == REAL:
        index = counter[0]
        counter[0] += 1
        return replacement if index == target else node
    if not node.children:
        return node
    children = tuple(_replace_nth_real(c, target, replacement, counter)
                     for c in node.children)
    if children == node.children:
        return node
    return Expression(node.kind, name=node.name, value=node.value,
                      index=node.index, children=children)


Metric = Callable[[np.ndarray, np.ndarray], float]


def snap_expression(e: Expression, lib: ConstantLibrary | None, d: Dataset,
                    *, y_column: str = "y", metric: Metric | None = None) -> Expression:
    """Replace real constants by exact forms when the fit does not degrade.

    For each real constant the best library identification is tried first,
    then plain rounding to the nearest integer; a replacement is kept only
    when the metric over the full dataset (max abs error by default) does
    not worsen.  Integer constants are left untouched.
    """
    if lib is None:
        lib = _DEFAULT_LIBRARY
    if metric is None:
        metric = lambda y, yhat: float(np.max(np.abs(y - yhat)))
    y = d.column(y_column)

    def score(candidate: Expression) -> float:
        values, ok = evaluate_batch(candidate, d)
        if not ok or not np.all(np.isfinite(values)):
            return math.inf
        return metric(y, values)

    current = e
    best = score(current)
    position = 0
    while True:
        reals: list[float] = []
        _real_values(current, reals)
        if position >= len(reals):
            break
        value = reals[position]
        candidates: list[Expression] = []
        matches = identify_constant(value, lib)
        if matches:
            top = matches[0]
            if top.generator == "1" and top.denominator == 1:
                candidates.append(integer(top.numerator))
            elif top.value != value:
                candidates.append(real(top.value))
        nearest = round(value)
        if not any(c.kind == INT and c.value == nearest for c in candidates):
            candidates.append(integer(nearest))
        accepted_int = False
        for replacement in candidates:
            trial = _replace_nth_real(current, position, replacement, [0])
            trial_score = score(trial)
            if trial_score <= best:
                current, best = trial, trial_score
                accepted_int = replacement.kind == INT
                break
        if not accepted_int:
            position += 1
    return current
