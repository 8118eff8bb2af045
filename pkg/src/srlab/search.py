"""Pareto-front genetic search over expression space.

A search evolves fillings for the unknown-function slots of a target
template, scores them on train/validate row splits under a configurable
error metric, locally tunes numeric coefficients with damped least
squares, and keeps the best candidate at each complexity level in a
non-dominated archive.  Every random draw flows through one seeded
generator, so a deterministic run is reproducible end to end.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .expr import (
    CALL,
    CATALOG,
    INT,
    REAL,
    SLOT,
    Expression,
    call,
    complexity,
    depth,
    evaluate_batch,
    integer,
    node_count,
    parse,
    real,
    substitute_slots,
    var,
    variables,
)
from .rewrite import canonicalize

MAX_SLOT_DEPTH = 12
MAX_SLOT_NODES = 64
MAX_POW_EXPONENT = 8
CONSTANT_RANGE = 10.0
_MAX_SNAP = 1e6

_canon_cache: dict[tuple[Expression, tuple[str, ...] | None], Expression] = {}


def _canon(e: Expression, blocks: tuple[str, ...] | None) -> Expression:
    """Cached canonicalize; offspring share most of their subtrees."""
    key = (e, blocks)
    out = _canon_cache.get(key)
    if out is None:
        out = canonicalize(e, blocks)
        if len(_canon_cache) > 500_000:
            _canon_cache.clear()
        _canon_cache[key] = out
    return out


class SearchError(ValueError):
    """Raised for invalid search configurations or template mismatches."""


# ---------------------------------------------------------------------------
# metrics (all oriented as minimize; goodness scores become 1 - value)
# ---------------------------------------------------------------------------


def _max_abs_error(y: np.ndarray, yhat: np.ndarray) -> float:
    return float(np.max(np.abs(y - yhat)))


def _mean_abs_error(y: np.ndarray, yhat: np.ndarray) -> float:
    return float(np.mean(np.abs(y - yhat)))


def _mean_squared_error(y: np.ndarray, yhat: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        return float(np.mean((y - yhat) ** 2))


def _r_squared_loss(y: np.ndarray, yhat: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        scatter = float(np.sum((y - np.mean(y)) ** 2))
        misfit = float(np.sum((y - yhat) ** 2))
    if scatter == 0.0:
        return 0.0 if misfit == 0.0 else math.inf
    return misfit / scatter


def _correlation_loss(y: np.ndarray, yhat: np.ndarray) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        sy = float(np.std(y))
        sp = float(np.std(yhat))
        if sy == 0.0 or sp == 0.0 or not math.isfinite(sy * sp):
            return 0.0 if _max_abs_error(y, yhat) == 0.0 else math.inf
        r = float(np.mean((y - np.mean(y)) * (yhat - np.mean(yhat)))) / (sy * sp)
    if math.isnan(r):
        return math.inf
    return 1.0 - r


METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "max-abs-error": _max_abs_error,
    "mean-abs-error": _mean_abs_error,
    "mean-squared-error": _mean_squared_error,
    "r-squared": _r_squared_loss,
    "correlation": _correlation_loss,
}


# ---------------------------------------------------------------------------
# templates and configuration
# ---------------------------------------------------------------------------

_RELATION_TESTS = {
    ">": np.greater,
    ">=": np.greater_equal,
    "<": np.less,
    "<=": np.less_equal,
}


@dataclass(frozen=True)
class Constraint:
    """An inequality the model must satisfy at every row.

    The expression may reference slot nodes; they are filled with the same
    assignment as the scaffold before checking relation(value, bound).
    """

    expression: Expression
    relation: str
    bound: float

    def __post_init__(self):
        if self.relation not in _RELATION_TESTS:
            raise SearchError(f"unknown relation {self.relation!r}")
        if not math.isfinite(self.bound):
            raise SearchError("constraint bound must be finite")


def _slot_signature(e: Expression, out: dict[int, tuple[str, ...]]) -> None:
    if e.kind == SLOT:
        args = tuple(child.name for child in e.children)
        seen = out.get(e.index)
        if seen is not None and seen != args:
            raise SearchError(f"slot f{e.index} used with inconsistent arguments")
        out[e.index] = args
    for child in e.children:
        _slot_signature(child, out)


@dataclass(frozen=True)
class TargetTemplate:
    """Dependent column, scaffold with slot nodes, optional constraints."""

    dependent: str
    scaffold: Expression
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.dependent:
            raise SearchError("dependent column name must not be empty")
        found: dict[int, tuple[str, ...]] = {}
        _slot_signature(self.scaffold, found)
        for c in self.constraints:
            _slot_signature(c.expression, found)
        if not found:
            raise SearchError("template needs at least one slot")
        if sorted(found) != list(range(1, len(found) + 1)):
            raise SearchError("slot indices must be contiguous from 1")
        object.__setattr__(self, "_slots",
                           tuple(found[i] for i in sorted(found)))

    @property
    def slots(self) -> tuple[tuple[str, ...], ...]:
        """Argument names of each slot, in slot-index order."""
        return self._slots

    @classmethod
    def from_text(cls, text: str,
                  constraints: Sequence[Constraint] = ()) -> "TargetTemplate":
        """Parse 'column = scaffold' template text, e.g. 'z = f1(x)*f2(y)'."""
        lhs, sep, rhs = text.partition("=")
        if not sep or not lhs.strip():
            raise SearchError("template text must look like 'y = f1(x)'")
        return cls(lhs.strip(), parse(rhs, allow_slots=True), tuple(constraints))


@dataclass(frozen=True)
class SplitSpec:
    """Row split strategy: random(train%, validate%), alternating, all-both."""

    kind: str
    train_percent: float = 75.0
    validate_percent: float = 75.0

    def __post_init__(self):
        if self.kind not in ("random", "alternating", "all-both"):
            raise SearchError(f"unknown split strategy {self.kind!r}")
        if self.kind == "random":
            for pct in (self.train_percent, self.validate_percent):
                if not 0.0 < pct <= 100.0:
                    raise SearchError("split percentages must be in (0, 100]")
            if self.train_percent + self.validate_percent < 100.0:
                raise SearchError(
                    "random split percentages must sum to at least 100 "
                    "so that every row is tagged")


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    """Boolean row masks; a row tagged in both masks is in both partitions."""

    train: np.ndarray
    validate: np.ndarray

    def __post_init__(self):
        train = np.asarray(self.train, dtype=bool)
        validate = np.asarray(self.validate, dtype=bool)
        train.setflags(write=False)
        validate.setflags(write=False)
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "validate", validate)
        if train.shape != validate.shape:
            raise SearchError("split masks must have equal length")
        if not np.all(train | validate):
            raise SearchError("every row must be tagged train, validate, or both")


def split(d: Dataset, strategy: SplitSpec, seed: int) -> SplitAssignment:
    """Deterministically tag each row for training and/or validation.

    Alternating puts even-index rows plus the final row in train and the
    rest in validate.  Random draws exact counts from the percentages; the
    validate set takes every row left out of train first, then fills up
    with training rows, so the overlap is exactly train+validate-n.
    """
    n = d.n_rows
    if strategy.kind == "all-both":
        ones = np.ones(n, dtype=bool)
        return SplitAssignment(ones, ones.copy())
    if strategy.kind == "alternating":
        train = np.zeros(n, dtype=bool)
        train[::2] = True
        train[-1] = True
        validate = ~train
        if not validate.any():
            validate = train.copy()
        return SplitAssignment(train, validate)
    rng = np.random.default_rng(seed)
    n_train = min(n, max(1, round(n * strategy.train_percent / 100.0)))
    n_validate = min(n, max(1, round(n * strategy.validate_percent / 100.0)))
    order = rng.permutation(n)
    train = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    validate = ~train
    short = n_validate - int(np.count_nonzero(validate))
    if short > 0:
        refill = [i for i in order if train[i]][:short]
        validate[refill] = True
    return SplitAssignment(train, validate)


@dataclass(frozen=True)
class SearchConfig:
    """Everything that determines a search run besides data and template."""

    blocks: tuple[str, ...] = ("add", "subtract", "multiply", "divide",
                               "negate", "sin", "cos", "pow")
    profile: Mapping[str, int] | None = None
    integer_constants: bool = True
    metric: str = "max-abs-error"
    split: SplitSpec = SplitSpec("all-both")
    seed: int = 0
    generations: int | None = None
    time_budget: float | None = None
    population_size: int = 96
    mutation_rate: float = 0.55
    crossover_rate: float = 0.35
    tuner_iterations: int = 25
    tune_top: int = 2
    allow_nested_trig: bool = False
    restart_after: int | None = 400
    workers: int = 1
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise SearchError("at least one building block must be enabled")
        for name in self.blocks:
            if name not in CATALOG:
                raise SearchError(f"unknown building block {name!r}")
        if self.metric not in METRICS:
            raise SearchError(f"unknown metric {self.metric!r}")
        for rate in (self.mutation_rate, self.crossover_rate):
            if not 0.0 <= rate <= 1.0:
                raise SearchError("rates must lie in [0, 1]")
        if self.mutation_rate + self.crossover_rate > 1.0:
            raise SearchError("mutation and crossover rates must sum to at most 1")
        if self.population_size < 2:
            raise SearchError("population size must be at least 2")
        if not 0 <= self.seed < 2 ** 64:
            raise SearchError("seed must fit in 64 bits")
        if self.generations is not None and self.generations < 1:
            raise SearchError("generation budget must be positive")
        if self.time_budget is not None and self.time_budget <= 0:
            raise SearchError("time budget must be positive")
        if self.restart_after is not None and self.restart_after < 1:
            raise SearchError("restart threshold must be positive")
        if self.workers < 1:
            raise SearchError("worker count must be positive")
        if self.deterministic and self.workers != 1:
            raise SearchError("deterministic mode requires a single worker")


@dataclass(frozen=True)
class Candidate:
    """A scored survivor: composed expression plus its slot fillings."""

    expression: Expression
    slots: tuple[Expression, ...]
    train_fitness: float
    validation_fitness: float
    complexity: int
    generation: int


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _score_values(e: Expression, d: Dataset,
                  constraints: Sequence[Constraint]) -> np.ndarray | None:
    values, ok = evaluate_batch(e, d)
    if not ok or not np.all(np.isfinite(values)):
        return None
    for c in constraints:
        checked, c_ok = evaluate_batch(c.expression, d)
        if not c_ok or not np.all(np.isfinite(checked)):
            return None
        if not np.all(_RELATION_TESTS[c.relation](checked, c.bound)):
            return None
    return values


def _metric_pair(fn: Callable[[np.ndarray, np.ndarray], float],
                 y: np.ndarray, values: np.ndarray,
                 s: SplitAssignment) -> tuple[float, float]:
    train = fn(y[s.train], values[s.train])
    validate = train if not s.validate.any() \
        else fn(y[s.validate], values[s.validate])
    return (train, validate)


def score(e: Expression, d: Dataset, s: SplitAssignment,
          metric: str | Callable[[np.ndarray, np.ndarray], float], *,
          target: str,
          constraints: Sequence[Constraint] = ()) -> tuple[float, float] | None:
    """Metric over train and validate rows, or None when rejected.

    A candidate is rejected if any row evaluates to an invalid value or if
    any constraint fails at any row; rejection is a value, not an error.
    """
    fn = METRICS[metric] if isinstance(metric, str) else metric
    values = _score_values(e, d, constraints)
    if values is None:
        return None
    return _metric_pair(fn, d.column(target), values, s)


def residuals(e: Expression, d: Dataset, target: str) -> Dataset:
    """Per-row residual data - prediction, alongside the input columns."""
    values, ok = evaluate_batch(e, d)
    if not ok or not np.all(np.isfinite(values)):
        raise SearchError("model is invalid on some rows; no residuals")
    columns = {name: d.column(name) for name in d.names if name != target}
    columns["residual"] = d.column(target) - values
    return Dataset.from_columns(columns)


# ---------------------------------------------------------------------------
# random trees and variation operators
# ---------------------------------------------------------------------------


def _random_constant(rng: np.random.Generator, config: SearchConfig) -> Expression:
    if config.integer_constants:
        return integer(int(rng.integers(-10, 11)))
    return real(float(rng.uniform(-CONSTANT_RANGE, CONSTANT_RANGE)))


def _random_leaf(rng: np.random.Generator, args: tuple[str, ...],
                 config: SearchConfig) -> Expression:
    if args and rng.random() < 0.7:
        return var(args[int(rng.integers(len(args)))])
    return _random_constant(rng, config)


def _random_exponent(rng: np.random.Generator) -> Expression:
    k = int(rng.integers(2, MAX_POW_EXPONENT + 1))
    return integer(-k if rng.random() < 0.25 else k)


def _random_tree(rng: np.random.Generator, args: tuple[str, ...],
                 config: SearchConfig, max_depth: int) -> Expression:
    if max_depth <= 0 or rng.random() < 0.3:
        return _random_leaf(rng, args, config)
    name = config.blocks[int(rng.integers(len(config.blocks)))]
    arity = CATALOG[name].arity
    if name == "pow":
        return call(name, _random_tree(rng, args, config, max_depth - 1),
                    _random_exponent(rng))
    children = tuple(_random_tree(rng, args, config, max_depth - 1)
                     for _ in range(arity))
    return call(name, *children)


def _positions(e: Expression) -> list[Expression]:
    out: list[Expression] = []

    def walk(node: Expression) -> None:
        out.append(node)
        for child in node.children:
            walk(child)

    walk(e)
    return out


def _replace_at(e: Expression, target_index: int, replacement: Expression,
                counter: list[int]) -> Expression:
    index = counter[0]
    counter[0] += 1
    if index == target_index:
        return replacement
    if not e.children:
        return e
    children = tuple(_replace_at(c, target_index, replacement, counter)
                     for c in e.children)
    if children == e.children:
        return e
    return Expression(e.kind, name=e.name, value=e.value, index=e.index,
                      children=children)


def _within_caps(e: Expression) -> bool:
    return depth(e) <= MAX_SLOT_DEPTH and node_count(e) <= MAX_SLOT_NODES


_TRIG_BLOCKS = frozenset({"sin", "cos", "tan", "asin", "acos", "atan"})


def _no_nested_trig(e: Expression) -> bool:
    """True when no trig call sits inside another trig call's argument.

    Chains like sin(a*sin(b*sin(x))) can mimic nearly any waveform with
    a couple of tuned constants; they crowd the mid-complexity archive
    rungs and starve structurally honest candidates, so by default the
    search refuses to evolve them.
    """
    stack = [(e, False)]
    while stack:
        node, inside = stack.pop()
        trig = node.kind == CALL and node.name in _TRIG_BLOCKS
        if trig and inside:
            return False
        for c in node.children:
            stack.append((c, inside or trig))
    return True


def _pow_ok(e: Expression) -> bool:
    """Evolved powers carry small integer exponents only.

    A tunable exponent turns pow into a soft bump mask, for example
    (1 + c*x^2)^(-200000) is a Gaussian in disguise; those swallow the
    frontier the same way nested trig does.
    """
    stack = [e]
    while stack:
        n = stack.pop()
        if n.kind == CALL and n.name == "pow":
            ex = n.children[1]
            if ex.kind != INT or not 2 <= abs(int(ex.value)) <= MAX_POW_EXPONENT:
                return False
        stack.extend(n.children)
    return True


def _admissible(trees: Iterable[Expression], config: SearchConfig) -> bool:
    for t in trees:
        if not _within_caps(t) or not _pow_ok(t):
            return False
        if not config.allow_nested_trig and not _no_nested_trig(t):
            return False
    return True


def _raw_ok(e: Expression, config: SearchConfig) -> bool:
    return _within_caps(e) and _pow_ok(e) and (config.allow_nested_trig
                                               or _no_nested_trig(e))


def _additive_terms(e: Expression) -> list[tuple[float, Expression]]:
    """Top-level additive terms as (sign, term), constants folded out."""
    out: list[tuple[float, Expression]] = []
    stack: list[tuple[Expression, float]] = [(e, 1.0)]
    while stack:
        node, sign = stack.pop()
        if node.kind == CALL and node.name == "add":
            stack.extend((c, sign) for c in node.children)
        elif node.kind == CALL and node.name == "subtract":
            first, second = node.children
            stack.append((first, sign))
            stack.append((second, -sign))
        elif node.kind == CALL and node.name == "negate":
            stack.append((node.children[0], -sign))
        elif not node.is_constant:
            out.append((sign, node))
    return out


def _nudged_constant(node: Expression, rng: np.random.Generator) -> Expression:
    if node.kind == INT:
        return integer(int(node.value) + (1 if rng.random() < 0.5 else -1))
    v = float(node.value)
    if rng.random() < 0.5 and abs(v) <= _MAX_SNAP:
        snapped = float(round(v)) + (0.0 if rng.random() < 0.5 else
                                     (1.0 if rng.random() < 0.5 else -1.0))
        if snapped != v:
            return real(snapped)
    return real(v * (1.0 + 0.1 * float(rng.standard_normal())))


def _mutate_tree(tree: Expression, rng: np.random.Generator,
                 args: tuple[str, ...], config: SearchConfig) -> Expression:
    for _ in range(8):
        nodes = _positions(tree)
        kinds = ["replace", "insert"]
        if any(n.kind == CALL for n in nodes):
            kinds.append("delete")
        if any(n.kind in (INT, REAL) for n in nodes):
            kinds.append("nudge")
        kind = kinds[int(rng.integers(len(kinds)))]
        at = int(rng.integers(len(nodes)))
        if kind == "replace":
            repl = _random_tree(rng, args, config, max_depth=2)
            out = _replace_at(tree, at, repl, [0])
        elif kind == "insert":
            name = config.blocks[int(rng.integers(len(config.blocks)))]
            arity = CATALOG[name].arity
            inner = nodes[at]
            if arity == 1:
                repl = call(name, inner)
            elif name == "pow":
                repl = call(name, inner, _random_exponent(rng))
            else:
                extra = _random_leaf(rng, args, config)
                repl = call(name, inner, extra) if rng.random() < 0.5 \
                    else call(name, extra, inner)
            out = _replace_at(tree, at, repl, [0])
        elif kind == "nudge":
            spots = [i for i, n in enumerate(nodes) if n.kind in (INT, REAL)]
            at = spots[int(rng.integers(len(spots)))]
            out = _replace_at(tree, at, _nudged_constant(nodes[at], rng), [0])
        else:
            calls = [i for i, n in enumerate(nodes) if n.kind == CALL]
            at = calls[int(rng.integers(len(calls)))]
            victim = nodes[at]
            child = victim.children[int(rng.integers(len(victim.children)))]
            out = _replace_at(tree, at, child, [0])
        if out != tree and _raw_ok(out, config):
            return out
    return _random_leaf(rng, args, config)


def _crossover_trees(a: Expression, b: Expression, rng: np.random.Generator,
                     config: SearchConfig) -> tuple[Expression, Expression]:
    for _ in range(8):
        nodes_a = _positions(a)
        nodes_b = _positions(b)
        ia = int(rng.integers(len(nodes_a)))
        ib = int(rng.integers(len(nodes_b)))
        child_a = _replace_at(a, ia, nodes_b[ib], [0])
        child_b = _replace_at(b, ib, nodes_a[ia], [0])
        if _raw_ok(child_a, config) and _raw_ok(child_b, config):
            return child_a, child_b
    return a, b


def _fitness_pick(population: Sequence[Candidate],
                  rng: np.random.Generator) -> Candidate:
    picks = rng.integers(len(population), size=3)
    best = min(picks, key=lambda i: (population[int(i)].validation_fitness,
                                     population[int(i)].complexity, int(i)))
    return population[int(best)]


def _tournament(population: Sequence[Candidate],
                rng: np.random.Generator) -> Candidate:
    # double tournament: qualify two by fitness, usually keep the smaller;
    # this is the only bloat brake besides the hard node caps
    a = _fitness_pick(population, rng)
    b = _fitness_pick(population, rng)
    if a.complexity != b.complexity and rng.random() < 0.7:
        return a if a.complexity < b.complexity else b
    if a.validation_fitness != b.validation_fitness:
        return a if a.validation_fitness < b.validation_fitness else b
    return a if a.complexity <= b.complexity else b


def propose(population: Sequence[Candidate], rng: np.random.Generator,
            config: SearchConfig,
            template: TargetTemplate) -> list[tuple[Expression, ...]]:
    """One generation of offspring slot assignments, canonicalized.

    Each act is crossover (two children, subtrees swapped within one slot),
    mutation (replace/insert/delete one node), or a fresh random assignment,
    chosen by the configured rates.  Offspring only ever contain enabled
    blocks, and slot structure is never altered.
    """
    if not population:
        raise SearchError("population must not be empty")
    signature = template.slots
    offspring: list[tuple[Expression, ...]] = []
    attempts = 0
    limit = config.population_size * 20
    while len(offspring) < config.population_size:
        attempts += 1
        raw: list[tuple[Expression, ...]] = []
        if attempts > limit:
            raw.append(tuple(_random_leaf(rng, args, config)
                             for args in signature))
        else:
            draw = float(rng.random())
            if draw < config.crossover_rate and len(population) >= 2:
                left = _tournament(population, rng)
                right = _tournament(population, rng)
                at = int(rng.integers(len(signature)))
                child_a, child_b = _crossover_trees(left.slots[at],
                                                    right.slots[at], rng,
                                                    config)
                first = list(left.slots)
                second = list(right.slots)
                first[at] = child_a
                second[at] = child_b
                raw.append(tuple(first))
                raw.append(tuple(second))
            elif draw < config.crossover_rate + config.mutation_rate:
                parent = _tournament(population, rng)
                at = int(rng.integers(len(signature)))
                trees = list(parent.slots)
                trees[at] = _mutate_tree(trees[at], rng, signature[at], config)
                raw.append(tuple(trees))
            else:
                raw.append(tuple(_random_tree(rng, args, config, max_depth=4)
                                 for args in signature))
        for assignment in raw:
            if attempts <= limit \
                    and not all(_raw_ok(t, config) for t in assignment):
                continue
            canon = tuple(_canon(t, config.blocks) for t in assignment)
            # the caps bind the stored (canonical) form, or chained sums
            # would ratchet depth across generations
            if attempts > limit or _admissible(canon, config):
                offspring.append(canon)
    del offspring[config.population_size:]
    return offspring


# ---------------------------------------------------------------------------
# coefficient tuning
# ---------------------------------------------------------------------------


def _constant_positions(trees: Sequence[Expression]) -> list[tuple[int, int]]:
    found: list[tuple[int, int]] = []
    for which, tree in enumerate(trees):
        for at, node in enumerate(_positions(tree)):
            if node.kind in (REAL, INT):
                found.append((which, at))
    return found


def _with_constants(trees: Sequence[Expression], spots: Sequence[tuple[int, int]],
                    values: Sequence[float],
                    as_int: Iterable[int] = ()) -> list[Expression]:
    as_int = set(as_int)
    out = list(trees)
    for i, (which, at) in enumerate(spots):
        v = values[i]
        node = integer(round(v)) if i in as_int else real(v)
        out[which] = _replace_at(out[which], at, node, [0])
    return out


def _levenberg_marquardt(residual_fn: Callable[[np.ndarray], np.ndarray | None],
                         theta0: np.ndarray, iterations: int) -> np.ndarray:
    """Damped least squares with forward-difference Jacobians.

    Returns the best parameters seen; the caller decides acceptance by
    re-scoring, so a failed optimization is harmless.
    """
    theta = theta0.astype(float).copy()
    r = residual_fn(theta)
    if r is None:
        return theta0
    sse = float(r @ r)
    lam = 1e-3
    p = theta.size
    for _ in range(iterations):
        # a parameter that cannot be nudged in both directions (an integer
        # exponent, a constant pinned to a domain boundary) stays frozen
        columns = []
        free = []
        for j in range(p):
            h = 1e-7 * max(1.0, abs(theta[j]))
            probes = []
            for step in (h, -h):
                probe = theta.copy()
                probe[j] += step
                rp = residual_fn(probe)
                if rp is None:
                    break
                probes.append((rp - r) / step)
            if len(probes) == 2:
                free.append(j)
                columns.append(probes[0])
        if not free:
            break
        jac = np.column_stack(columns)
        gram = jac.T @ jac
        gradient = jac.T @ r
        stepped = False
        for _ in range(12):
            damped = gram + lam * np.diag(np.maximum(np.diag(gram), 1e-12))
            try:
                step = np.linalg.solve(damped, -gradient)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta.copy()
            trial[free] += step
            rt = residual_fn(trial)
            if rt is not None:
                sse_t = float(rt @ rt)
                if sse_t < sse:
                    theta, r, sse = trial, rt, sse_t
                    lam = max(lam * 0.25, 1e-14)
                    stepped = True
                    break
            lam *= 10.0
            if lam > 1e14:
                break
        if not stepped:
            break
        if float(np.max(np.abs(step))) <= 1e-13 * (1.0 + float(np.max(np.abs(theta)))):
            break
    return theta


def _tune_assignment(trees: Sequence[Expression], scaffold: Expression,
                     d: Dataset, s: SplitAssignment, metric_name: str,
                     config: SearchConfig, target: str,
                     constraints: Sequence[Constraint]) -> tuple[Expression, ...]:
    """Tune every constant across the slot fillings; see tune_coefficients."""
    spots = _constant_positions(trees)
    if not spots:
        return tuple(trees)
    fn = METRICS[metric_name]
    y = d.column(target)
    train = s.train

    def compose(candidate_trees: Sequence[Expression]) -> Expression:
        return substitute_slots(scaffold,
                                {i + 1: t for i, t in enumerate(candidate_trees)})

    def predictions(candidate_trees: Sequence[Expression]) -> np.ndarray | None:
        values, ok = evaluate_batch(compose(candidate_trees), d)
        if not ok or not np.all(np.isfinite(values)):
            return None
        return values

    def residual_fn(theta: np.ndarray) -> np.ndarray | None:
        values = predictions(_with_constants(trees, spots, theta))
        if values is None:
            return None
        return values[train] - y[train]

    theta0 = np.array([float(_positions(trees[w])[a].value) for w, a in spots])
    theta = _levenberg_marquardt(residual_fn, theta0, config.tuner_iterations)

    def train_fitness(candidate_trees: Sequence[Expression]) -> float:
        values = predictions(candidate_trees)
        if values is None:
            return math.inf
        return fn(y[train], values[train])

    def validation_fitness(candidate_trees: Sequence[Expression]) -> float:
        values = predictions(candidate_trees)
        if values is None:
            return math.inf
        return fn(y[s.validate], values[s.validate])

    baseline = train_fitness(trees)
    tuned = _with_constants(trees, spots, theta)
    if train_fitness(tuned) > baseline:
        theta = theta0
        tuned = list(trees)

    if config.integer_constants:
        as_int: set[int] = set()
        current_val = validation_fitness(tuned)
        for i in range(len(spots)):
            trial = _with_constants(trees, spots, theta, as_int | {i})
            trial_val = validation_fitness(trial)
            if trial_val <= current_val:
                as_int.add(i)
                current_val = trial_val
        tuned = _with_constants(trees, spots, theta, as_int)
        if train_fitness(tuned) > baseline:
            tuned = list(trees)
    return tuple(tuned)


def tune_coefficients(e: Expression, d: Dataset, s: SplitAssignment,
                      metric: str, config: SearchConfig, *, target: str,
                      constraints: Sequence[Constraint] = ()) -> Expression:
    """Locally optimize the constants of an expression on the train rows.

    Damped least squares adjusts every numeric constant, acceptance is by
    re-scoring the configured metric (never worsening train fitness), and
    with the integer-constants flag each tuned value is tentatively rounded,
    keeping the rounding when validation fitness does not worsen.  Returns
    the input unchanged when optimization fails to improve.
    """
    bare_slot = Expression(SLOT, name="f1", index=1, children=())
    tuned = _tune_assignment([e], bare_slot, d, s, metric, config,
                             target, constraints)
    return tuned[0]


# ---------------------------------------------------------------------------
# archive
# ---------------------------------------------------------------------------


@dataclass
class ParetoArchive:
    """Best candidate per complexity level, kept mutually non-dominated."""

    levels: dict[int, Candidate] = field(default_factory=dict)

    def insert(self, c: Candidate) -> bool:
        """Insert when c strictly improves the frontier; returns whether it did."""
        for entry in self.levels.values():
            if (entry.complexity <= c.complexity
                    and entry.validation_fitness <= c.validation_fitness):
                return False
        for cx in [cx for cx, entry in self.levels.items()
                   if cx >= c.complexity
                   and entry.validation_fitness >= c.validation_fitness]:
            del self.levels[cx]
        self.levels[c.complexity] = c
        return True

    def frontier(self) -> list[Candidate]:
        """Entries ordered by complexity; fitness strictly improves along it."""
        return [self.levels[cx] for cx in sorted(self.levels)]

    def best(self) -> Candidate | None:
        entries = self.frontier()
        return entries[-1] if entries else None


@dataclass(frozen=True)
class ProgressEvent:
    """One frontier improvement: when, at which generation, and by what."""

    seconds: float
    generation: int
    candidate: Candidate


# ---------------------------------------------------------------------------
# the run loop
# ---------------------------------------------------------------------------


def _template_columns(t: TargetTemplate) -> set[str]:
    names = set(variables(t.scaffold)) | {t.dependent}
    for args in t.slots:
        names.update(args)
    for c in t.constraints:
        names.update(variables(c.expression))
    return names


def _scaffold_blocks(e: Expression, out: set[str]) -> None:
    if e.kind == CALL:
        out.add(e.name)
    for child in e.children:
        _scaffold_blocks(child, out)


def run_search(config: SearchConfig, d: Dataset, template: TargetTemplate,
               sink: Callable[[ProgressEvent], None] | None = None,
               should_stop: Callable[[], bool] | None = None,
               on_generation: Callable[[int, int], None] | None = None,
               ) -> ParetoArchive:
    """Evolve slot fillings until the budget is exhausted.

    Emits a ProgressEvent to the sink for every frontier improvement, in
    archive-update order.  Deterministic mode (single worker) makes the
    whole event sequence a pure function of (config, dataset, template);
    its event timestamps are generation numbers rather than wall time.
    on_generation(generation, evaluations so far) is called after each
    completed generation; a caller may block inside it to hold the search
    at a generation boundary.
    """
    if config.generations is None and config.time_budget is None:
        raise SearchError("config needs a generation or time budget")
    missing = _template_columns(template) - set(d.names)
    if missing:
        raise SearchError(
            "template references unknown columns: " + ", ".join(sorted(missing)))
    used: set[str] = set()
    _scaffold_blocks(template.scaffold, used)
    disabled = used - set(config.blocks)
    if disabled:
        raise SearchError(
            "scaffold uses disabled blocks: " + ", ".join(sorted(disabled)))

    rng = np.random.default_rng(config.seed)
    assignment = split(d, config.split, config.seed)
    signature = template.slots
    y = d.column(template.dependent)
    start = time.monotonic()
    archive = ParetoArchive()
    events: list[ProgressEvent] = []
    cache: dict[tuple[Expression, ...],
                tuple[float, float, Expression, int,
                      tuple[Expression, ...]] | None] = {}
    # constant polishing is expensive; an assignment is tuned at most once
    tuned: set[tuple[Expression, ...]] = set()

    def compose(slots: tuple[Expression, ...]) -> Expression:
        filled = substitute_slots(template.scaffold,
                                  {i + 1: t for i, t in enumerate(slots)})
        return _canon(filled, config.blocks)

    def fill_constraints(slots: tuple[Expression, ...]) -> list[Constraint]:
        mapping = {i + 1: t for i, t in enumerate(slots)}
        return [Constraint(substitute_slots(c.expression, mapping),
                           c.relation, c.bound)
                for c in template.constraints]

    evaluations = [0]
    fn = METRICS[config.metric] if isinstance(config.metric, str) \
        else config.metric
    ones = np.ones(d.n_rows)
    # judging a tree at its best affine amplitude lets structurally right
    # candidates beat flat ones long before their constants are tuned
    can_scale = template.scaffold.kind == SLOT \
        and {"add", "multiply"} <= set(config.blocks)

    def rescale(slots: tuple[Expression, ...],
                train: float) -> tuple[tuple[Expression, ...], Expression,
                                       tuple[float, float]] | None:
        monomials = _additive_terms(slots[0])
        if not monomials or len(monomials) > 8:
            return None
        columns = []
        for sign, term in monomials:
            vals, ok = evaluate_batch(term, d)
            if not ok or not np.all(np.isfinite(vals)):
                return None
            columns.append(sign * vals)
        columns.append(ones)
        design = np.column_stack(columns)
        truth = y[assignment.train]
        try:
            coefs, *_ = np.linalg.lstsq(design[assignment.train], truth,
                                        rcond=None)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(coefs)):
            return None
        with np.errstate(over="ignore", invalid="ignore"):
            preview = float(fn(truth, design[assignment.train] @ coefs))
        if not preview < train - abs(train) * 1e-9 - 1e-15:
            return None
        pieces = []
        for weight, (sign, term) in zip(coefs, monomials):
            c = float(weight) * sign
            if c != 0.0:
                pieces.append(call("multiply", real(c), term))
        if float(coefs[-1]) != 0.0 or not pieces:
            pieces.append(real(float(coefs[-1])))
        rebuilt = pieces[0]
        for piece in pieces[1:]:
            rebuilt = call("add", rebuilt, piece)
        scaled = (_canon(rebuilt, config.blocks),)
        if not _admissible(scaled, config):
            return None
        composed = compose(scaled)
        vals = _score_values(composed, d, fill_constraints(scaled))
        if vals is None:
            return None
        pair = _metric_pair(fn, y, vals, assignment)
        if pair[0] > train:
            return None
        return scaled, composed, pair

    def evaluate(slots: tuple[Expression, ...],
                 generation: int) -> Candidate | None:
        evaluations[0] += 1
        cached = cache.get(slots, False)
        if cached is False:
            composed = compose(slots)
            values = _score_values(composed, d, fill_constraints(slots))
            if values is None:
                cached = None
            else:
                train, validate = _metric_pair(fn, y, values, assignment)
                out = slots
                if can_scale:
                    better = rescale(slots, train)
                    if better is not None:
                        out, composed, (train, validate) = better
                cached = (train, validate, composed,
                          complexity(composed, config.profile), out)
            if len(cache) > 200_000:
                cache.clear()
            cache[slots] = cached
            if cached is not None and cached[4] is not slots:
                cache[cached[4]] = cached
        if cached is None:
            return None
        return Candidate(expression=cached[2], slots=cached[4],
                         train_fitness=cached[0], validation_fitness=cached[1],
                         complexity=cached[3], generation=generation)

    def emit(c: Candidate, generation: int) -> bool:
        if not archive.insert(c):
            return False
        seconds = float(generation) if config.deterministic \
            else time.monotonic() - start
        event = ProgressEvent(seconds=seconds, generation=generation,
                              candidate=c)
        events.append(event)
        if sink is not None:
            sink(event)
        return True

    def out_of_budget(generation: int) -> bool:
        if should_stop is not None and should_stop():
            return True
        if config.generations is not None and generation >= config.generations:
            return True
        if config.time_budget is not None \
                and time.monotonic() - start >= config.time_budget:
            return True
        return False

    # seed population: plain column passthroughs, the train-mean constant,
    # then random trees
    seeds: list[tuple[Expression, ...]] = []
    mean = float(np.mean(y[assignment.train]))
    seeds.append(tuple(real(mean) for _ in signature))
    width = max(len(args) for args in signature) if signature else 0
    for k in range(width):
        seeds.append(tuple(var(args[k % len(args)]) if args else real(mean)
                           for args in signature))
    while len(seeds) < config.population_size:
        seeds.append(tuple(_random_tree(rng, args, config, max_depth=3)
                           for args in signature))
    seeds = [tuple(_canon(t, config.blocks) for t in s) for s in seeds]
    seeds = [s for s in seeds if _admissible(s, config)]

    population: list[Candidate] = []
    generation = 0
    for slots in seeds:
        candidate = evaluate(slots, generation)
        if candidate is not None:
            population.append(candidate)
            emit(candidate, generation)
    refill_attempts = 0
    while not population and refill_attempts < 50:
        refill_attempts += 1
        slots = tuple(_canon(_random_tree(rng, args, config, 3),
                             config.blocks) for args in signature)
        candidate = evaluate(slots, generation)
        if candidate is not None:
            population.append(candidate)
            emit(candidate, generation)
    if not population:
        raise SearchError("could not find any valid candidate to start from")

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    best_train = math.inf
    stall = 0
    burnin = 0
    try:
        while not out_of_budget(generation):
            generation += 1
            offspring = propose(population, rng, config, template)
            if pool is not None:
                scored = list(pool.map(lambda sl: evaluate(sl, generation),
                                       offspring))
            else:
                scored = [evaluate(slots, generation) for slots in offspring]
            survivors = [c for c in scored if c is not None]
            survivors.sort(key=lambda c: c.train_fitness)

            # archive the raw offspring, then polish the constants of the
            # frontier improvers and the few best of the generation
            to_tune: list[int] = []
            for i, c in enumerate(survivors):
                if emit(c, generation) and len(to_tune) < 6:
                    to_tune.append(i)
            for i in range(min(config.tune_top, len(survivors))):
                if i not in to_tune:
                    to_tune.append(i)
            for i in to_tune:
                c = survivors[i]
                if c.slots in tuned:
                    continue
                tuned.add(c.slots)
                spots = _constant_positions(c.slots)
                if not spots or len(spots) > 10:
                    continue
                better = _tune_assignment(c.slots, template.scaffold, d,
                                          assignment, config.metric, config,
                                          template.dependent,
                                          template.constraints)
                better = tuple(_canon(t, config.blocks) for t in better)
                if not _admissible(better, config):
                    continue
                if better != c.slots:
                    improved = evaluate(better, generation)
                    if improved is not None \
                            and improved.train_fitness <= c.train_fitness:
                        survivors[i] = improved
                        emit(improved, generation)

            # a run that has stopped finding better fits only re-treads its
            # converged pool; reseeding spends the leftover budget on fresh
            # starts while the archive keeps everything already won
            gen_best = min((c.train_fitness for c in survivors),
                           default=math.inf)
            threshold = best_train * (1.0 - 1e-3) - 1e-15 \
                if math.isfinite(best_train) else math.inf
            if gen_best < threshold:
                best_train = gen_best
                stall = 0
            else:
                stall += 1

            if config.restart_after is not None \
                    and stall >= config.restart_after:
                stall = 0
                best_train = math.inf
                # elites would recapture the pool instantly; hold them out
                # long enough for new motifs to reach the archive
                burnin = 50
                reseeded: list[Candidate] = []
                attempts = 0
                while len(reseeded) < config.population_size \
                        and attempts < config.population_size * 20:
                    attempts += 1
                    slots = tuple(_canon(_random_tree(rng, args, config,
                                                      max_depth=3),
                                         config.blocks) for args in signature)
                    if not _admissible(slots, config):
                        continue
                    candidate = evaluate(slots, generation)
                    if candidate is not None:
                        reseeded.append(candidate)
                        emit(candidate, generation)
                if reseeded:
                    population = reseeded
            else:
                elite = [] if burnin > 0 \
                    else archive.frontier()[:max(2, config.population_size // 4)]
                if burnin > 0:
                    burnin -= 1
                merged = survivors + population
                population = list(elite)
                while len(population) < config.population_size and merged:
                    population.append(_tournament(merged, rng))
            if on_generation is not None:
                on_generation(generation, evaluations[0])
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)
    return archive
