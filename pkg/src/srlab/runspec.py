"""Run specifications: a JSON file describing one batch search run.

A spec names the data source (CSV file, expression tabulation, or
cumulative integral), derived columns, the search template and engine
settings, and where artifacts go.  Everything is validated up front;
a run never starts from a half-parsed spec.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .dataset import (
    Axis,
    Dataset,
    QuadratureRequest,
    SamplePlan,
    derive_column,
    import_csv,
    quadrature,
    tabulate,
)
from .expr import Expression, ExpressionError, parse
from .search import Constraint, SearchConfig, SearchError, SplitSpec, TargetTemplate


class RunSpecError(ValueError):
    """Raised when a run specification file cannot be validated."""


@dataclass(frozen=True)
class OutputPlan:
    """Artifact locations, resolved relative to the spec file."""

    directory: Path
    archive: str = "archive.csv"
    residuals: str = "residuals.csv"
    log: str = "run.log"
    figures: bool = True
    export_digits: int = 17

    def __post_init__(self):
        if self.export_digits not in (4, 17):
            raise RunSpecError("export digits must be 4 or 17")

    def path(self, name: str) -> Path:
        return self.directory / name


@dataclass(frozen=True)
class RunSpec:
    """A fully validated description of one search run."""

    source: Mapping[str, Any]
    derived: tuple[tuple[str, Expression], ...]
    template: TargetTemplate
    config: SearchConfig
    output: OutputPlan
    polish: Mapping[str, Any] | None = None


_SEARCH_KEYS = {
    "blocks", "integer_constants", "metric", "seed", "generations",
    "time_budget", "population_size", "mutation_rate", "crossover_rate",
    "tuner_iterations", "tune_top", "allow_nested_trig", "restart_after",
    "workers", "deterministic",
}


def _parse_expression(text: Any, where: str) -> Expression:
    if not isinstance(text, str):
        raise RunSpecError(f"{where} must be an expression string")
    try:
        return parse(text)
    except ExpressionError as exc:
        raise RunSpecError(f"{where}: {exc}") from None


def _build_axis(raw: Mapping[str, Any]) -> Axis:
    if not isinstance(raw, Mapping) or "name" not in raw:
        raise RunSpecError("each axis needs at least a name")
    name = raw["name"]
    if "values" in raw:
        return Axis(name, "explicit", values=tuple(float(v) for v in raw["values"]))
    kind = raw.get("kind", "uniform")
    if kind not in ("uniform", "chebyshev"):
        raise RunSpecError(f"unknown axis kind {kind!r}")
    for key in ("low", "high", "count"):
        if key not in raw:
            raise RunSpecError(f"axis {name!r} is missing {key!r}")
    return Axis(name, kind, low=float(raw["low"]), high=float(raw["high"]),
                count=int(raw["count"]))


def _validate_source(raw: Any, base: Path) -> Mapping[str, Any]:
    if not isinstance(raw, Mapping) or len(raw) != 1:
        raise RunSpecError(
            "dataset must be exactly one of: csv, tabulate, quadrature")
    kind, body = next(iter(raw.items()))
    if kind == "csv":
        if not isinstance(body, str):
            raise RunSpecError("csv source must be a file path string")
        return {"csv": str((base / body))}
    if kind == "tabulate":
        e = _parse_expression(body.get("expression"), "tabulate expression")
        axes = body.get("axes")
        if not axes:
            raise RunSpecError("tabulate needs at least one axis")
        plan = SamplePlan(tuple(_build_axis(a) for a in axes))
        return {"tabulate": {"expression": e, "plan": plan,
                             "name": body.get("name", "value")}}
    if kind == "quadrature":
        request = QuadratureRequest(
            integrand=_parse_expression(body.get("integrand"), "integrand"),
            variable=body.get("variable", "t"),
            lower=body.get("lower", 0.0),
            tolerance=float(body.get("tolerance", 1e-12)),
            subtract=(_parse_expression(body["subtract"], "subtract")
                      if "subtract" in body else None),
            subtract_antiderivative=(
                _parse_expression(body["subtract_antiderivative"],
                                  "subtract antiderivative")
                if "subtract_antiderivative" in body else None),
        )
        points = body.get("points")
        if isinstance(points, Mapping):
            low, high = float(points["low"]), float(points["high"])
            count = int(points["count"])
            if count < 2:
                raise RunSpecError("quadrature needs at least two points")
            xs = tuple(low + (high - low) * i / (count - 1)
                       for i in range(count))
        elif isinstance(points, (list, tuple)) and points:
            xs = tuple(float(v) for v in points)
        else:
            raise RunSpecError("quadrature needs points (a list or low/high/count)")
        return {"quadrature": {"request": request, "points": xs}}
    raise RunSpecError(f"unknown dataset source {kind!r}")


def _build_config(raw: Any) -> SearchConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise RunSpecError("search settings must be an object")
    unknown = set(raw) - _SEARCH_KEYS - {"split"}
    if unknown:
        raise RunSpecError("unknown search settings: "
                           + ", ".join(sorted(unknown)))
    kwargs: dict[str, Any] = {k: raw[k] for k in raw if k in _SEARCH_KEYS}
    if "blocks" in kwargs:
        kwargs["blocks"] = tuple(kwargs["blocks"])
    if "split" in raw:
        s = raw["split"]
        if not isinstance(s, Mapping) or "kind" not in s:
            raise RunSpecError("split must be an object with a kind")
        kwargs["split"] = SplitSpec(
            s["kind"],
            train_percent=float(s.get("train_percent", 75.0)),
            validate_percent=float(s.get("validate_percent", 75.0)))
    try:
        return SearchConfig(**kwargs)
    except (SearchError, TypeError) as exc:
        raise RunSpecError(f"invalid search settings: {exc}") from None


def _build_template(text: Any, raw_constraints: Any) -> TargetTemplate:
    if not isinstance(text, str):
        raise RunSpecError("template must be a string like 'y = f1(x)'")
    constraints = []
    for raw in raw_constraints or ():
        if not isinstance(raw, Mapping):
            raise RunSpecError("each constraint needs expression/relation/bound")
        try:
            e = parse(raw.get("expression", ""), allow_slots=True)
        except ExpressionError as exc:
            raise RunSpecError(f"constraint expression: {exc}") from None
        try:
            bound = float(raw.get("bound"))
        except (TypeError, ValueError):
            raise RunSpecError("constraint bound must be a number") from None
        try:
            constraints.append(Constraint(e, raw.get("relation", ""), bound))
        except SearchError as exc:
            raise RunSpecError(str(exc)) from None
    try:
        return TargetTemplate.from_text(text, constraints)
    except (SearchError, ExpressionError) as exc:
        raise RunSpecError(f"invalid template: {exc}") from None


def _validate_polish(raw: Any) -> Mapping[str, Any] | None:
    if raw is None:
        return None
    if not isinstance(raw, Mapping):
        raise RunSpecError("polish must be an object")
    if "bifocal" in raw:
        body = raw["bifocal"]
        count = int(body.get("count", 0))
        if count < 1:
            raise RunSpecError("bifocal polish needs a positive count")
        return {"bifocal": {"count": count,
                            "x_column": body.get("x_column", "x"),
                            "y_column": body.get("y_column", "value")}}
    if "basis" in raw:
        terms = tuple(_parse_expression(t, "basis term")
                      for t in raw["basis"])
        if not terms:
            raise RunSpecError("polish basis must not be empty")
        target = raw.get("target")
        if not isinstance(target, str):
            raise RunSpecError("polish needs a target column")
        return {"basis": {"terms": terms, "target": target}}
    raise RunSpecError("polish must specify bifocal or basis")


def load_runspec(path) -> RunSpec:
    """Read and fully validate a JSON run specification file."""
    spec_path = Path(path)
    try:
        raw = json.loads(spec_path.read_text())
    except OSError as exc:
        raise RunSpecError(f"cannot read spec: {exc}") from None
    except json.JSONDecodeError as exc:
        raise RunSpecError(f"spec is not valid JSON: {exc}") from None
    return runspec_from_mapping(raw, spec_path.resolve().parent)


def runspec_from_mapping(raw: Any, base: Path) -> RunSpec:
    """Validate an already-parsed spec; paths resolve against `base`."""
    if not isinstance(raw, Mapping):
        raise RunSpecError("spec must be a JSON object")
    unknown = set(raw) - {"dataset", "derive", "template", "constraints",
                          "search", "output", "polish"}
    if unknown:
        raise RunSpecError("unknown spec sections: " + ", ".join(sorted(unknown)))
    if "dataset" not in raw:
        raise RunSpecError("spec needs a dataset section")
    if "template" not in raw:
        raise RunSpecError("spec needs a template")
    source = _validate_source(raw["dataset"], base)
    derived = []
    for item in raw.get("derive", ()):
        if not isinstance(item, Mapping) or "name" not in item:
            raise RunSpecError("each derived column needs name and expression")
        derived.append((str(item["name"]),
                        _parse_expression(item.get("expression"),
                                          f"derived column {item['name']!r}")))
    template = _build_template(raw["template"], raw.get("constraints"))
    config = _build_config(raw.get("search"))
    out_raw = raw.get("output") or {}
    if not isinstance(out_raw, Mapping):
        raise RunSpecError("output must be an object")
    directory = base / out_raw.get("directory", "out")
    output = OutputPlan(
        directory=directory,
        archive=out_raw.get("archive", "archive.csv"),
        residuals=out_raw.get("residuals", "residuals.csv"),
        log=out_raw.get("log", "run.log"),
        figures=bool(out_raw.get("figures", True)),
        export_digits=int(out_raw.get("export_digits", 17)))
    return RunSpec(source=source, derived=tuple(derived), template=template,
                   config=config, output=output,
                   polish=_validate_polish(raw.get("polish")))


def build_dataset(spec: RunSpec) -> Dataset:
    """Ingest the source and append every derived column, in order."""
    source = spec.source
    if "csv" in source:
        d = import_csv(source["csv"])
    elif "tabulate" in source:
        body = source["tabulate"]
        d = tabulate(body["expression"], body["plan"], name=body["name"])
    else:
        body = source["quadrature"]
        d = quadrature(body["request"], body["points"])
    for name, e in spec.derived:
        d = derive_column(d, name, e)
    return d
