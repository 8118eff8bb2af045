"""Command line front end: batch runs from a spec file, or the session
service for interactive clients.

A batch run executes ingest, derived columns, the evolutionary search,
an optional linear polish, and finally exports the archive table, the
best model's residuals, a run log, and figures.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

from .dataset import DatasetError, export_csv
from .expr import ExpressionError, format_expression
from .polish import (
    BasisSpec,
    PolishError,
    arcsine_basis,
    bifocal_fit,
    export_fit_csv,
    linear_fit,
)
from .runspec import RunSpec, RunSpecError, build_dataset, load_runspec
from .search import (
    ProgressEvent,
    SearchError,
    residuals,
    run_search,
    split,
)

_USAGE_ERRORS = (RunSpecError, DatasetError, SearchError, ExpressionError,
                 PolishError)


def _float_text(v: float, digits: int) -> str:
    return repr(float(v)) if digits == 17 else "%.*g" % (digits, v)


def write_archive_csv(path, frontier, digits: int) -> None:
    """Frontier table: complexity, fitnesses, and the expression text."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["complexity", "train_fitness",
                         "validation_fitness", "expression"])
        for c in frontier:
            writer.writerow([
                c.complexity,
                _float_text(c.train_fitness, digits),
                _float_text(c.validation_fitness, digits),
                format_expression(c.expression, digits=digits),
            ])


def _apply_overrides(spec: RunSpec, args: argparse.Namespace) -> RunSpec:
    config = spec.config
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.budget_seconds is not None:
        config = replace(config, time_budget=float(args.budget_seconds))
    if args.deterministic:
        config = replace(config, deterministic=True, workers=1)
    output = spec.output
    if args.export_digits is not None:
        output = replace(output, export_digits=args.export_digits)
    if config is not spec.config or output is not spec.output:
        spec = replace(spec, config=config, output=output)
    return spec


def _run_polish(spec: RunSpec, d, out_dir: Path, log) -> None:
    body = spec.polish
    if body is None:
        return
    if "bifocal" in body:
        opts = body["bifocal"]
        basis = arcsine_basis(opts["count"], x_column=opts["x_column"],
                              y_column=opts["y_column"])
        fit = bifocal_fit(d, opts["count"], x_column=opts["x_column"],
                          y_column=opts["y_column"])
    else:
        opts = body["basis"]
        basis = BasisSpec(opts["terms"], opts["target"])
        fit = linear_fit(d, basis)
    export_fit_csv(out_dir / "fit.csv", basis, fit)
    print(f"polish: max abs residual {fit.max_abs_residual:.6g} "
          f"({len(basis.basis) - len(fit.pruned)} terms kept)", file=log)


def cli_run(args: argparse.Namespace) -> int:
    try:
        spec = _apply_overrides(load_runspec(args.spec), args)
        d = build_dataset(spec)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = spec.output
    out.directory.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    log_lines: list[str] = []

    def sink(event: ProgressEvent) -> None:
        c = event.candidate
        log_lines.append(
            f"gen={event.generation} t={event.seconds:.3f} "
            f"cx={c.complexity} train={c.train_fitness:.17g} "
            f"val={c.validation_fitness:.17g} "
            f"expr={format_expression(c.expression)}")

    try:
        archive = run_search(spec.config, d, spec.template, sink=sink)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    frontier = archive.frontier()
    best = archive.best()
    write_archive_csv(out.path(out.archive), frontier, out.export_digits)
    table = residuals(best.expression, d, spec.template.dependent)
    export_csv(table, out.path(out.residuals), digits=out.export_digits)

    with open(out.path(out.log), "w", encoding="utf-8") as log:
        print(f"rows={d.n_rows} columns={','.join(d.names)}", file=log)
        print(f"template: {spec.template.dependent} (slots: "
              f"{len(spec.template.slots)})", file=log)
        print(f"metric={spec.config.metric} seed={spec.config.seed} "
              f"blocks={','.join(spec.config.blocks)}", file=log)
        for line in log_lines:
            print(line, file=log)
        try:
            _run_polish(spec, d, out.directory, log)
        except _USAGE_ERRORS as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"best: cx={best.complexity} "
              f"val={best.validation_fitness:.17g} "
              f"expr={format_expression(best.expression)}", file=log)
        if not spec.config.deterministic:
            print(f"elapsed={time.monotonic() - started:.2f}s", file=log)

    if out.figures:
        from . import report
        assignment = split(d, spec.config.split, spec.config.seed)
        report.staircase_figure(frontier, out.path("staircase.png"))
        report.fit_figure(d, spec.template.dependent, best.expression,
                          assignment, out.path("fit.png"))
        report.residual_figure(table, out.path("residuals.png"))

    print(f"archive: {out.path(out.archive)} ({len(frontier)} entries, "
          f"best val={best.validation_fitness:.6g})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srlab",
        description="Symbolic regression batch runs and session service.")
    parser.add_argument("spec", nargs="?", help="path to a JSON run spec")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-worker reproducible mode")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the search seed")
    parser.add_argument("--budget-seconds", type=float, default=None,
                        help="override the time budget")
    parser.add_argument("--export-digits", type=int, choices=(4, 17),
                        default=None, help="precision of exported numbers")
    parser.add_argument("--serve", nargs="?", type=int, const=8000,
                        default=None, metavar="PORT",
                        help="start the session service instead of a batch run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.serve is not None:
        from .service import serve
        serve(port=args.serve)
        return 0
    if args.spec is None:
        print("error: a spec path is required unless --serve is given",
              file=sys.stderr)
        return 2
    return cli_run(args)


if __name__ == "__main__":
    sys.exit(main())
