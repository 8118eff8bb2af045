"""srlab: a symbolic-regression laboratory.

Expression search over tabulated data with a best-per-complexity archive,
plus the surrounding workflow: data synthesis and preparation, expression
canonicalization, linear polishing, constant identification, a command
line runner, and an HTTP session service.
"""

from .expr import (
    BuildingBlock,
    CATALOG,
    Expression,
    ExpressionError,
    ParseError,
    complexity,
    complexity_profile,
    evaluate,
    evaluate_batch,
    format_expression,
    parse,
)

__version__ = "0.1.0"
