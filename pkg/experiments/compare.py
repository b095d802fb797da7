"""
Comparison of finished runs.

Runs are named label=path, where path is a run directory or its metrics.csv.
Assertions are single comparisons over label.metric terms, numbers, + - * /,
and abs/min/max, e.g.

    sgd.kl_to_hmc >= 10 * sgld.kl_to_hmc
    abs(distilled.test_loglik - sgld.test_loglik) <= 0.15
"""
import ast
import logging
import operator
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from lab.exceptions import ConfigError, DataFormatError, PreconditionError
from utils import atomic_write_text
from .runner import METRICS_COLUMNS

logger = logging.getLogger(__name__)

BINARY_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
}
COMPARE_OPS = {
    ast.Gt: operator.gt,
    ast.GtE: operator.ge,
    ast.Lt: operator.lt,
    ast.LtE: operator.le,
    ast.Eq: operator.eq,
    ast.NotEq: operator.ne,
}
FUNCTIONS = {"abs": abs, "min": min, "max": max}


def read_metrics(path):
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise DataFormatError(path, "metrics file not found") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(path, f"unreadable metrics file ({e})") from e
    if list(frame.columns) != METRICS_COLUMNS:
        raise DataFormatError(path, f"expected columns {METRICS_COLUMNS}, got {list(frame.columns)}")
    return frame.set_index("metric")


def parse_run_argument(text, position):
    """'sgld=runs/toy2d_sgld' -> ('sgld', path). Without a label the run directory name is used."""
    label, sep, path = text.partition("=")
    if not sep:
        path = text
        run_dir = Path(path)
        if run_dir.suffix == ".csv":
            run_dir = run_dir.parent
        label = run_dir.name if run_dir.name.isidentifier() else f"run{position}"
    label = label.strip()
    if not label.isidentifier():
        raise ConfigError("runs", f"run label {label!r} must be an identifier")
    return label, Path(path.strip())


def parse_run_arguments(texts):
    runs = {}
    for position, text in enumerate(texts):
        label, path = parse_run_argument(text, position)
        if label in runs:
            raise ConfigError("runs", f"run label {label!r} used twice")
        runs[label] = path
    return runs


@dataclass(frozen=True)
class AssertionResult:
    expression: str
    passed: bool
    lhs: float
    rhs: float

    def describe(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}: {self.expression}  ({self.lhs:.6g} vs {self.rhs:.6g})"


def _evaluate(node, values, expression):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return float(node.value)

    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        operand = _evaluate(node.operand, values, expression)
        return -operand if isinstance(node.op, ast.USub) else operand

    if isinstance(node, ast.BinOp) and type(node.op) in BINARY_OPS:
        left = _evaluate(node.left, values, expression)
        right = _evaluate(node.right, values, expression)
        try:
            return BINARY_OPS[type(node.op)](left, right)
        except ZeroDivisionError as e:
            raise ConfigError("--assert", f"division by zero in {expression!r}") from e

    if (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id in FUNCTIONS
        and node.args
        and not node.keywords
    ):
        return FUNCTIONS[node.func.id](*(_evaluate(arg, values, expression) for arg in node.args))

    if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
        label, metric = node.value.id, node.attr
        if label not in values:
            raise ConfigError("--assert", f"unknown run {label!r} in {expression!r}")
        if metric not in values[label]:
            raise ConfigError("--assert", f"run {label} has no metric {metric!r}")
        return float(values[label][metric])

    raise ConfigError("--assert", f"unsupported term {ast.unparse(node)!r} in {expression!r}")


def evaluate_assertion(expression, values):
    """Evaluate 'lhs <op> rhs' against {label: {metric: mean}}."""
    try:
        tree = ast.parse(expression.strip(), mode="eval")
    except SyntaxError as e:
        raise ConfigError("--assert", f"cannot parse {expression!r} ({e.msg})") from e

    body = tree.body
    if not isinstance(body, ast.Compare) or len(body.ops) != 1:
        raise ConfigError("--assert", f"{expression!r} must be a single comparison")
    compare = COMPARE_OPS.get(type(body.ops[0]))
    if compare is None:
        raise ConfigError("--assert", f"unsupported comparison in {expression!r}")

    lhs = _evaluate(body.left, values, expression)
    rhs = _evaluate(body.comparators[0], values, expression)
    return AssertionResult(expression, bool(compare(lhs, rhs)), lhs, rhs)


@dataclass(frozen=True)
class Comparison:
    labels: list
    # one row per shared metric: a mean per run, deltas against the first run, ordering
    table: pd.DataFrame
    values: dict

    def check(self, expressions):
        return [evaluate_assertion(expression, self.values) for expression in expressions]

    def to_text(self):
        return self.table.to_string(float_format=lambda value: f"{value:.6g}")

    def to_csv(self):
        return self.table.to_csv(float_format="%.17g")


def compare_runs(runs):
    """Align the shared metrics of two or more runs given as {label: path}."""
    runs = dict(runs)
    if len(runs) < 2:
        raise PreconditionError(f"Need at least two runs to compare, got {len(runs)}")

    frames = {label: read_metrics(path) for label, path in runs.items()}
    shared = sorted(set.intersection(*(set(frame.index) for frame in frames.values())))
    if not shared:
        raise PreconditionError(f"Runs {', '.join(frames)} share no metrics")

    labels = list(frames)
    table = pd.DataFrame({label: frames[label].loc[shared, "mean"].to_numpy() for label in labels}, index=shared)
    table.index.name = "metric"
    base = labels[0]
    for label in labels[1:]:
        table[f"delta_{label}"] = table[label] - table[base]
    table["ordering"] = [
        " < ".join(sorted(labels, key=lambda label: table.at[metric, label])) for metric in shared
    ]

    skipped = sorted(set().union(*(set(frame.index) for frame in frames.values())) - set(shared))
    if skipped:
        logger.info(f"Metrics not shared by every run: {', '.join(skipped)}")

    values = {label: frames[label]["mean"].to_dict() for label in labels}
    return Comparison(labels, table, values)


def write_comparison_csv(path, comparison):
    return atomic_write_text(path, comparison.to_csv())
