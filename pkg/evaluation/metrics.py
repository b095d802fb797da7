"""
Test-set metrics. Every metric returns a MetricsReport so trials can be
aggregated into mean and standard error.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from lab.exceptions import PreconditionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsReport:
    name: str
    value: float
    standard_error: float = 0.0
    n_trials: int = 1

    def __post_init__(self):
        if self.n_trials < 1:
            raise PreconditionError(f"n_trials must be >= 1, got {self.n_trials}")
        if not self.standard_error >= 0:
            raise PreconditionError(f"Standard error must be >= 0, got {self.standard_error}")
        if self.n_trials == 1 and self.standard_error != 0:
            raise PreconditionError("A single trial has no standard error")

    def renamed(self, name):
        return MetricsReport(name, self.value, self.standard_error, self.n_trials)

    def as_row(self):
        row = asdict(self)
        row["metric"] = row.pop("name")
        row["mean"] = row.pop("value")
        return row


def aggregate_reports(reports):
    """Mean over trials and one standard error, std(ddof=1) / sqrt(n)."""
    reports = list(reports)
    if not reports:
        raise PreconditionError("Nothing to aggregate")
    names = {report.name for report in reports}
    if len(names) != 1:
        raise PreconditionError(f"Cannot aggregate different metrics {sorted(names)}")

    values = np.array([report.value for report in reports], dtype=np.float64)
    n = len(values)
    standard_error = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return MetricsReport(reports[0].name, float(values.mean()), standard_error, n)


def test_loglik_class(predictor, test_set, name="test_loglik"):
    """Mean log q(y_true | x) over the test set."""
    value = float(np.mean(predictor.log_density_class(test_set.inputs, test_set.targets)))
    return MetricsReport(name, value)


def test_loglik_reg(predictor, test_set, noise=None, name="test_loglik"):
    """
    Mean predictive log density of the test targets.

    When the targets were standardised the density is reported in original
    units, i.e. shifted by -log(std_y).
    """
    log_densities = predictor.log_density_reg(test_set.inputs, test_set.targets, noise)
    value = float(np.mean(log_densities)) - float(np.log(test_set.target_scale()))
    return MetricsReport(name, value)


def test_rmse(predictor, test_set, noise=None, name="test_rmse"):
    """RMSE of the predictive mean in original target units."""
    mu, _ = predictor.predict_reg(test_set.inputs, noise)
    residual = (mu - test_set.targets) * test_set.target_scale()
    return MetricsReport(name, float(np.sqrt(np.mean(residual ** 2))))


def misclass_rate(predictor, test_set, name="misclass_rate"):
    # argmax breaks ties toward the lowest class index
    predicted = np.argmax(predictor.predict_class(test_set.inputs), axis=-1)
    return MetricsReport(name, float(np.mean(predicted != test_set.targets)))


def classification_reports(predictor, test_set, misclass_name="misclass_rate", loglik_name="test_loglik"):
    """misclass_rate and test_loglik from a single pass of predictor.predict_class."""
    log_probs = predictor.predict_class(test_set.inputs)
    labels = np.asarray(test_set.targets, dtype=np.int64)
    predicted = np.argmax(log_probs, axis=-1)
    picked = np.take_along_axis(log_probs, labels[:, None], axis=-1)[:, 0]
    return [
        MetricsReport(misclass_name, float(np.mean(predicted != labels))),
        MetricsReport(loglik_name, float(np.mean(picked))),
    ]
