"""Sample ratio mismatch checks: assignment counts and metric presence."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .ingest import Covariates
from .metrics import UserMetricValues
from .stats import TestResult, one_proportion_test, two_proportion_test

DEFAULT_ALERT_THRESHOLD = 0.001


@dataclass(frozen=True)
class SrmReport:
    p_treatment: float  # share of treated users with the metric
    p_control: float
    delta_miss: float  # missing share in treatment minus missing share in control
    test: TestResult
    alert: bool
    alert_threshold: float = DEFAULT_ALERT_THRESHOLD

    def to_dict(self) -> dict:
        out = asdict(self)
        out["test"] = self.test.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SrmReport":
        data = dict(data)
        data["test"] = TestResult.from_dict(data["test"])
        return cls(**data)


def assignment_srm(n_treatment: int, n_control: int, expected_ratio: float = 0.5) -> TestResult:
    """Observed treatment share against the designed split."""
    total = n_treatment + n_control
    if total <= 0:
        raise ValueError("no users assigned")
    return one_proportion_test(n_treatment, total, expected_ratio, n_other=n_control)


def self_selection_srm(values: UserMetricValues, covariates: Covariates,
                       alert_threshold: float = DEFAULT_ALERT_THRESHOLD) -> SrmReport:
    """Two-proportion test on the share of users having at least one event."""
    treated = covariates.treated
    n_t = int(treated.sum())
    n_c = int(treated.size - n_t)
    if n_t == 0 or n_c == 0:
        raise ValueError(f"both buckets need users (treatment {n_t}, control {n_c})")
    has = values.event_counts >= 1
    k_t = int(np.count_nonzero(has & treated))
    k_c = int(np.count_nonzero(has & ~treated))
    return srm_from_counts(k_t, n_t, k_c, n_c, alert_threshold)


def srm_from_counts(k_t: int, n_t: int, k_c: int, n_c: int,
                    alert_threshold: float = DEFAULT_ALERT_THRESHOLD) -> SrmReport:
    test = two_proportion_test(k_t, n_t, k_c, n_c)
    p_t = k_t / n_t
    p_c = k_c / n_c
    return SrmReport(
        p_treatment=p_t,
        p_control=p_c,
        delta_miss=(1.0 - p_t) - (1.0 - p_c),
        test=test,
        alert=bool(test.p_value < alert_threshold),
        alert_threshold=float(alert_threshold),
    )
