"""Event-level and user-level latency metrics and their treatment effects."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .ingest import Covariates, EventLog
from .stats import (
    StatsError,
    TestResult,
    cluster_bootstrap_quantile_diff,
    grouped_quantile,
    quantile,
    welch_t_test,
)

QUANTILE_PRESETS = {"p50": 0.5, "p75": 0.75, "p90": 0.9}


@dataclass(frozen=True)
class UserMetricValue:
    user_id: str
    value: float | None  # None means MISSING
    event_count: int

    @property
    def missing(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class UserMetricValues:
    """Per-user metric values aligned row-for-row with a :class:`Covariates`.

    Missing users carry NaN in ``values`` and zero in ``event_counts``.
    """

    user_ids: np.ndarray
    values: np.ndarray
    event_counts: np.ndarray

    def __len__(self) -> int:
        return int(self.values.size)

    def __iter__(self) -> Iterator[UserMetricValue]:
        for u, v, c in zip(self.user_ids, self.values, self.event_counts):
            yield UserMetricValue(u, None if math.isnan(v) else float(v), int(c))

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @classmethod
    def from_values(cls, values, user_ids=None, event_counts=None) -> "UserMetricValues":
        values = np.asarray(values, dtype=float)
        if user_ids is None:
            user_ids = np.array([f"u{i}" for i in range(values.size)], dtype=object)
        if event_counts is None:
            event_counts = (~np.isnan(values)).astype(np.int64)
        return cls(np.asarray(user_ids, dtype=object), values, np.asarray(event_counts, dtype=np.int64))


def _user_codes(events: EventLog, covariates: Covariates) -> np.ndarray:
    index = covariates.index()
    return np.fromiter((index.get(u, -1) for u in events.user_id), dtype=np.int64, count=len(events))


def user_level_values(events: EventLog, covariates: Covariates, q: float) -> UserMetricValues:
    """Quantile ``q`` of each assigned user's own events; users without events are MISSING.

    Events from users outside ``covariates`` are ignored.
    """
    codes = _user_codes(events, covariates)
    keep = codes >= 0
    codes = codes[keep]
    n = len(covariates)
    vals = grouped_quantile(events.value[keep], codes, q, n)
    counts = np.bincount(codes, minlength=n).astype(np.int64)
    return UserMetricValues(covariates.user_ids, vals, counts)


def _split(values: UserMetricValues, covariates: Covariates):
    obs = values.observed
    t = values.values[obs & covariates.treated]
    c = values.values[obs & ~covariates.treated]
    return t, c


def user_level_ate(values: UserMetricValues, covariates: Covariates) -> TestResult:
    """Welch test on present user values, treatment minus control."""
    t, c = _split(values, covariates)
    if t.size < 2 or c.size < 2:
        raise StatsError(f"need >= 2 non-missing users per bucket (treatment {t.size}, control {c.size})")
    res = welch_t_test(t, c)
    n_t = int(covariates.treated.sum())
    n_c = len(covariates) - n_t
    details = {
        "level": "user",
        "missing_treatment": n_t - t.size,
        "missing_control": n_c - c.size,
        "missing_fraction_treatment": (n_t - t.size) / n_t,
        "missing_fraction_control": (n_c - c.size) / n_c,
    }
    return _with_details(res, details)


def _with_details(res: TestResult, extra: dict) -> TestResult:
    merged = dict(res.details)
    merged.update(extra)
    return TestResult(res.estimate, res.std_error, res.statistic, res.p_value, res.method,
                      res.n_treatment, res.n_control, res.df, res.degenerate, merged)


def event_level_quantile(event_values, q: float) -> float:
    """Quantile over the pooled events of one bucket."""
    arr = np.asarray(event_values.value if isinstance(event_values, EventLog) else event_values, dtype=float)
    if arr.size == 0:
        raise StatsError("bucket has no events")
    return quantile(arr, q)


def events_by_user(events: EventLog, covariates: Covariates) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Split events into per-user arrays for each bucket (users with no events omitted)."""
    codes = _user_codes(events, covariates)
    keep = codes >= 0
    codes = codes[keep]
    vals = events.value[keep]
    order = np.argsort(codes, kind="stable")
    codes = codes[order]
    vals = vals[order]
    users, starts = np.unique(codes, return_index=True)
    chunks = np.split(vals, starts[1:]) if vals.size else []
    treated_mask = covariates.treated[users] if users.size else np.zeros(0, dtype=bool)
    treatment = [chunks[i] for i in np.flatnonzero(treated_mask)]
    control = [chunks[i] for i in np.flatnonzero(~treated_mask)]
    return treatment, control


def event_level_ate(events: EventLog, covariates: Covariates, q: float,
                    n_boot: int = 1000, seed: int = 0) -> TestResult:
    """Pooled-event quantile difference with a user-clustered bootstrap p-value."""
    treatment, control = events_by_user(events, covariates)
    res = cluster_bootstrap_quantile_diff(treatment, control, q, n_boot=n_boot, seed=seed)
    return _with_details(res, {"level": "event"})


def default_min_events(q: float) -> int:
    if q >= 1.0:
        return math.inf
    return max(2, math.ceil(1.0 / (1.0 - q) - 1e-9))


def few_event_diagnostic(values: UserMetricValues, q: float, min_events: int | None = None) -> dict:
    """Share of present users with too few events for a stable per-user quantile.

    Diagnostic only; high user-level percentiles are biased low for such users
    and nothing here corrects that.
    """
    if min_events is None:
        min_events = default_min_events(q)
    present = values.observed
    n_present = int(present.sum())
    flagged = int(np.count_nonzero(values.event_counts[present] < min_events))
    return {
        "quantile": float(q),
        "min_events": min_events if math.isfinite(min_events) else None,
        "users_present": n_present,
        "users_flagged": flagged,
        "flagged_fraction": flagged / n_present if n_present else 0.0,
    }


def per_device_ate(values: UserMetricValues, covariates: Covariates) -> list[dict]:
    """User-level ATE within each device class, where both buckets have >= 2 present users."""
    rows = []
    obs = values.observed
    for code, name in enumerate(covariates.device_names):
        in_dev = covariates.device == code
        t = values.values[obs & in_dev & covariates.treated]
        c = values.values[obs & in_dev & ~covariates.treated]
        row = {"device_class": name, "n_treatment": int(t.size), "n_control": int(c.size)}
        try:
            res = welch_t_test(t, c)
            row.update(estimate=res.estimate, p_value=res.p_value)
        except StatsError:
            row.update(estimate=None, p_value=None)
        rows.append(row)
    return rows
