"""Statistical primitives shared by every analysis path.

All tests are two-sided. Quantiles use linear interpolation on ``(n - 1) * q``
and every module goes through :func:`quantile` / :func:`grouped_quantile`, so
event-level, user-level and bootstrap numbers agree on one definition.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as st

METHODS = ("welch_t", "weighted_t", "two_proportion_z", "one_proportion_z", "cluster_bootstrap")


class StatsError(ValueError):
    """Raised when a test's preconditions do not hold."""


@dataclass(frozen=True)
class TestResult:
    """Outcome of a treatment-minus-control comparison."""

    __test__ = False  # keep pytest from collecting this class

    estimate: float
    std_error: float
    statistic: float
    p_value: float
    method: str
    n_treatment: int
    n_control: int
    df: float | None = None
    degenerate: bool = False
    details: dict = field(default_factory=dict)

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TestResult":
        return cls(**data)


def _as_finite_array(values, name: str = "values") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        arr = arr.ravel()
    if not np.all(np.isfinite(arr)):
        raise StatsError(f"{name} contains non-finite entries")
    return arr


def _check_q(q: float) -> float:
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise StatsError(f"quantile level must be in [0, 1], got {q}")
    return q


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile: ``v[lo] + (h - lo) * (v[lo+1] - v[lo])`` with ``h = (n-1) q``."""
    q = _check_q(q)
    arr = _as_finite_array(values)
    n = arr.size
    if n == 0:
        raise StatsError("quantile of an empty sample")
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    part = np.partition(arr, (lo, hi)) if hi != lo else np.partition(arr, lo)
    v_lo = float(part[lo])
    v_hi = float(part[hi])
    return v_lo + (h - lo) * (v_hi - v_lo)


def grouped_quantile(values: np.ndarray, groups: np.ndarray, q: float, n_groups: int) -> np.ndarray:
    """Per-group quantile for integer group codes in ``[0, n_groups)``.

    Groups without values come back as NaN. Same interpolation as :func:`quantile`.
    """
    q = _check_q(q)
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups, dtype=np.int64)
    out = np.full(n_groups, np.nan)
    if values.size == 0:
        return out
    order = np.lexsort((values, groups))
    v = values[order]
    counts = np.bincount(groups, minlength=n_groups)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    present = counts > 0
    cnt = counts[present]
    start = starts[present]
    h = (cnt - 1) * q
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(lo + 1, cnt - 1)
    v_lo = v[start + lo]
    v_hi = v[start + hi]
    out[present] = v_lo + (h - lo) * (v_hi - v_lo)
    return out


def expit(x):
    """Logistic function ``1 / (1 + exp(-x))``; accepts scalars or arrays."""
    x = np.asarray(x, dtype=float)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def _two_sided_t(statistic: float, df: float) -> float:
    return float(min(1.0, 2.0 * st.t.sf(abs(statistic), df)))


def _two_sided_z(statistic: float) -> float:
    return float(min(1.0, 2.0 * st.norm.sf(abs(statistic))))


def _welch_combine(mean_t, var_t, n_t, mean_c, var_c, n_c):
    """Combine per-group means and variances into (estimate, se, t, df)."""
    vt = var_t / n_t
    vc = var_c / n_c
    se = math.sqrt(vt + vc)
    estimate = mean_t - mean_c
    if se == 0.0:
        raise StatsError("zero variance in both groups")
    # Satterthwaite on variance shares, which cannot underflow
    ft = vt / (vt + vc)
    fc = vc / (vt + vc)
    df = 1.0 / (ft * ft / (n_t - 1) + fc * fc / (n_c - 1))
    return estimate, se, estimate / se, df


def welch_t_test(treatment, control) -> TestResult:
    """Welch two-sample t-test of ``mean(treatment) - mean(control)``."""
    t = _as_finite_array(treatment, "treatment")
    c = _as_finite_array(control, "control")
    if t.size < 2 or c.size < 2:
        raise StatsError(f"each group needs >= 2 values (got {t.size}, {c.size})")
    estimate, se, stat, df = _welch_combine(
        t.mean(), t.var(ddof=1), t.size, c.mean(), c.var(ddof=1), c.size
    )
    return TestResult(
        estimate=float(estimate),
        std_error=float(se),
        statistic=float(stat),
        p_value=_two_sided_t(stat, df),
        method="welch_t",
        n_treatment=int(t.size),
        n_control=int(c.size),
        df=float(df),
    )


def _weighted_moments(x: np.ndarray, w: np.ndarray):
    sw = w.sum()
    mean = (w * x).sum() / sw
    n_eff = sw * sw / (w * w).sum()
    # reliability-weighted variance rescaled to the Kish effective size
    var = (w * (x - mean) ** 2).sum() / sw * n_eff / (n_eff - 1.0)
    return mean, var, n_eff


def weighted_t_test(treatment, control, treatment_weights=None, control_weights=None) -> TestResult:
    """Welch-style t-test on weighted means with Kish effective sample sizes.

    Each group's variance of the weighted mean is ``s_w^2 / n_eff`` where
    ``n_eff = (sum w)^2 / sum w^2``; degrees of freedom follow Satterthwaite on
    the effective sizes. Unit weights reproduce :func:`welch_t_test`.
    """
    t = _as_finite_array(treatment, "treatment")
    c = _as_finite_array(control, "control")
    wt = np.ones_like(t) if treatment_weights is None else _as_finite_array(treatment_weights, "weights")
    wc = np.ones_like(c) if control_weights is None else _as_finite_array(control_weights, "weights")
    if wt.shape != t.shape or wc.shape != c.shape:
        raise StatsError("weights must align with values")
    if np.any(wt <= 0) or np.any(wc <= 0):
        raise StatsError("weights must be strictly positive")
    if t.size < 2 or c.size < 2:
        raise StatsError(f"each group needs >= 2 values (got {t.size}, {c.size})")
    mt, vt, nt = _weighted_moments(t, wt)
    mc, vc, nc = _weighted_moments(c, wc)
    estimate, se, stat, df = _welch_combine(mt, vt, nt, mc, vc, nc)
    return TestResult(
        estimate=float(estimate),
        std_error=float(se),
        statistic=float(stat),
        p_value=_two_sided_t(stat, df),
        method="weighted_t",
        n_treatment=int(t.size),
        n_control=int(c.size),
        df=float(df),
        details={"n_eff_treatment": float(nt), "n_eff_control": float(nc)},
    )


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> TestResult:
    """Pooled two-sample z-test of ``k1/n1 - k2/n2``.

    A pooled proportion of exactly 0 or 1 has no variance; the result is then
    flagged ``degenerate`` with ``p_value = 1``.
    """
    for k, n in ((k1, n1), (k2, n2)):
        if n <= 0 or k < 0 or k > n:
            raise StatsError(f"invalid counts k={k}, n={n}")
    p1 = k1 / n1
    p2 = k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    estimate = p1 - p2
    var = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)
    if var <= 0.0:
        return TestResult(estimate, 0.0, 0.0, 1.0, "two_proportion_z", n1, n2, degenerate=True)
    se = math.sqrt(var)
    z = estimate / se
    return TestResult(float(estimate), se, z, _two_sided_z(z), "two_proportion_z", int(n1), int(n2))


def one_proportion_test(k: int, n: int, expected: float, n_other: int | None = None) -> TestResult:
    """z-test of an observed share ``k/n`` against an expected share."""
    if n <= 0:
        raise StatsError("total count must be positive")
    if not 0.0 < expected < 1.0:
        raise StatsError("expected share must lie strictly between 0 and 1")
    share = k / n
    se = math.sqrt(expected * (1.0 - expected) / n)
    z = (share - expected) / se
    return TestResult(
        float(share - expected), se, z, _two_sided_z(z), "one_proportion_z",
        int(k), int(n - k if n_other is None else n_other),
    )


def _flatten_clusters(clusters: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arrays = [_as_finite_array(c, "events") for c in clusters]
    lengths = np.array([a.size for a in arrays], dtype=np.int64)
    flat = np.concatenate(arrays) if arrays else np.empty(0)
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1])).astype(np.int64)
    return flat, starts, lengths


def _resample_quantile(rng, flat, starts, lengths, q):
    n = lengths.size
    idx = rng.integers(0, n, size=n)
    lens = lengths[idx]
    total = int(lens.sum())
    if total == 0:
        return np.nan
    offsets = np.repeat(starts[idx] - (np.cumsum(lens) - lens), lens)
    return quantile(flat[np.arange(total) + offsets], q)


def cluster_bootstrap_quantile_diff(treatment_users, control_users, q: float,
                                    n_boot: int = 1000, seed: int = 0) -> TestResult:
    """Event-level quantile difference with users as the resampling unit.

    ``treatment_users`` / ``control_users`` are sequences of per-user event
    arrays. Users are drawn with replacement within each bucket and the pooled
    quantile recomputed per replicate; the two-sided p-value comes from the
    percentile interval, ``2 * min(P*(d <= 0), P*(d >= 0))`` with a +1
    correction so it is never exactly zero.
    """
    q = _check_q(q)
    if n_boot < 100:
        raise StatsError("n_boot must be >= 100")
    ft, st_, lt = _flatten_clusters(treatment_users)
    fc, sc, lc = _flatten_clusters(control_users)
    if ft.size == 0 or fc.size == 0:
        raise StatsError("each bucket needs at least one event")
    estimate = quantile(ft, q) - quantile(fc, q)
    rng = np.random.default_rng(seed)
    reps = np.empty(n_boot)
    for b in range(n_boot):
        reps[b] = _resample_quantile(rng, ft, st_, lt, q) - _resample_quantile(rng, fc, sc, lc, q)
    reps = reps[np.isfinite(reps)]
    below = np.count_nonzero(reps <= 0.0)
    above = np.count_nonzero(reps >= 0.0)
    m = reps.size
    p = min(1.0, 2.0 * min(below + 1, above + 1) / (m + 1))
    se = float(reps.std(ddof=1))
    return TestResult(
        estimate=float(estimate),
        std_error=se,
        statistic=float(estimate / se) if se > 0 else 0.0,
        p_value=float(p),
        method="cluster_bootstrap",
        n_treatment=int(lt.size),
        n_control=int(lc.size),
        details={
            "n_boot": int(n_boot),
            "seed": int(seed),
            "ci_low": float(np.quantile(reps, 0.025)),
            "ci_high": float(np.quantile(reps, 0.975)),
            "events_treatment": int(ft.size),
            "events_control": int(fc.size),
        },
    )
