"""Self-selection bias reduction for user-level metrics.

Two estimators over the same covariate cells (bucket, device class,
engagement level):

* imputation fills each missing user with a random draw from the observed
  values of its own cell and bucket, then compares all exposed users;
* matching reweights observed control users so that, per (device class,
  engagement level) cell, their weight equals the treated count, then runs a
  weighted t-test over observed users only.

The two target different populations (everyone exposed versus users who
produced the metric), so reports show both.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .ingest import OTHER_DEVICE, Covariates
from .metrics import UserMetricValues, user_level_ate
from .stats import TestResult, weighted_t_test, welch_t_test

DEFAULT_MIN_DONORS = 5
FALLBACK_RUNGS = ("cell", "device", "other_device", "bucket")


class ImputationError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class SubgroupKey:
    bucket: str | None
    device_class: str
    engagement_level: str

    def label(self) -> str:
        parts = [self.bucket] if self.bucket is not None else []
        return "/".join(parts + [self.device_class, self.engagement_level])


def _cell_codes(covariates: Covariates, with_bucket: bool) -> np.ndarray:
    n_dev = len(covariates.device_names)
    code = covariates.device * 2 + covariates.high_engagement.astype(np.int64)
    if with_bucket:
        code = code + covariates.treated.astype(np.int64) * (2 * n_dev)
    return code


def _decode(code: int, covariates: Covariates, with_bucket: bool) -> SubgroupKey:
    n_dev = len(covariates.device_names)
    bucket = None
    if with_bucket:
        bucket = "treatment" if code >= 2 * n_dev else "control"
        code %= 2 * n_dev
    return SubgroupKey(bucket, covariates.device_names[code // 2], "high" if code % 2 else "low")


def _group_rows(codes: np.ndarray, rows: np.ndarray) -> dict[int, np.ndarray]:
    sub = codes[rows]
    order = np.argsort(sub, kind="stable")
    uniq, starts = np.unique(sub[order], return_index=True)
    parts = np.split(rows[order], starts[1:]) if rows.size else []
    return {int(c): p for c, p in zip(uniq, parts)}


def build_subgroups(covariates: Covariates, with_bucket: bool = True,
                    restrict_to_non_missing: bool = False,
                    values: UserMetricValues | None = None) -> dict[SubgroupKey, np.ndarray]:
    """Partition user rows by cell; only cells with at least one user appear."""
    rows = np.arange(len(covariates))
    if restrict_to_non_missing:
        if values is None:
            raise ValueError("values are required to restrict to non-missing users")
        rows = rows[values.observed]
    codes = _cell_codes(covariates, with_bucket)
    return {_decode(c, covariates, with_bucket): r for c, r in sorted(_group_rows(codes, rows).items())}


def _key_seed(seed: int, key: SubgroupKey) -> np.random.SeedSequence:
    digest = hashlib.blake2b(key.label().encode(), digest_size=8).digest()
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")])


@dataclass(frozen=True)
class ImputedValues:
    values: np.ndarray
    imputed_flags: np.ndarray
    donor_counts: dict[SubgroupKey, int]
    fallback_counts: dict[str, int]
    seed: int

    @property
    def n_imputed(self) -> int:
        return int(self.imputed_flags.sum())


def impute(values: UserMetricValues, covariates: Covariates, seed: int,
           min_donors: int = DEFAULT_MIN_DONORS) -> ImputedValues:
    """Random hot-deck imputation within (bucket, device class, engagement) cells.

    Draws are i.i.d. with replacement from the cell's observed values. A cell
    with fewer than ``min_donors`` observed users widens its donor pool, always
    inside the same bucket: same device with both engagement levels, then the
    ``Other`` device class, then the whole bucket. If no rung reaches
    ``min_donors`` the first rung with any donor is used. Each cell draws from
    its own stream derived from ``seed`` and the cell key, so results do not
    depend on processing order.
    """
    if len(values) != len(covariates):
        raise ValueError("values and covariates are not aligned")
    y = values.values
    observed = values.observed
    out = y.copy()
    flags = ~observed
    if not flags.any():
        return ImputedValues(out, flags.copy(), {}, {r: 0 for r in FALLBACK_RUNGS}, int(seed))

    treated = covariates.treated
    device = covariates.device
    other_code = (covariates.device_names.index(OTHER_DEVICE)
                  if OTHER_DEVICE in covariates.device_names else -1)

    codes = _cell_codes(covariates, with_bucket=True)
    all_rows = np.arange(len(covariates))
    donors_by_cell = _group_rows(codes, all_rows[observed])
    missing_by_cell = _group_rows(codes, all_rows[~observed])

    # wider pools, built lazily and cached per (bucket, device) / bucket
    donor_rows = all_rows[observed]
    pool_cache: dict[tuple, np.ndarray] = {}

    def pool(bucket: bool, dev: int | None) -> np.ndarray:
        key = (bucket, dev)
        if key not in pool_cache:
            mask = treated[donor_rows] == bucket
            if dev is not None:
                mask &= device[donor_rows] == dev
            pool_cache[key] = donor_rows[mask]
        return pool_cache[key]

    donor_counts: dict[SubgroupKey, int] = {}
    fallback_counts = {r: 0 for r in FALLBACK_RUNGS}
    for code, miss_rows in missing_by_cell.items():
        key = _decode(code, covariates, with_bucket=True)
        first = miss_rows[0]
        bucket, dev = bool(treated[first]), int(device[first])
        ladder = [
            ("cell", donors_by_cell.get(code, np.empty(0, dtype=np.int64))),
            ("device", pool(bucket, dev)),
            ("other_device", pool(bucket, other_code) if other_code >= 0 and other_code != dev else None),
            ("bucket", pool(bucket, None)),
        ]
        ladder = [(name, rows) for name, rows in ladder if rows is not None]
        chosen = next(((n, r) for n, r in ladder if r.size >= min_donors), None)
        if chosen is None:
            chosen = next(((n, r) for n, r in ladder if r.size > 0), None)
        if chosen is None:
            raise ImputationError(f"no donors for subgroup {key.label()} anywhere in its bucket")
        rung, donors = chosen
        if rung != "cell":
            fallback_counts[rung] += 1
        donor_vals = y[donors]
        rng = np.random.default_rng(_key_seed(seed, key))
        out[miss_rows] = donor_vals[rng.integers(0, donor_vals.size, size=miss_rows.size)]
        donor_counts[key] = int(donor_vals.size)
    return ImputedValues(out, flags, donor_counts, fallback_counts, int(seed))


@dataclass(frozen=True)
class MatchedWeights:
    """Exact-matching weights over observed users.

    ``weights`` is aligned with all users; rows outside the analysis (missing,
    or in a cell lacking one bucket) hold NaN and ``included`` is False.
    ``group_ratios`` keeps each cell's treated/control ratio as an exact
    fraction so balance can be verified without rounding.
    """

    weights: np.ndarray
    included: np.ndarray
    group_ratios: dict[SubgroupKey, Fraction]
    group_counts: dict[SubgroupKey, tuple[int, int]]
    dropped_groups: list[dict] = field(default_factory=list)

    def control_weight_sums(self) -> dict[SubgroupKey, Fraction]:
        return {k: self.group_ratios[k] * self.group_counts[k][1] for k in self.group_ratios}


def match_weights(values: UserMetricValues, covariates: Covariates) -> MatchedWeights:
    """Weight treated users 1 and control users ``N^T_g / N^C_g`` per (device, engagement) cell.

    Cells with observed treated users but no observed controls (or the reverse)
    cannot be balanced; they are dropped and listed in ``dropped_groups``.
    """
    observed = values.observed
    treated = covariates.treated
    codes = _cell_codes(covariates, with_bucket=False)
    size = int(codes.max()) + 1 if codes.size else 0
    n_t = np.bincount(codes[observed & treated], minlength=size)
    n_c = np.bincount(codes[observed & ~treated], minlength=size)
    both = (n_t > 0) & (n_c > 0)
    ratio = np.where(both, n_t / np.maximum(n_c, 1), np.nan)

    included = observed & both[codes]
    weights = np.full(len(covariates), np.nan)
    weights[included & treated] = 1.0
    ctrl = included & ~treated
    weights[ctrl] = ratio[codes[ctrl]]

    group_ratios: dict[SubgroupKey, Fraction] = {}
    group_counts: dict[SubgroupKey, tuple[int, int]] = {}
    dropped = []
    for code in np.flatnonzero((n_t > 0) | (n_c > 0)):
        key = _decode(int(code), covariates, with_bucket=False)
        if both[code]:
            group_ratios[key] = Fraction(int(n_t[code]), int(n_c[code]))
            group_counts[key] = (int(n_t[code]), int(n_c[code]))
        else:
            dropped.append({"group": key.label(), "n_treatment": int(n_t[code]), "n_control": int(n_c[code])})
    return MatchedWeights(weights, included, group_ratios, group_counts, dropped)


def corrected_ate_imputation(values: UserMetricValues, covariates: Covariates, seed: int,
                             min_donors: int = DEFAULT_MIN_DONORS) -> TestResult:
    """Impute, then Welch-test treatment versus control over all assigned users."""
    imp = impute(values, covariates, seed, min_donors=min_donors)
    res = welch_t_test(imp.values[covariates.treated], imp.values[~covariates.treated])
    details = {
        "correction": "imputation",
        "seed": int(seed),
        "n_imputed": imp.n_imputed,
        "fallbacks": dict(imp.fallback_counts),
        "population": "all exposed users",
    }
    return TestResult(res.estimate, res.std_error, res.statistic, res.p_value, res.method,
                      res.n_treatment, res.n_control, res.df, res.degenerate, details)


def corrected_ate_matching(values: UserMetricValues, covariates: Covariates) -> TestResult:
    """Exact-matching weights, then a weighted t-test over observed users."""
    mw = match_weights(values, covariates)
    t_rows = mw.included & covariates.treated
    c_rows = mw.included & ~covariates.treated
    y = values.values
    res = weighted_t_test(y[t_rows], y[c_rows], mw.weights[t_rows], mw.weights[c_rows])
    details = dict(res.details)
    details.update(
        correction="matching",
        groups=len(mw.group_ratios),
        dropped_groups=mw.dropped_groups,
        population="users with observed values",
    )
    return TestResult(res.estimate, res.std_error, res.statistic, res.p_value, res.method,
                      res.n_treatment, res.n_control, res.df, res.degenerate, details)


def uncorrected_ate(values: UserMetricValues, covariates: Covariates) -> TestResult:
    res = user_level_ate(values, covariates)
    details = dict(res.details)
    details["correction"] = "none"
    return TestResult(res.estimate, res.std_error, res.statistic, res.p_value, res.method,
                      res.n_treatment, res.n_control, res.df, res.degenerate, details)
