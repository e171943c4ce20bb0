from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from perfab.correct import (
    ImputationError,
    SubgroupKey,
    build_subgroups,
    corrected_ate_imputation,
    corrected_ate_matching,
    impute,
    match_weights,
    uncorrected_ate,
)
from perfab.ingest import Covariates
from perfab.metrics import UserMetricValues
from perfab.stats import welch_t_test


def _cov(treated, device, high):
    return Covariates.from_arrays(np.asarray(treated), np.asarray(device, dtype=object),
                                  np.asarray(high))


def _full_grid(n_per_cell=3):
    rows = [(t, d, h) for t in (True, False) for d in ("A", "B") for h in (True, False)
            for _ in range(n_per_cell)]
    t, d, h = zip(*rows)
    return _cov(t, d, h)


def test_subgroup_counts():
    cov = _full_grid()
    assert len(build_subgroups(cov)) == 8
    assert len(build_subgroups(cov, with_bucket=False)) == 4


def test_subgroup_device_only_in_control():
    cov = _cov([True, True, False, False], ["A", "A", "A", "B"], [False] * 4)
    keys = set(build_subgroups(cov))
    assert keys == {SubgroupKey("treatment", "A", "low"), SubgroupKey("control", "A", "low"),
                    SubgroupKey("control", "B", "low")}


def test_subgroups_restrict_to_observed():
    cov = _full_grid(1)
    vals = UserMetricValues.from_values([np.nan] * 4 + [1.0] * 4)
    groups = build_subgroups(cov, restrict_to_non_missing=True, values=vals)
    assert sum(len(r) for r in groups.values()) == 4
    with pytest.raises(ValueError):
        build_subgroups(cov, restrict_to_non_missing=True)


def test_impute_identity_without_missing():
    cov = _full_grid()
    vals = UserMetricValues.from_values(np.arange(len(cov), dtype=float))
    imp = impute(vals, cov, seed=1)
    assert np.array_equal(imp.values, vals.values)
    assert not imp.imputed_flags.any()


def test_impute_membership():
    cov = _cov([True] * 4, ["A"] * 4, [False] * 4)
    vals = UserMetricValues.from_values([10.0, 20.0, 30.0, np.nan])
    for seed in range(20):
        imp = impute(vals, cov, seed, min_donors=1)
        assert imp.values[3] in (10.0, 20.0, 30.0)


def test_impute_large_cell_mean():
    rng = np.random.default_rng(0)
    donors = rng.normal(100, 15, 10_000)
    n = donors.size + 1000
    cov = _cov([True] * n, ["A"] * n, [False] * n)
    vals = UserMetricValues.from_values(np.r_[donors, np.full(1000, np.nan)])
    imp = impute(vals, cov, seed=5)
    drawn = imp.values[imp.imputed_flags]
    se = donors.std(ddof=1) / np.sqrt(drawn.size)
    assert abs(drawn.mean() - donors.mean()) < 3 * se


def test_impute_fallback_ladder():
    # treated cell A/high has one donor; device pool (A, both levels) has six
    treated = [True] * 8 + [False] * 2
    device = ["A"] * 8 + ["A"] * 2
    high = [True, True] + [False] * 6 + [False, False]
    vals = UserMetricValues.from_values([np.nan, 1.0, 2, 3, 4, 5, 6, 7, 9.0, 9.0])
    imp = impute(vals, _cov(treated, device, high), seed=0, min_donors=5)
    assert imp.fallback_counts["device"] == 1
    assert imp.values[0] in {1.0, 2, 3, 4, 5, 6, 7}


def test_impute_no_donors_error():
    cov = _cov([True, True, False, False], ["A"] * 4, [False] * 4)
    vals = UserMetricValues.from_values([np.nan, np.nan, 1.0, 2.0])
    with pytest.raises(ImputationError, match="treatment"):
        impute(vals, cov, seed=0)


def test_impute_deterministic_and_order_free():
    rng = np.random.default_rng(2)
    n = 400
    cov = _cov(rng.random(n) < 0.5, rng.choice(["A", "B", "C"], n), rng.random(n) < 0.4)
    y = rng.normal(size=n)
    y[rng.random(n) < 0.3] = np.nan
    vals = UserMetricValues.from_values(y)
    a = impute(vals, cov, 42)
    b = impute(vals, cov, 42)
    assert a.values.tobytes() == b.values.tobytes()
    c = impute(vals, cov, 43)
    assert not np.array_equal(a.values, c.values)


def test_match_weights_ratio():
    treated = [True] * 4 + [False] * 2
    cov = _cov(treated, ["A"] * 6, [False] * 6)
    mw = match_weights(UserMetricValues.from_values(np.ones(6)), cov)
    assert list(mw.weights[4:]) == [2.0, 2.0]
    assert list(mw.weights[:4]) == [1.0] * 4


def test_match_weights_balanced_identity():
    cov = _full_grid()
    mw = match_weights(UserMetricValues.from_values(np.arange(len(cov), dtype=float)), cov)
    assert np.all(mw.weights == 1.0)


def test_match_drops_one_sided_cells():
    cov = _cov([True, True, False, False, True], ["A", "A", "A", "A", "B"], [False] * 5)
    mw = match_weights(UserMetricValues.from_values(np.ones(5)), cov)
    assert mw.dropped_groups == [{"group": "B/low", "n_treatment": 1, "n_control": 0}]
    assert not mw.included[4] and np.isnan(mw.weights[4])


def test_zero_missing_imputation_equals_uncorrected():
    rng = np.random.default_rng(4)
    n = 300
    cov = _cov(rng.random(n) < 0.5, rng.choice(["A", "B"], n), rng.random(n) < 0.5)
    vals = UserMetricValues.from_values(rng.normal(size=n))
    a = corrected_ate_imputation(vals, cov, seed=0)
    b = uncorrected_ate(vals, cov)
    assert (a.estimate, a.std_error, a.p_value) == (b.estimate, b.std_error, b.p_value)


def test_balanced_matching_equals_welch():
    cov = _full_grid(10)
    rng = np.random.default_rng(5)
    y = rng.normal(size=len(cov))
    y[::7] = np.nan
    y[40:] = y[:40]  # same missing pattern in both buckets keeps cells balanced
    vals = UserMetricValues.from_values(y)
    obs = vals.observed
    ref = welch_t_test(y[obs & cov.treated], y[obs & ~cov.treated])
    got = corrected_ate_matching(vals, cov)
    assert got.estimate == pytest.approx(ref.estimate, abs=1e-12)
    assert got.p_value == pytest.approx(ref.p_value, abs=1e-12)


@hst.composite
def datasets(draw):
    n = draw(hst.integers(8, 120))
    seed = draw(hst.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    treated = rng.random(n) < 0.5
    treated[:2], treated[2:4] = True, False
    device = rng.choice(["A", "B", "C", "Other"], n, p=[0.4, 0.3, 0.2, 0.1])
    high = rng.random(n) < 0.4
    y = np.round(rng.lognormal(4, 0.5, n), 3)
    miss = rng.random(n) < draw(hst.floats(0.0, 0.7))
    miss[:4] = False  # at least one donor per bucket
    y[miss] = np.nan
    return _cov(treated, device, high), UserMetricValues.from_values(y), seed


@settings(max_examples=100, deadline=None)
@given(datasets(), hst.integers(1, 8))
def test_impute_invariants(data, min_donors):
    cov, vals, seed = data
    imp = impute(vals, cov, seed, min_donors=min_donors)
    obs = vals.observed
    assert np.array_equal(imp.values[obs], vals.values[obs])
    assert np.array_equal(imp.imputed_flags, ~obs)
    assert not np.isnan(imp.values).any()
    for i in np.flatnonzero(~obs):
        same_bucket = obs & (cov.treated == cov.treated[i])
        assert imp.values[i] in set(vals.values[same_bucket])


@settings(max_examples=100, deadline=None)
@given(datasets())
def test_matching_balance_exact(data):
    cov, vals, _ = data
    mw = match_weights(vals, cov)
    obs = vals.observed
    for key, (n_t, n_c) in mw.group_counts.items():
        rows = obs & (cov.device_class() == key.device_class) & \
            (cov.high_engagement == (key.engagement_level == "high"))
        assert n_t == int((rows & cov.treated).sum())
        assert n_c == int((rows & ~cov.treated).sum())
    sums = mw.control_weight_sums()
    assert all(sums[k] == Fraction(mw.group_counts[k][0]) for k in sums)
    # each control weight is the correctly rounded exact ratio of its cell
    dev = cov.device_class()
    for key, ratio in mw.group_ratios.items():
        rows = mw.included & ~cov.treated & (dev == key.device_class) & \
            (cov.high_engagement == (key.engagement_level == "high"))
        assert np.all(mw.weights[rows] == float(ratio))
        assert sum(Fraction(float(ratio)) for _ in range(int(rows.sum()))) == \
            pytest.approx(Fraction(mw.group_counts[key][0]), rel=1e-15)
    assert np.all(mw.weights[mw.included & cov.treated] == 1.0)
