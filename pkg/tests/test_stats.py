import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst
from scipy import stats as sps

from perfab.stats import (
    StatsError,
    TestResult,
    cluster_bootstrap_quantile_diff,
    expit,
    grouped_quantile,
    one_proportion_test,
    quantile,
    two_proportion_test,
    weighted_t_test,
    welch_t_test,
)

from oracles import pooled_z_p, sort_quantile, welch_oracle


finite = hst.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


# -- quantile ---------------------------------------------------------------

def test_quantile_examples():
    assert quantile([1, 2, 3], 0.5) == 2.0
    assert quantile([10], 0.9) == 10.0
    assert quantile([100, 300], 0.5) == 200.0


def test_quantile_errors():
    with pytest.raises(StatsError):
        quantile([], 0.5)
    with pytest.raises(StatsError):
        quantile([1.0, np.nan], 0.5)
    with pytest.raises(StatsError):
        quantile([1.0, np.inf], 0.5)
    with pytest.raises(StatsError):
        quantile([1.0], 1.5)


@given(hst.lists(finite, min_size=1, max_size=60), hst.floats(0, 1))
def test_quantile_matches_sort_oracle(values, q):
    assert quantile(values, q) == sort_quantile(values, q)


@given(hst.lists(finite, min_size=1, max_size=60), hst.floats(0, 1), hst.floats(0, 1))
def test_quantile_monotone_in_q(values, q1, q2):
    lo, hi = sorted((q1, q2))
    assert quantile(values, lo) <= quantile(values, hi)


@given(hst.lists(finite, min_size=1, max_size=60), hst.floats(0, 1))
def test_quantile_within_range(values, q):
    v = quantile(values, q)
    assert min(values) <= v <= max(values)


@given(hst.lists(hst.tuples(hst.integers(0, 6), finite), max_size=80), hst.floats(0, 1))
def test_grouped_quantile_matches_per_group(pairs, q):
    groups = np.array([g for g, _ in pairs], dtype=np.int64)
    vals = np.array([v for _, v in pairs], dtype=float)
    out = grouped_quantile(vals, groups, q, 7)
    for g in range(7):
        members = vals[groups == g]
        if members.size == 0:
            assert math.isnan(out[g])
        else:
            assert out[g] == sort_quantile(members.tolist(), q)


# -- expit ------------------------------------------------------------------

def test_expit_values():
    assert expit(0) == 0.5
    assert expit(math.log(3)) == pytest.approx(0.75, abs=1e-15)
    assert expit(1000.0) == 1.0
    assert expit(-1000.0) == 0.0
    arr = expit(np.array([-2.0, 0.0, 2.0]))
    assert arr.shape == (3,)


@given(hst.floats(-700, 700))
def test_expit_symmetry(x):
    assert expit(x) + expit(-x) == pytest.approx(1.0, abs=1e-15)
    assert 0.0 <= expit(x) <= 1.0


# -- Welch ------------------------------------------------------------------

FIXED_T = [12.1, 9.8, 11.4, 10.9, 13.2, 10.1, 12.7, 9.5, 11.8, 10.6]
FIXED_C = [10.2, 9.1, 10.8, 8.7, 11.5, 9.9, 10.4, 8.8, 9.6, 10.0]


def test_welch_identical_groups():
    r = welch_t_test([1, 2, 3], [1, 2, 3])
    assert r.estimate == 0.0
    assert r.p_value == 1.0
    assert r.method == "welch_t"
    assert (r.n_treatment, r.n_control) == (3, 3)


def test_welch_swap_antisymmetric():
    a = welch_t_test(FIXED_T, FIXED_C)
    b = welch_t_test(FIXED_C, FIXED_T)
    assert b.estimate == -a.estimate
    assert b.p_value == a.p_value


def test_welch_fixed_dataset_matches_textbook():
    r = welch_t_test(FIXED_T, FIXED_C)
    est, se, t, df, p = welch_oracle(FIXED_T, FIXED_C)
    assert r.estimate == pytest.approx(est, abs=1e-10)
    assert r.std_error == pytest.approx(se, abs=1e-10)
    assert r.statistic == pytest.approx(t, abs=1e-10)
    assert r.df == pytest.approx(df, abs=1e-10)
    assert r.p_value == pytest.approx(p, abs=1e-10)
    ref = sps.ttest_ind(FIXED_T, FIXED_C, equal_var=False)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-10)


def test_welch_errors():
    with pytest.raises(StatsError):
        welch_t_test([1.0], [1.0, 2.0])
    with pytest.raises(StatsError):
        welch_t_test([2.0, 2.0], [3.0, 3.0])


def test_welch_one_group_constant():
    r = welch_t_test([5.0, 5.0, 5.0], [1.0, 2.0, 3.0])
    assert r.estimate == 3.0
    assert math.isfinite(r.p_value)


# -- weighted ---------------------------------------------------------------

def test_weighted_unit_weights_equal_welch():
    a = welch_t_test(FIXED_T, FIXED_C)
    b = weighted_t_test(FIXED_T, FIXED_C, np.ones(10), np.ones(10))
    for f in ("estimate", "std_error", "statistic", "p_value", "df"):
        assert getattr(b, f) == pytest.approx(getattr(a, f), abs=1e-12)
    assert b.method == "weighted_t"


def test_weighted_fixed_small_dataset():
    t = [3.0, 5.0, 4.0]
    c = [1.0, 2.0, 4.0, 3.0]
    wt = [1.0, 2.0, 1.0]
    wc = [2.0, 1.0, 2.0, 1.0]
    # hand computation
    mt = (3 + 10 + 4) / 4  # 4.25
    mc = (2 + 2 + 8 + 3) / 6  # 2.5
    nt = 16 / 6
    nc = 36 / 10
    vt = (1 * 1.25 ** 2 + 2 * 0.75 ** 2 + 1 * 0.25 ** 2) / 4 * nt / (nt - 1)
    vc = (2 * 1.5 ** 2 + 1 * 0.5 ** 2 + 2 * 1.5 ** 2 + 1 * 0.5 ** 2) / 6 * nc / (nc - 1)
    se = math.sqrt(vt / nt + vc / nc)
    df = (vt / nt + vc / nc) ** 2 / ((vt / nt) ** 2 / (nt - 1) + (vc / nc) ** 2 / (nc - 1))
    r = weighted_t_test(t, c, wt, wc)
    assert r.estimate == pytest.approx(mt - mc, abs=1e-12)
    assert r.std_error == pytest.approx(se, abs=1e-12)
    assert r.df == pytest.approx(df, abs=1e-10)
    assert r.p_value == pytest.approx(2 * sps.t.sf(abs((mt - mc) / se), df), abs=1e-12)
    assert r.details["n_eff_treatment"] == pytest.approx(nt)


def test_weighted_rejects_bad_weights():
    with pytest.raises(StatsError):
        weighted_t_test([1, 2], [1, 2], [1, 0], [1, 1])
    with pytest.raises(StatsError):
        weighted_t_test([1, 2], [1, 2], [1, -1], [1, 1])
    with pytest.raises(StatsError):
        weighted_t_test([1, 2], [1, 2], [1], [1, 1])


@settings(max_examples=50)
@given(hst.lists(hst.floats(-100, 100), min_size=3, max_size=30),
       hst.lists(hst.floats(-100, 100), min_size=3, max_size=30),
       hst.floats(0.1, 50))
def test_weighted_scale_invariant(t, c, k):
    if np.var(t) == 0 and np.var(c) == 0:
        return
    a = weighted_t_test(t, c, np.full(len(t), k), np.full(len(c), 1.0))
    b = welch_t_test(t, c)
    assert a.estimate == pytest.approx(b.estimate, rel=1e-9, abs=1e-9)
    assert a.p_value == pytest.approx(b.p_value, rel=1e-7, abs=1e-9)


# -- proportions ------------------------------------------------------------

def test_two_proportion_equal():
    r = two_proportion_test(50, 100, 50, 100)
    assert (r.estimate, r.statistic, r.p_value) == (0.0, 0.0, 1.0)


def test_two_proportion_experiment_rates():
    r = two_proportion_test(6779, 10000, 6824, 10000)
    assert r.p_value == pytest.approx(pooled_z_p(6779, 10000, 6824, 10000), abs=1e-10)
    assert r.estimate == pytest.approx(-0.0045, abs=1e-12)


@pytest.mark.parametrize("counts", [(10, 10, 20, 20), (0, 10, 0, 20)])
def test_two_proportion_degenerate(counts):
    r = two_proportion_test(*counts)
    assert r.degenerate and r.p_value == 1.0


def test_two_proportion_bad_counts():
    with pytest.raises(StatsError):
        two_proportion_test(11, 10, 1, 10)
    with pytest.raises(StatsError):
        two_proportion_test(0, 0, 1, 10)


@given(hst.integers(1, 5000), hst.integers(1, 5000), hst.data())
def test_two_proportion_symmetric(n1, n2, data):
    k1 = data.draw(hst.integers(0, n1))
    k2 = data.draw(hst.integers(0, n2))
    a = two_proportion_test(k1, n1, k2, n2)
    b = two_proportion_test(k2, n2, k1, n1)
    assert a.p_value == pytest.approx(b.p_value, abs=1e-14)
    assert 0.0 <= a.p_value <= 1.0


def test_one_proportion():
    r = one_proportion_test(5000, 10000, 0.5)
    assert r.statistic == 0.0 and r.p_value == 1.0
    r = one_proportion_test(5100, 10000, 0.5)
    z = (0.51 - 0.5) / math.sqrt(0.25 / 10000)
    assert r.p_value == pytest.approx(2 * sps.norm.sf(z), abs=1e-12)
    assert one_proportion_test(10000, 10000, 0.5).p_value < 1e-100
    with pytest.raises(StatsError):
        one_proportion_test(1, 0, 0.5)


# -- cluster bootstrap ------------------------------------------------------

def _users(rng, n, shift=0.0):
    return [rng.lognormal(5, 0.3, size=rng.integers(1, 10)) + shift for _ in range(n)]


def test_bootstrap_identical_buckets():
    rng = np.random.default_rng(1)
    u = _users(rng, 100)
    r = cluster_bootstrap_quantile_diff(u, list(u), 0.5, n_boot=200, seed=3)
    assert r.estimate == 0.0
    assert r.p_value > 0.05


def test_bootstrap_deterministic():
    rng = np.random.default_rng(2)
    t, c = _users(rng, 80), _users(rng, 80)
    a = cluster_bootstrap_quantile_diff(t, c, 0.9, n_boot=200, seed=11)
    b = cluster_bootstrap_quantile_diff(t, c, 0.9, n_boot=200, seed=11)
    assert a == b


def test_bootstrap_shift():
    rng = np.random.default_rng(4)
    c = _users(rng, 500)
    t = [u + 100.0 for u in _users(rng, 500)]
    r = cluster_bootstrap_quantile_diff(t, c, 0.5, n_boot=1000, seed=0)
    pooled_shift = quantile(np.concatenate(t), 0.5) - quantile(np.concatenate(c), 0.5)
    assert r.estimate == pytest.approx(pooled_shift, abs=1e-9)
    assert r.p_value < 0.01
    assert r.method == "cluster_bootstrap"


def test_bootstrap_exact_shift_of_same_users():
    rng = np.random.default_rng(5)
    c = _users(rng, 500)
    t = [u + 100.0 for u in c]
    r = cluster_bootstrap_quantile_diff(t, c, 0.5, n_boot=1000, seed=0)
    assert r.estimate == pytest.approx(100.0, abs=1e-9)
    assert r.p_value < 0.01


def test_bootstrap_errors():
    with pytest.raises(StatsError):
        cluster_bootstrap_quantile_diff([[1.0]], [[2.0]], 0.5, n_boot=10)
    with pytest.raises(StatsError):
        cluster_bootstrap_quantile_diff([], [[2.0]], 0.5)


def test_result_roundtrip():
    r = welch_t_test(FIXED_T, FIXED_C)
    assert TestResult.from_dict(r.to_dict()) == r
    assert r.significant(0.05) == (r.p_value < 0.05)
