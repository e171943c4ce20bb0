"""Monte Carlo laboratory for the bias-correction methods.

A synthetic population stands in for real user-level latency data. Each user
has a device class, a pre-period event count (heavier on high-end devices), a
control outcome drawn from the device's log-normal latency distribution, an
injected treatment effect and a missingness flag drawn from

    P(missing) = expit(alpha0 + alpha1 * treated + alpha2[device] + alpha3 * high_engagement)

so missingness depends on covariates only. ``run_scenario`` then compares the
uncorrected, imputation and matching estimates against the known truth.

Default parameters are synthetic and chosen so that, at 100k users, the
uncorrected estimator is visibly biased while the corrected ones keep power
for effects of about one millisecond.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .correct import corrected_ate_imputation, corrected_ate_matching, uncorrected_ate
from .ingest import Covariates, engagement_split
from .metrics import UserMetricValues
from .stats import cluster_bootstrap_quantile_diff, expit, quantile, welch_t_test

METHODS = ("none", "imputation", "matching")
SWEEP_COLUMNS = ("delta_miss_target", "true_ate", "method", "mean_estimate", "fcr", "fpr", "fnr")
DELTA_MISS_SWEEP = (0.0, 0.005, 0.01, 0.02, 0.03)
ATE_SWEEP = (0.5, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    share: float
    latency_median: float  # ms, control outcome median
    latency_log_sd: float
    engagement_rate: float  # mean pre-period events
    missing_coef: float = 0.0  # alpha2 dummy coefficient


DEFAULT_DEVICES = (
    DeviceProfile("flagship", 0.15, 90.0, 0.06, 30.0, 0.0),
    DeviceProfile("high", 0.25, 100.0, 0.06, 20.0, 0.0),
    DeviceProfile("mid", 0.52, 110.0, 0.06, 10.0, 0.5),
    DeviceProfile("low", 0.08, 250.0, 0.06, 4.0, 6.2),
)


@dataclass(frozen=True)
class ScenarioConfig:
    n_users: int = 100_000
    n_iterations: int = 100
    effect_range: tuple[float, float] = (3.0, 3.0)
    effect_sd: float = 0.3
    alpha0: float = -7.5
    alpha1: float = 0.0
    alpha3: float = -2.0
    target_delta_miss: float | None = None
    seed: int = 20200823
    devices: tuple[DeviceProfile, ...] = DEFAULT_DEVICES
    high_engagement_latency_factor: float = 0.95
    engagement_dispersion: float = 2.0  # gamma shape mixing the Poisson counts
    significance: float = 0.05
    min_donors: int = 5

    def __post_init__(self):
        a, b = self.effect_range
        if a > b:
            raise ValueError("effect_range must satisfy a <= b")
        if self.effect_sd < 0:
            raise ValueError("effect_sd must be non-negative")
        if self.n_iterations < 1 or self.n_users < 4:
            raise ValueError("need n_iterations >= 1 and n_users >= 4")
        shares = sum(d.share for d in self.devices)
        if not math.isclose(shares, 1.0, abs_tol=1e-9):
            raise ValueError(f"device shares sum to {shares}, expected 1")

    @property
    def alpha2(self) -> np.ndarray:
        return np.array([d.missing_coef for d in self.devices])

    @property
    def device_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.devices)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["effect_range"] = list(self.effect_range)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        data = dict(data)
        if "devices" in data:
            data["devices"] = tuple(d if isinstance(d, DeviceProfile) else DeviceProfile(**d)
                                    for d in data["devices"])
        if "effect_range" in data:
            data["effect_range"] = tuple(float(x) for x in data["effect_range"])
        return cls(**data)


@dataclass
class SyntheticPopulation:
    """Columnar synthetic users; ``delta`` is zero for control users."""

    treated: np.ndarray
    device: np.ndarray
    device_names: tuple[str, ...]
    pre_counts: np.ndarray
    high_engagement: np.ndarray
    y0: np.ndarray
    delta: np.ndarray
    observed: np.ndarray
    true_ate: float = 0.0

    def __len__(self) -> int:
        return int(self.y0.size)

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.delta

    def covariates(self) -> Covariates:
        return Covariates(
            user_ids=np.arange(len(self)),
            treated=self.treated,
            device=self.device,
            device_names=self.device_names,
            high_engagement=self.high_engagement,
            pre_counts=self.pre_counts,
        )

    def metric_values(self) -> UserMetricValues:
        vals = np.where(self.observed, self.y, np.nan)
        return UserMetricValues(np.arange(len(self)), vals, self.observed.astype(np.int64))

    def delta_miss(self) -> float:
        miss = ~self.observed
        return float(miss[self.treated].mean() - miss[~self.treated].mean())


def gen_population(config: ScenarioConfig, seed) -> SyntheticPopulation:
    """Draw devices, engagement, control outcomes and an exact 50/50 bucket split."""
    rng = np.random.default_rng(seed)
    n = config.n_users
    shares = np.array([d.share for d in config.devices])
    device = rng.choice(len(shares), size=n, p=shares)
    rates = np.array([d.engagement_rate for d in config.devices])[device]
    k = config.engagement_dispersion
    counts = rng.poisson(rates * rng.gamma(k, 1.0 / k, size=n)).astype(np.int64)
    high = engagement_split(counts)
    medians = np.array([d.latency_median for d in config.devices])[device]
    medians = np.where(high, medians * config.high_engagement_latency_factor, medians)
    log_sd = np.array([d.latency_log_sd for d in config.devices])[device]
    y0 = medians * np.exp(log_sd * rng.standard_normal(n))
    treated = np.zeros(n, dtype=bool)
    treated[rng.permutation(n)[: n // 2]] = True
    return SyntheticPopulation(
        treated=treated,
        device=device.astype(np.int64),
        device_names=config.device_names,
        pre_counts=counts,
        high_engagement=high,
        y0=y0,
        delta=np.zeros(n),
        observed=np.ones(n, dtype=bool),
    )


def inject_treatment(pop: SyntheticPopulation, a: float, b: float, sigma: float, seed) -> SyntheticPopulation:
    """Per device class draw ``mu ~ U(a, b)``; each treated user gets ``N(mu, sigma)``."""
    if a > b or sigma < 0:
        raise ValueError("need a <= b and sigma >= 0")
    rng = np.random.default_rng(seed)
    mu = rng.uniform(a, b, size=len(pop.device_names))
    delta = np.zeros(len(pop))
    t = pop.treated
    delta[t] = rng.normal(mu[pop.device[t]], sigma)
    true_ate = float(delta[t].mean()) if t.any() else 0.0
    return replace(pop, delta=delta, true_ate=true_ate)


def missing_probability(pop: SyntheticPopulation, alpha0: float, alpha1: float,
                        alpha2, alpha3: float) -> np.ndarray:
    alpha2 = np.asarray(alpha2, dtype=float)
    lp = alpha0 + alpha1 * pop.treated + alpha2[pop.device] + alpha3 * pop.high_engagement
    return expit(lp)


def apply_missingness(pop: SyntheticPopulation, alpha0: float, alpha1: float, alpha2, alpha3: float,
                      seed) -> SyntheticPopulation:
    """Mark each user missing independently with the logistic covariate model."""
    rng = np.random.default_rng(seed)
    p = missing_probability(pop, alpha0, alpha1, alpha2, alpha3)
    observed = rng.random(len(pop)) >= p
    return replace(pop, observed=observed)


@dataclass(frozen=True)
class MissingnessProfile:
    """Distinct covariate cells (without bucket) and their population shares."""

    base_lp: np.ndarray  # alpha0 + alpha2 + alpha3 * high, per cell
    shares: np.ndarray

    @classmethod
    def from_population(cls, pop: SyntheticPopulation, alpha0: float, alpha2, alpha3: float) -> "MissingnessProfile":
        alpha2 = np.asarray(alpha2, dtype=float)
        code = pop.device * 2 + pop.high_engagement.astype(np.int64)
        counts = np.bincount(code, minlength=2 * len(pop.device_names))
        cells = np.flatnonzero(counts)
        lp = alpha0 + alpha2[cells // 2] + alpha3 * (cells % 2)
        return cls(lp, counts[cells] / counts.sum())

    def expected_delta_miss(self, alpha1: float) -> float:
        return float(np.sum(self.shares * (expit(self.base_lp + alpha1) - expit(self.base_lp))))

    def achievable_range(self) -> tuple[float, float]:
        base = float(np.sum(self.shares * expit(self.base_lp)))
        return -base, 1.0 - base


def calibrate_alpha1(target_delta_miss: float, profile: MissingnessProfile, tol: float = 1e-4) -> float:
    """Bisection on the expected treatment-minus-control missing share.

    ``tol`` is in proportion units (1e-4 = 0.01 percentage points).
    """
    if profile.expected_delta_miss(0.0) == target_delta_miss:
        return 0.0
    lo_bound, hi_bound = profile.achievable_range()
    if not lo_bound < target_delta_miss < hi_bound:
        raise ValueError(f"target delta_miss {target_delta_miss} outside achievable range "
                         f"({lo_bound:.6f}, {hi_bound:.6f})")
    lo, hi = -1.0, 1.0
    while profile.expected_delta_miss(lo) > target_delta_miss:
        lo *= 2.0
    while profile.expected_delta_miss(hi) < target_delta_miss:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gap = profile.expected_delta_miss(mid) - target_delta_miss
        if abs(gap) < tol * 1e-3:
            return mid
        if gap < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class MethodSummary:
    estimates: list[float]
    p_values: list[float]
    mean_estimate: float
    n_sig_positive: int
    n_sig_negative: int
    n_insignificant: int
    fcr: float
    fpr: float
    fnr: float


@dataclass
class ScenarioResult:
    config: dict
    alpha1: float
    true_ate: float
    true_ates: list[float]
    realized_delta_miss: float
    methods: dict[str, MethodSummary]
    truth_sign: int

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        target = self.config.get("target_delta_miss")
        out = []
        for name in METHODS:
            m = self.methods[name]
            out.append({
                "delta_miss_target": target if target is not None else "",
                "true_ate": self.true_ate,
                "method": name,
                "mean_estimate": m.mean_estimate,
                "fcr": m.fcr,
                "fpr": m.fpr,
                "fnr": m.fnr,
            })
        return out


def _iteration_seeds(seed: int, iteration: int) -> list[int]:
    children = np.random.SeedSequence([int(seed), int(iteration)]).spawn(4)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _truth_sign(config: ScenarioConfig) -> int:
    centre = 0.5 * sum(config.effect_range)
    return int(np.sign(centre))


def _run_iteration(args) -> dict:
    config, alpha1, iteration = args
    s_gen, s_effect, s_miss, s_impute = _iteration_seeds(config.seed, iteration)
    pop = gen_population(config, s_gen)
    a, b = config.effect_range
    pop = inject_treatment(pop, a, b, config.effect_sd, s_effect)
    pop = apply_missingness(pop, config.alpha0, alpha1, config.alpha2, config.alpha3, s_miss)
    cov = pop.covariates()
    vals = pop.metric_values()
    results = {
        "none": uncorrected_ate(vals, cov),
        "imputation": corrected_ate_imputation(vals, cov, s_impute, min_donors=config.min_donors),
        "matching": corrected_ate_matching(vals, cov),
    }
    return {
        "true_ate": pop.true_ate,
        "delta_miss": pop.delta_miss(),
        "estimates": {k: r.estimate for k, r in results.items()},
        "p_values": {k: r.p_value for k, r in results.items()},
    }


def _summarize(estimates, p_values, truth_sign: int, alpha: float) -> MethodSummary:
    est = np.asarray(estimates)
    p = np.asarray(p_values)
    sig = p < alpha
    pos = int(np.count_nonzero(sig & (est > 0)))
    neg = int(np.count_nonzero(sig & (est < 0)))
    insig = int(np.count_nonzero(~sig))
    n = est.size
    if truth_sign > 0:
        wrong = insig + neg
    elif truth_sign < 0:
        wrong = insig + pos
    else:
        wrong = pos + neg
    return MethodSummary(
        estimates=est.tolist(),
        p_values=p.tolist(),
        mean_estimate=float(est.mean()),
        n_sig_positive=pos,
        n_sig_negative=neg,
        n_insignificant=insig,
        fcr=wrong / n,
        fpr=(pos + neg) / n if truth_sign == 0 else 0.0,
        fnr=insig / n if truth_sign != 0 else 0.0,
    )


def scenario_profile(config: ScenarioConfig) -> MissingnessProfile:
    pilot_seed = np.random.SeedSequence([int(config.seed), 0xC0FFEE]).generate_state(1, dtype=np.uint64)[0]
    pilot = gen_population(config, int(pilot_seed))
    return MissingnessProfile.from_population(pilot, config.alpha0, config.alpha2, config.alpha3)


def run_scenario(config: ScenarioConfig, n_jobs: int = 1) -> ScenarioResult:
    """Generate, inject, mask and estimate ``n_iterations`` times.

    Iteration ``i`` draws all of its randomness from ``(config.seed, i)``, so
    serial and parallel runs agree exactly and sweep points share populations.
    """
    alpha1 = config.alpha1
    if config.target_delta_miss is not None:
        alpha1 = calibrate_alpha1(config.target_delta_miss, scenario_profile(config))
    jobs = [(config, alpha1, i) for i in range(config.n_iterations)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            its = list(pool.map(_run_iteration, jobs))
    else:
        its = [_run_iteration(j) for j in jobs]
    sign = _truth_sign(config)
    methods = {
        m: _summarize([it["estimates"][m] for it in its], [it["p_values"][m] for it in its],
                      sign, config.significance)
        for m in METHODS
    }
    true_ates = [it["true_ate"] for it in its]
    return ScenarioResult(
        config=config.to_dict(),
        alpha1=float(alpha1),
        true_ate=float(np.mean(true_ates)),
        true_ates=true_ates,
        realized_delta_miss=float(np.mean([it["delta_miss"] for it in its])),
        methods=methods,
        truth_sign=sign,
    )


# -- setups -----------------------------------------------------------------

# Setup C keeps the same device mix but weaker device and engagement effects on
# missingness, so a 2% gap biases the uncorrected estimate by well under the
# smallest swept effect.
SETUP_C_DEVICES = tuple(replace(d, missing_coef=c) for d, c in zip(DEFAULT_DEVICES, (0.0, 0.0, 0.3, 1.0)))

DEFAULT_SETUPS: dict[str, dict] = {
    "A": {"effect_range": (3.0, 3.0), "sweep": "delta_miss", "values": DELTA_MISS_SWEEP},
    "B": {"effect_range": (0.0, 0.0), "sweep": "delta_miss", "values": DELTA_MISS_SWEEP},
    "C": {"target_delta_miss": 0.02, "sweep": "ate", "values": ATE_SWEEP,
          "alpha0": -2.5, "alpha3": -0.5, "devices": SETUP_C_DEVICES},
}
SETUP_NAMES = ("A", "B", "C", "divergence")


def setup_plan(setup: str, base: ScenarioConfig | None = None,
               overrides: dict | None = None) -> tuple[ScenarioConfig, str, tuple[float, ...]]:
    """Resolve a named setup into (config, sweep kind, sweep values)."""
    if setup not in DEFAULT_SETUPS:
        raise ValueError(f"unknown setup {setup!r}; valid: {', '.join(SETUP_NAMES)}")
    plan = copy.deepcopy(DEFAULT_SETUPS[setup])
    plan.update(overrides or {})
    sweep = plan.pop("sweep")
    values = tuple(float(v) for v in plan.pop("values"))
    base_dict = (base or ScenarioConfig()).to_dict()
    base_dict.update(plan)
    return ScenarioConfig.from_dict(base_dict), sweep, values


def run_sweep(config: ScenarioConfig, sweep: str, values, n_jobs: int = 1) -> list[ScenarioResult]:
    out = []
    for v in values:
        if sweep == "delta_miss":
            cfg = replace(config, target_delta_miss=float(v))
        elif sweep == "ate":
            cfg = replace(config, effect_range=(float(v), float(v)))
        else:
            raise ValueError(f"unknown sweep {sweep!r}")
        out.append(run_scenario(cfg, n_jobs=n_jobs))
    return out


def sweep_rows(results: list[ScenarioResult]) -> list[dict]:
    return [row for r in results for row in r.rows()]


# -- event-level versus user-level divergence -------------------------------

@dataclass(frozen=True)
class DivergenceDevice:
    name: str
    share: float
    latency_median: float  # per-user median latency, ms
    latency_log_sd: float  # spread of user medians
    events_mean: float  # mean events per user during the experiment
    effect: float  # shift added to each treated event, ms


DEFAULT_DIVERGENCE_DEVICES = (
    DivergenceDevice("high_end", 0.2, 200.0, 0.05, 60.0, -30.0),
    DivergenceDevice("low_end", 0.8, 600.0, 0.35, 10.0, 0.0),
)


@dataclass(frozen=True)
class DivergenceConfig:
    users_per_bucket: int = 1000
    devices: tuple[DivergenceDevice, ...] = DEFAULT_DIVERGENCE_DEVICES
    event_log_sd: float = 0.1
    q: float = 0.5
    n_boot: int = 1000
    n_repeats: int = 50
    seed: int = 20200823
    significance: float = 0.05

    @classmethod
    def from_dict(cls, data: dict) -> "DivergenceConfig":
        data = dict(data)
        if "devices" in data:
            data["devices"] = tuple(d if isinstance(d, DivergenceDevice) else DivergenceDevice(**d)
                                    for d in data["devices"])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def gen_event_population(config: DivergenceConfig, seed):
    """Per-user event arrays for both buckets plus each user's device index.

    Every user has at least one event. Treated users' events are shifted by
    their device's effect.
    """
    rng = np.random.default_rng(seed)
    n = 2 * config.users_per_bucket
    shares = np.array([d.share for d in config.devices])
    device = rng.choice(len(shares), size=n, p=shares)
    treated = np.zeros(n, dtype=bool)
    treated[rng.permutation(n)[: config.users_per_bucket]] = True
    med = np.array([d.latency_median for d in config.devices])[device]
    lsd = np.array([d.latency_log_sd for d in config.devices])[device]
    user_median = med * np.exp(lsd * rng.standard_normal(n))
    n_events = 1 + rng.poisson(np.array([d.events_mean for d in config.devices])[device] - 1.0)
    effect = np.array([d.effect for d in config.devices])[device]
    events = []
    for i in range(n):
        ev = user_median[i] * np.exp(config.event_log_sd * rng.standard_normal(n_events[i]))
        if treated[i]:
            ev = ev + effect[i]
        events.append(np.maximum(ev, 0.0))
    return events, treated, device


def divergence_scenario(config: DivergenceConfig, seed=None) -> dict:
    """One draw of the heterogeneous population; event-level and user-level ATEs side by side."""
    seed = config.seed if seed is None else seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    s_pop, s_boot = seed.spawn(2)
    events, treated, device = gen_event_population(config, s_pop)
    boot_seed = int(s_boot.generate_state(1, dtype=np.uint64)[0])
    t_events = [e for e, t in zip(events, treated) if t]
    c_events = [e for e, t in zip(events, treated) if not t]
    event_res = cluster_bootstrap_quantile_diff(t_events, c_events, config.q, config.n_boot, boot_seed)
    user_vals = np.array([quantile(e, config.q) for e in events])
    user_res = welch_t_test(user_vals[treated], user_vals[~treated])
    alpha = config.significance
    event_counts = np.array([e.size for e in events])
    shares = {d.name: {"users": float(np.mean(device == k)),
                       "events": float(event_counts[device == k].sum() / event_counts.sum())}
              for k, d in enumerate(config.devices)}
    return {
        "event_level": event_res,
        "user_level": user_res,
        "event_significant": event_res.p_value < alpha,
        "user_significant": user_res.p_value < alpha,
        "diverged": bool(event_res.p_value < alpha and user_res.p_value >= alpha),
        "device_shares": shares,
    }


def run_divergence(config: DivergenceConfig) -> dict:
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_repeats)
    reps = [divergence_scenario(config, s) for s in seeds]
    return {
        "n_repeats": config.n_repeats,
        "diverged_fraction": float(np.mean([r["diverged"] for r in reps])),
        "event_significant_fraction": float(np.mean([r["event_significant"] for r in reps])),
        "user_significant_fraction": float(np.mean([r["user_significant"] for r in reps])),
        "mean_event_estimate": float(np.mean([r["event_level"].estimate for r in reps])),
        "mean_user_estimate": float(np.mean([r["user_level"].estimate for r in reps])),
        "repeats": reps,
    }
