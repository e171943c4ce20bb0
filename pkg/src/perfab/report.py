"""Analysis pipeline and report serialization.

For one metric: compute event-level and user-level effects, run the
self-selection SRM check, and when it alerts (or correction is forced) add
the imputation and matching estimates next to the uncorrected one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .correct import corrected_ate_imputation, corrected_ate_matching, uncorrected_ate
from .ingest import Assignment, EventLog, derive_covariates
from .metrics import event_level_ate, few_event_diagnostic, per_device_ate, user_level_values
from .srm import SrmReport, assignment_srm, self_selection_srm
from .stats import TestResult

CORRECTION_COLUMNS = (("none", "Without Correction"), ("imputation", "Imputation"), ("matching", "Matching"))
CSV_COLUMNS = ("metric_id", "level", "method", "estimate", "std_error", "statistic", "p_value",
               "n_treatment", "n_control")
POPULATION_NOTE = ("imputation estimates the effect over all exposed users; "
                   "matching estimates it over users who produced the metric")


@dataclass
class AnalysisReport:
    metric_id: str
    quantile: float
    seed: int
    event_level: TestResult
    user_level: TestResult
    self_selection_srm: SrmReport
    assignment_srm: TestResult
    corrected: dict[str, TestResult] | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric_id": self.metric_id,
            "quantile": self.quantile,
            "seed": self.seed,
            "event_level": self.event_level.to_dict(),
            "user_level": self.user_level.to_dict(),
            "self_selection_srm": self.self_selection_srm.to_dict(),
            "assignment_srm": self.assignment_srm.to_dict(),
            "corrected": None if self.corrected is None else {k: v.to_dict() for k, v in self.corrected.items()},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnalysisReport":
        corrected = data.get("corrected")
        return cls(
            metric_id=data["metric_id"],
            quantile=data["quantile"],
            seed=data["seed"],
            event_level=TestResult.from_dict(data["event_level"]),
            user_level=TestResult.from_dict(data["user_level"]),
            self_selection_srm=SrmReport.from_dict(data["self_selection_srm"]),
            assignment_srm=TestResult.from_dict(data["assignment_srm"]),
            corrected=None if corrected is None else {k: TestResult.from_dict(v) for k, v in corrected.items()},
            diagnostics=data.get("diagnostics", {}),
        )


def analyze_metric(events: EventLog, pre_events: EventLog, assignments: list[Assignment],
                   device_map: dict[str, str], metric_id: str, *, q: float = 0.5,
                   alert_threshold: float = 0.001, seed: int = 0, n_boot: int = 1000,
                   force_correct: bool = False, device_threshold: int = 10_000,
                   expected_ratio: float = 0.5, min_donors: int = 5,
                   min_events: int | None = None) -> AnalysisReport:
    """Run the measure, check and correct steps for one metric."""
    exp = events.for_metric(metric_id)
    pre = pre_events.for_metric(metric_id)
    cov = derive_covariates(pre, assignments, device_map, device_threshold)
    values = user_level_values(exp, cov, q)

    event_res = event_level_ate(exp, cov, q, n_boot=n_boot, seed=seed)
    user_res = uncorrected_ate(values, cov)
    srm = self_selection_srm(values, cov, alert_threshold)
    n_t = int(cov.treated.sum())
    assign = assignment_srm(n_t, len(cov) - n_t, expected_ratio)

    corrected = None
    if srm.alert or force_correct:
        corrected = {
            "none": user_res,
            "imputation": corrected_ate_imputation(values, cov, seed, min_donors=min_donors),
            "matching": corrected_ate_matching(values, cov),
        }
    diagnostics = {
        "few_events": few_event_diagnostic(values, q, min_events),
        "per_device": per_device_ate(values, cov),
        "covariates": dict(cov.summary),
        "device_classes": list(cov.device_names),
        "weighted_t_variance": "Kish effective sample size per bucket",
    }
    if corrected is not None:
        diagnostics["fallbacks"] = corrected["imputation"].details.get("fallbacks", {})
        diagnostics["dropped_match_groups"] = corrected["matching"].details.get("dropped_groups", [])
        diagnostics["populations"] = POPULATION_NOTE
    return AnalysisReport(metric_id, float(q), int(seed), event_res, user_res, srm, assign,
                          corrected, diagnostics)


def dumps(reports: list[AnalysisReport], **extra) -> str:
    payload = dict(extra)
    payload["reports"] = [r.to_dict() for r in reports]
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)


def loads(text: str) -> list[AnalysisReport]:
    return [AnalysisReport.from_dict(r) for r in json.loads(text)["reports"]]


def csv_rows(report: AnalysisReport) -> list[dict]:
    rows = [("event", "none", report.event_level), ("user", "none", report.user_level)]
    if report.corrected:
        rows += [("user", m, report.corrected[m]) for m in ("imputation", "matching") if m in report.corrected]
    return [{
        "metric_id": report.metric_id,
        "level": level,
        "method": method,
        "estimate": r.estimate,
        "std_error": r.std_error,
        "statistic": r.statistic,
        "p_value": r.p_value,
        "n_treatment": r.n_treatment,
        "n_control": r.n_control,
    } for level, method, r in rows]


def _p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def render_table(report: AnalysisReport) -> str:
    lines = [f"metric {report.metric_id}  (quantile {report.quantile:g}, seed {report.seed})"]
    lines.append(f"  {'':18s}{'Event level':>14s}{'User level':>14s}")
    lines.append(f"  {'mean difference':18s}{report.event_level.estimate:>14.3f}{report.user_level.estimate:>14.3f}")
    lines.append(f"  {'p-value':18s}{_p(report.event_level.p_value):>14s}{_p(report.user_level.p_value):>14s}")
    s = report.self_selection_srm
    flag = "ALERT" if s.alert else "ok"
    lines.append(
        f"  self-selection SRM: present {s.p_treatment:.2%} treatment vs {s.p_control:.2%} control, "
        f"delta_miss {s.delta_miss * 100:+.2f}pp, p={_p(s.test.p_value)} [{flag}]"
    )
    lines.append(f"  assignment SRM p={_p(report.assignment_srm.p_value)}")
    if report.corrected:
        head = "".join(f"{label:>20s}" for _, label in CORRECTION_COLUMNS)
        lines.append(f"  {'':18s}{head}")
        est = "".join(f"{report.corrected[k].estimate:>20.3f}" for k, _ in CORRECTION_COLUMNS)
        pv = "".join(f"{_p(report.corrected[k].p_value):>20s}" for k, _ in CORRECTION_COLUMNS)
        lines.append(f"  {'mean difference':18s}{est}")
        lines.append(f"  {'p-value':18s}{pv}")
        lines.append(f"  note: {POPULATION_NOTE}")
    few = report.diagnostics.get("few_events")
    if few and few["users_flagged"]:
        lines.append(f"  warning: {few['flagged_fraction']:.1%} of users have fewer than "
                     f"{few['min_events']} events; user-level quantiles may run low")
    return "\n".join(lines)
