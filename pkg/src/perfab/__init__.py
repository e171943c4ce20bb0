"""Event-level and user-level performance metrics for A/B experiments, with
self-selection SRM detection and imputation / matching bias reduction."""

from .correct import (
    ImputedValues,
    MatchedWeights,
    SubgroupKey,
    build_subgroups,
    corrected_ate_imputation,
    corrected_ate_matching,
    impute,
    match_weights,
)
from .ingest import (
    Assignment,
    Covariates,
    EventLog,
    IngestError,
    PerfEvent,
    UserCovariates,
    derive_covariates,
    load_assignments,
    load_device_map,
    load_events,
)
from .metrics import (
    UserMetricValue,
    UserMetricValues,
    event_level_ate,
    event_level_quantile,
    few_event_diagnostic,
    user_level_ate,
    user_level_values,
)
from .srm import SrmReport, assignment_srm, self_selection_srm
from .stats import (
    StatsError,
    TestResult,
    cluster_bootstrap_quantile_diff,
    expit,
    quantile,
    two_proportion_test,
    weighted_t_test,
    welch_t_test,
)

__version__ = "0.1.0"
