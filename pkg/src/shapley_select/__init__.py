"""Shapley-value data valuation and value-filtered batch active learning.

The library values labeled points exactly under a KNN soft-vote utility,
extrapolates those values onto an unlabeled pool with per-class
nearest-neighbor regression, keeps only the top-valued fraction of the
pool, and hands that subset to a diversity selector. A simulation loop
and a timing benchmark reproduce the efficiency and robustness behavior
of the approach at desk scale.
"""

from .data import (
    FeatureDataset,
    ScenarioResult,
    ScenarioSpec,
    SplitAssignment,
    SplitSizes,
    generate_scenario,
    load_dataset,
    reveal_labels,
    save_dataset,
)
from .errors import (
    CapacityError,
    FormatError,
    NumericError,
    ShapleySelectError,
    ValidationError,
)
from .extrapolation import (
    AggregatedValues,
    Candidates,
    ClassConditionalValues,
    RegressionSpec,
    ValueRegressors,
    aggregate,
    candidate_classes,
    fit_value_regressors,
    predict_values,
)
from .loop import (
    ExperimentReport,
    LoopConfig,
    LoopState,
    MethodSpec,
    evaluate_proxy,
    new_state,
    run_experiment,
    run_round,
)
from .selection import (
    PreselectSpec,
    ProbeSpec,
    SelectionBatch,
    ads_enhanced,
    badge_select,
    coreset_greedy,
    entropy_select,
    k_medians,
    kcenter_cover_radius,
    preselect,
    random_select,
)
from .valuation import (
    McSpec,
    UtilitySpec,
    ValuationResult,
    brute_force_shapley,
    knn_shapley_exact,
    knn_utility,
    tmc_shapley,
)

__version__ = "0.1.0"
