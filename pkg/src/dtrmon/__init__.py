"""IPW estimation of dynamic treatment regimes under informative monitoring."""

from .cohort import CohortTable, cohort_from_frame, load_cohort, validate_cohort, write_cohort
from .estimator import (EstimateReport, EstimationSettings, SurvivalCurve, bootstrap_cis, estimate,
                        risk_difference, survival_curve)
from .features import FeatureSpec
from .pipeline import AnalysisSpec, run_analysis, write_outputs
from .propensity import compute_propensities, fit_logistic, fit_models
from .regimes import MonitoringSpec, RegimeSpec, TreatmentRule, adherence_matrix, regime_grid
from .simulator import (ScenarioConfig, counterfactual_truth_mc, enumerate_truth, ipw_population_value,
                        load_scenario, observed_law, simulate_cohort)
from .weights import BinTable, WeightTable, bin_weights, cumulative_weights, truncate_weights

__version__ = "0.1.0"

__all__ = [
    "AnalysisSpec", "BinTable", "CohortTable", "EstimateReport", "EstimationSettings", "FeatureSpec",
    "MonitoringSpec", "RegimeSpec", "ScenarioConfig", "SurvivalCurve", "TreatmentRule", "WeightTable",
    "adherence_matrix", "bin_weights", "bootstrap_cis", "cohort_from_frame", "compute_propensities",
    "counterfactual_truth_mc", "cumulative_weights", "enumerate_truth", "estimate", "fit_logistic",
    "fit_models", "ipw_population_value", "load_cohort", "load_scenario", "observed_law", "regime_grid",
    "risk_difference", "run_analysis", "simulate_cohort", "survival_curve", "truncate_weights",
    "validate_cohort", "write_cohort", "write_outputs",
]
