"""Proximal causal inference for counterfactual survival curves.

Estimates ``psi(t) = P(T(1) > t) - P(T(0) > t)`` under unmeasured
confounding using treatment- and outcome-confounding proxies, with inverse
probability of censoring weights for right-censored outcomes.
"""

from .bridge import (HBridgeSpec, MomentChoice, QBridgeSpec, default_moments, eval_h,
                     eval_q, h_gradient, q_gradient)
from .censoring import (CensoringModel, KaplanMeierCensoring, PositivityError,
                        censoring_influence, censoring_survival_at, fit_censoring)
from .data import (DataError, RoleSpec, SurvivalDataset, TimeGrid, event_time_grid,
                   load_dataset)
from .estimators import (CurveEstimate, EstimationError, FittedBridges, fit_bridges,
                         fit_h_bridge, fit_q_bridge, nuc_ipw_curve, pdr_curve, pipw_curve,
                         pointwise_ci, sup_test)
from .simulation import (DgpParams, SimScenario, StudyFailure, StudyReport, oracle_truth,
                         run_study, sample_dgp)
from .zsolver import MomentProblem, SingularBreadError, SolveResult, solve

__version__ = "0.1.0"
