"""Monte Carlo study of the proximal survival estimators.

Data-generating process (all constants live in :class:`DgpParams`)::

    X, U ~ max(Normal(1.1, 0.75^2), 0)             independently
    P(A = 1 | X, U) = expit(0.3 + 0.4 X - 0.6 U)
    Z ~ Normal(-0.2 - 0.3 X + 0.65 U, 0.5^2)
    W ~ Normal(-0.6 + 0.4 X + 0.65 U, 0.5^2)
    T ~ Exponential(rate 0.1 + 0.6 A + 0.25 X + 0.5 U)
    C ~ min(Exponential(rate 0.2), 2)

Only (T ^ C, 1(T < C), A, X, Z, W) reach the estimators; U stays latent.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .bridge import HBridgeSpec, QBridgeSpec
from .censoring import PositivityError, fit_censoring
from .data import SurvivalDataset, TimeGrid, event_time_grid
from .estimators import (EstimationError, fit_h_bridge, fit_q_bridge, FittedBridges,
                         nuc_ipw_curve, pdr_curve, pipw_curve, sup_test)
from .bridge import default_moments
from .zsolver import SingularBreadError

logger = logging.getLogger(__name__)

ESTIMATORS = ("pipw", "pdr", "nuc_ipw")
H_MISSPEC = {"none": "identity", "sqrt_plus_one": "sqrt_abs_plus_one", "sqrt": "sqrt_abs"}
MAX_FAIL_FRACTION = 0.05

_FIT_ERRORS = (EstimationError, SingularBreadError, PositivityError, np.linalg.LinAlgError,
               FloatingPointError)


@dataclass(frozen=True)
class DgpParams:
    x_mean: float = 1.1
    x_sd: float = 0.75
    u_mean: float = 1.1
    u_sd: float = 0.75
    ps_coef: tuple[float, float, float] = (0.3, 0.4, -0.6)        # 1, X, U
    z_coef: tuple[float, float, float] = (-0.2, -0.3, 0.65)       # 1, X, U
    z_sd: float = 0.5
    w_coef: tuple[float, float, float] = (-0.6, 0.4, 0.65)        # 1, X, U
    w_sd: float = 0.5
    hazard: tuple[float, float, float, float] = (0.1, 0.6, 0.25, 0.5)  # 1, A, X, U
    censoring_rate: float = 0.2
    admin_censoring: float = 2.0

    def with_treatment_effect(self, coef: float) -> "DgpParams":
        h = list(self.hazard)
        h[1] = coef
        return replace(self, hazard=tuple(h))


def sample_dgp(params: DgpParams, n: int, rng) -> tuple[SurvivalDataset, np.ndarray]:
    """Draw ``n`` subjects; returns the dataset and the latent ``U`` (for checks only)."""
    rng = np.random.default_rng(rng)
    p = params
    x = np.maximum(rng.normal(p.x_mean, p.x_sd, n), 0.0)
    u = np.maximum(rng.normal(p.u_mean, p.u_sd, n), 0.0)
    a = (rng.uniform(size=n) < expit(p.ps_coef[0] + p.ps_coef[1] * x + p.ps_coef[2] * u)).astype(int)
    z = rng.normal(p.z_coef[0] + p.z_coef[1] * x + p.z_coef[2] * u, p.z_sd)
    w = rng.normal(p.w_coef[0] + p.w_coef[1] * x + p.w_coef[2] * u, p.w_sd)
    rate = p.hazard[0] + p.hazard[1] * a + p.hazard[2] * x + p.hazard[3] * u
    t_fail = rng.exponential(1.0 / rate)
    c = np.minimum(rng.exponential(1.0 / p.censoring_rate, n), p.admin_censoring)
    data = SurvivalDataset(np.minimum(t_fail, c), (t_fail < c).astype(int), a,
                           x[:, None], z[:, None], w[:, None], ("x",), ("z",), ("w",))
    return data, u


def _truncated_normal_mgf(s, mean, sd):
    """``E[exp(-s V)]`` for ``V = max(Normal(mean, sd^2), 0)``."""
    return norm.cdf(-mean / sd) + np.exp(-s * mean + 0.5 * (s * sd) ** 2) \
        * norm.cdf((mean - s * sd ** 2) / sd)


def oracle_truth(params: DgpParams, t) -> np.ndarray:
    """True ``psi(t) = P(T(1) > t) - P(T(0) > t)``, exact.

    Uses independence of X and U and the closed-form Laplace transform of a
    zero-truncated normal.
    """
    t = np.asarray(t, dtype=float)
    h0, ha, hx, hu = params.hazard
    common = np.exp(-h0 * t) * _truncated_normal_mgf(hx * t, params.x_mean, params.x_sd) \
        * _truncated_normal_mgf(hu * t, params.u_mean, params.u_sd)
    return common * (np.exp(-ha * t) - 1.0)


@dataclass(frozen=True)
class SimScenario:
    n: int = 2000
    reps: int = 200
    seed: int = 0
    estimator: str = "pipw"
    q_misspec: bool = False
    h_misspec: str = "none"
    eval_times: tuple[float, ...] = (0.25, 0.5, 0.75)
    dgp: DgpParams = field(default_factory=DgpParams)
    censoring_kind: str = "marginal_km"
    grid_quantile: float = 0.95
    level: float = 0.05
    sup_test: bool = False
    sup_draws: int = 1000
    sup_level: float = 0.05
    n_boot: int = 200
    restarts: int = 5
    accept_least_squares: bool = True

    def __post_init__(self):
        object.__setattr__(self, "eval_times", tuple(float(t) for t in self.eval_times))
        if self.n < 100:
            raise ValueError("n must be at least 100")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.h_misspec not in H_MISSPEC:
            raise ValueError(f"h_misspec must be one of {sorted(H_MISSPEC)}")
        if not self.eval_times or any(not 0 < t < self.dgp.admin_censoring for t in self.eval_times):
            raise ValueError("eval_times must lie strictly inside (0, admin censoring time)")

    @property
    def label(self) -> str:
        parts = [self.estimator]
        if self.estimator != "nuc_ipw":
            if self.q_misspec:
                parts.append("q_sqrt")
            if self.estimator == "pdr" and self.h_misspec != "none":
                parts.append(f"h_{self.h_misspec}")
        return "+".join(parts)


@dataclass
class StudyReport:
    scenario: SimScenario
    rows: list[dict]
    n_fail: int
    sup_test: Optional[dict] = None
    failures: list[str] = field(default_factory=list)

    def row(self, t: float) -> dict:
        for r in self.rows:
            if abs(r["t"] - t) < 1e-12:
                return r
        raise KeyError(t)

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        write_report_csv([self], buf)
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        sc = asdict(self.scenario)
        return {"estimator": self.scenario.label, "scenario": sc, "rows": self.rows,
                "n_fail": self.n_fail, "sup_test": self.sup_test}


CSV_COLUMNS = ("estimator", "t", "bias", "see", "sd", "cp", "n_fail")


def write_report_csv(reports: Sequence[StudyReport], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        for r in rep.rows:
            writer.writerow([rep.scenario.label, repr(r["t"]), repr(r["bias"]), repr(r["see"]),
                             repr(r["sd"]), repr(r["cp"]), rep.n_fail])


class StudyFailure(RuntimeError):
    """More than 5% of replications failed to produce an estimate."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def fit_with_restarts(fit, spec, rng, restarts, accept_least_squares=True):
    """Fit from ``spec``'s parameters, then from Gaussian(0, 0.5^2) starts on failure.

    A misspecified bridge may have no exact root in a given sample. If every
    start fails to find one, the stationary point of ``||E_n g||^2`` with the
    smallest residual is returned, marked ``accepted_least_squares``.
    """
    last_err = None
    fallback = None
    params = spec.alpha if isinstance(spec, QBridgeSpec) else spec.beta
    for attempt in range(restarts + 1):
        start = params if attempt == 0 else rng.normal(0.0, 0.5, params.size)
        try:
            res = fit(spec.with_params(start))
        except _FIT_ERRORS as exc:
            last_err = exc
            continue
        if res.converged:
            return res
        if res.stationary and np.isfinite(res.residual_norm) and (
                fallback is None or res.residual_norm < fallback.residual_norm):
            fallback = res
        last_err = EstimationError(f"no convergence (residual {res.residual_norm:.3g})")
    if accept_least_squares and fallback is not None:
        return replace(fallback, info={**fallback.info, "accepted_least_squares": True})
    raise EstimationError(f"bridge fit failed after {restarts} restarts: {last_err}")


def fit_scenario_bridges(sc: SimScenario, data: SurvivalDataset, censoring, rng) -> FittedBridges:
    moments = default_moments()
    q0 = QBridgeSpec.zeros(data.z.shape[1], data.x.shape[1],
                           "sqrt_abs" if sc.q_misspec else "identity")
    q_fit = fit_with_restarts(lambda s: fit_q_bridge(data, s, moments), q0, rng,
                                 sc.restarts, sc.accept_least_squares)
    fitted = FittedBridges(q0.with_params(q_fit.theta_hat), q_fit, censoring, moments)
    if sc.estimator == "pdr":
        tau = event_time_grid(data, sc.grid_quantile).tau
        h0 = HBridgeSpec.zeros(data.w.shape[1], data.x.shape[1], H_MISSPEC[sc.h_misspec])
        h_fit = fit_with_restarts(
            lambda s: fit_h_bridge(data, s, moments, censoring, tau), h0, rng,
            sc.restarts, sc.accept_least_squares)
        fitted.h_spec, fitted.h_fit, fitted.tau = h0.with_params(h_fit.theta_hat), h_fit, tau
    return fitted


def _curve(sc, data, censoring, bridges, grid, seed):
    if sc.estimator == "nuc_ipw":
        return nuc_ipw_curve(data, censoring, grid, sc.n_boot, seed, sc.level)
    if sc.estimator == "pipw":
        return pipw_curve(data, bridges, grid, sc.level)
    return pdr_curve(data, bridges, grid, sc.level)


def run_replication(sc: SimScenario, r: int) -> dict:
    """One replication; deterministic in ``(sc.seed, r)``."""
    data, _ = sample_dgp(sc.dgp, sc.n, np.random.default_rng([sc.seed, r]))
    aux = np.random.default_rng([sc.seed, r, 1])
    try:
        censoring = fit_censoring(data, sc.censoring_kind)
        bridges = None
        if sc.estimator != "nuc_ipw":
            bridges = fit_scenario_bridges(sc, data, censoring, aux)
        curve = _curve(sc, data, censoring, bridges, TimeGrid(sc.eval_times), [sc.seed, r, 2])
        out = {"ok": True, "psi": curve.psi, "se": curve.se, "lo": curve.ci_lo, "hi": curve.ci_hi}
        if sc.sup_test:
            grid = event_time_grid(data, sc.grid_quantile)
            if bridges is not None and bridges.tau is not None:
                grid = grid.truncate(bridges.tau, inclusive=True)
            full = _curve(sc, data, censoring, bridges, grid, [sc.seed, r, 2])
            _, p = sup_test(full, sc.sup_draws, [sc.seed, r, 3])
            out["sup_p"] = p
        return out
    except _FIT_ERRORS as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _workers(requested: Optional[int]) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("PROXSURV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_study(scenario: SimScenario, workers: Optional[int] = None) -> StudyReport:
    """Run ``scenario.reps`` replications and aggregate bias, SEE, SD and coverage.

    Raises :class:`StudyFailure` (carrying the report) when more than 5% of
    replications fail.
    """
    sc = scenario
    nw = min(_workers(workers), sc.reps)
    if nw > 1:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(run_replication, [sc] * sc.reps, range(sc.reps)))
    else:
        results = [run_replication(sc, r) for r in range(sc.reps)]

    ok = [res for res in results if res["ok"]]
    failures = [f"rep {r}: {res['error']}" for r, res in enumerate(results) if not res["ok"]]
    truth = oracle_truth(sc.dgp, np.array(sc.eval_times))
    rows = []
    if ok:
        est = np.array([res["psi"] for res in ok])
        se = np.array([res["se"] for res in ok])
        hit = np.array([(res["lo"] <= truth) & (truth <= res["hi"]) for res in ok])
        for j, t in enumerate(sc.eval_times):
            rows.append({
                "t": t, "truth": float(truth[j]),
                "bias": float(est[:, j].mean() - truth[j]),
                "see": float(est[:, j].std(ddof=1)) if len(ok) > 1 else 0.0,
                "sd": float(se[:, j].mean()),
                "cp": float(hit[:, j].mean()),
            })
    sup = None
    if sc.sup_test and ok:
        pvals = np.array([res["sup_p"] for res in ok])
        sup = {"level": sc.sup_level, "draws": sc.sup_draws,
               "rejection_rate": float(np.mean(pvals < sc.sup_level)),
               "mean_pvalue": float(pvals.mean())}
    report = StudyReport(sc, rows, len(failures), sup, failures)
    if len(failures) > MAX_FAIL_FRACTION * sc.reps:
        raise StudyFailure(f"{len(failures)} of {sc.reps} replications failed "
                           f"for {sc.label}", report)
    return report


def report_json(reports: Sequence[StudyReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
