"""Proximal IPW and doubly robust estimators of survival-curve contrasts.

For each arm ``a`` the counterfactual survival ``P(T(a) > t)`` is estimated by

PIPW::

    E_n[ 1(A=a) q(Z, a, X) Y(t) / S_C(t) ]

PDR::

    E_n[ 1(A=a) q(Z, a, X) (Y(t) / S_C(t) - h(t, W, a, X)) + h(t, W, a, X) ]

with ``Y(t) = 1(observed time > t)``, and ``psi(t)`` is the treated minus
control difference. Standard errors come from influence functions that add
the estimation effect of the bridge parameters and of the censoring curve to
the plug-in term.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, roots_legendre
from scipy.stats import norm

from .bridge import (BridgeOverflowWarning, HBridgeSpec, MomentChoice, QBridgeSpec,
                     default_moments, eval_h, eval_q, q_gradient)
from .censoring import CensoringModel, PositivityError, fit_censoring
from .data import SurvivalDataset, TimeGrid
from .zsolver import MomentProblem, SingularBreadError, SolveResult, solve

logger = logging.getLogger(__name__)

QUAD_ORDER = 8
_CHUNK = 4096


class EstimationError(RuntimeError):
    """A nuisance fit did not converge or its output is unusable."""


# ---------------------------------------------------------------------------
# bridge fitting


def _q_problem(data: SurvivalDataset, q_spec: QBridgeSpec, moments: MomentChoice):
    N = moments.n_fn(data.w, data.treat, data.x)
    n_plus = (moments.n_fn(data.w, np.ones(data.n), data.x)
              + moments.n_fn(data.w, np.zeros(data.n), data.x))
    if N.shape[1] != q_spec.alpha.size:
        raise ValueError(f"n(W, A, X) has dimension {N.shape[1]}, alpha has {q_spec.alpha.size}")

    def parts(alpha):
        return q_spec.with_params(alpha).exp_part(data.z, data.treat, data.x)

    def g(alpha):
        e, _, _, flagged = parts(alpha)
        if flagged:
            return np.full(N.shape, np.nan)
        return (1.0 + e)[:, None] * N - n_plus

    def jac(alpha):
        e, design, sign, _ = parts(alpha)
        return N.T @ ((e * sign)[:, None] * design) / data.n

    return g, jac


def fit_q_bridge(data: SurvivalDataset, q_spec: QBridgeSpec,
                 moments: Optional[MomentChoice] = None) -> SolveResult:
    """Solve ``E_n[q(Z, A, X; alpha) N - N_+] = 0`` starting from ``q_spec.alpha``.

    ``N = n(W, A, X)`` and ``N_+ = n(W, 1, X) + n(W, 0, X)``. Censoring plays
    no role here.
    """
    moments = moments or default_moments()
    g, jac = _q_problem(data, q_spec, moments)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BridgeOverflowWarning)
        return solve(MomentProblem(g, q_spec.alpha, jac))


def gauss_legendre_nodes(tau: float, nodes: int = 256):
    """Composite Gauss-Legendre rule on ``[0, tau]`` with panels of QUAD_ORDER nodes."""
    if nodes % QUAD_ORDER:
        raise ValueError(f"nodes must be a multiple of {QUAD_ORDER}")
    panels = nodes // QUAD_ORDER
    x, w = roots_legendre(QUAD_ORDER)
    edges = np.linspace(0.0, tau, panels + 1)
    half = np.diff(edges) / 2
    mid = (edges[:-1] + edges[1:]) / 2
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return t, wt


class _HMoment:
    """Per-subject h-bridge moment with IPCW, plus its analytic Jacobian."""

    def __init__(self, data, h_spec, moments, censoring, tau, nodes):
        self.data, self.spec = data, h_spec
        self.coef = moments.m_coef(data.z, data.treat, data.x)     # (n, d, J)
        if self.coef.shape[1] != h_spec.beta.size:
            raise ValueError(f"dm/dt has dimension {self.coef.shape[1]}, "
                             f"beta has {h_spec.beta.size}")
        self.J = self.coef.shape[2]
        self.upper = np.minimum(data.time, tau)
        kpow = np.stack([censoring.integral_inverse_survival(self.upper, j)
                         for j in range(self.J)], axis=1)
        self.event_term = np.einsum("idj,ij->id", self.coef, kpow)
        self.t, self.w = gauss_legendre_nodes(tau, nodes)
        self.tpow = self.t[None, :] ** np.arange(self.J + 2)[:, None]   # (J+2, Q)
        self.features = h_spec.features(data.w, data.treat, data.x)
        self._cache_key = None

    def _moments_of_h(self, beta):
        """``I_j(i) = int_0^tau t^j h_i(t) dt`` for j < J + 2, and a clamp flag."""
        key = beta.tobytes()
        if key == self._cache_key:
            return self._cache
        spec = self.spec.with_params(beta)
        rate = spec.rate(self.data.w, self.data.treat, self.data.x)
        out = np.empty((self.data.n, self.J + 2))
        flagged = False
        wt = self.tpow * self.w[None, :]
        for lo in range(0, self.data.n, _CHUNK):
            idx = -np.outer(rate[lo:lo + _CHUNK], self.t) - beta[1] * self.t[None, :] ** 2
            if np.any(np.abs(idx) > 500.0):
                flagged = True
                idx = np.clip(idx, -500.0, 500.0)
            out[lo:lo + _CHUNK] = np.exp(idx) @ wt.T
        self._cache_key, self._cache = key, (out, flagged)
        return out, flagged

    def g(self, beta):
        I, flagged = self._moments_of_h(beta)
        if flagged:
            return np.full(self.event_term.shape, np.nan)
        return self.event_term - np.einsum("idj,ij->id", self.coef, I[:, :self.J])

    def jac(self, beta):
        I, _ = self._moments_of_h(beta)
        a1 = np.einsum("idj,ij->id", self.coef, I[:, 1:1 + self.J])
        a2 = np.einsum("idj,ij->id", self.coef, I[:, 2:2 + self.J])
        powers = self.spec.powers
        cols = [((a2 if p == 2 else a1) * self.features[:, [l]]).mean(axis=0)
                for l, p in enumerate(powers)]
        return np.column_stack(cols)


def fit_h_bridge(data: SurvivalDataset, h_spec: HBridgeSpec, moments: Optional[MomentChoice],
                 censoring: CensoringModel, tau: float, nodes: int = 256) -> SolveResult:
    """Solve the IPCW outcome-bridge equation on ``[0, tau]``, starting from ``h_spec.beta``.

    Per subject::

        g_i(beta) = int_0^{min(T_i, tau)} mdot_i(t) / S_C(t) dt - int_0^tau h_i(t; beta) mdot_i(t) dt

    The first integral is exact (``mdot`` polynomial, ``S_C`` a step
    function); the second uses composite Gauss-Legendre with ``nodes`` points.
    The returned influence vectors include the effect of estimating ``S_C``.
    """
    if tau <= 0:
        raise SingularBreadError("empty integration range (tau <= 0)")
    low = censoring.min_survival_before(tau)
    if low < censoring.floor:
        raise PositivityError(f"censoring survival {low:.4g} before tau={tau:.4g} "
                              f"is below the floor {censoring.floor}")
    moments = moments or default_moments()
    mom = _HMoment(data, h_spec, moments, censoring, tau, nodes)
    result = solve(MomentProblem(mom.g, h_spec.beta, mom.jac))

    omega = censoring.at_risk_tail(mom.coef, mom.upper)
    kappa = censoring.integrate_increments(omega)
    gi = mom.g(result.theta_hat)
    gi = gi - gi.mean(axis=0) + kappa
    influence = -np.linalg.solve(result.bread, gi.T).T
    return replace(result, influence=influence, info={**result.info, "tau": tau})


@dataclass
class FittedBridges:
    q_spec: QBridgeSpec
    q_fit: SolveResult
    censoring: CensoringModel
    moments: MomentChoice
    h_spec: Optional[HBridgeSpec] = None
    h_fit: Optional[SolveResult] = None
    tau: Optional[float] = None


def fit_bridges(data: SurvivalDataset, q_spec: QBridgeSpec, censoring: CensoringModel,
                h_spec: Optional[HBridgeSpec] = None, tau: Optional[float] = None,
                moments: Optional[MomentChoice] = None, nodes: int = 256) -> FittedBridges:
    """Fit q (and h when ``h_spec`` is given); raises EstimationError on non-convergence."""
    moments = moments or default_moments()
    q_fit = fit_q_bridge(data, q_spec, moments)
    if not q_fit.converged:
        raise EstimationError(f"q-bridge did not converge (residual {q_fit.residual_norm:.3g})")
    fitted = FittedBridges(q_spec.with_params(q_fit.theta_hat), q_fit, censoring, moments)
    if h_spec is not None:
        if tau is None:
            raise ValueError("tau is required to fit the outcome bridge")
        h_fit = fit_h_bridge(data, h_spec, moments, censoring, tau, nodes)
        if not h_fit.converged:
            raise EstimationError(f"h-bridge did not converge (residual {h_fit.residual_norm:.3g})")
        fitted.h_spec = h_spec.with_params(h_fit.theta_hat)
        fitted.h_fit = h_fit
        fitted.tau = tau
    return fitted


# ---------------------------------------------------------------------------
# curves


@dataclass
class CurveEstimate:
    """Estimated contrast ``psi(t) = S_1(t) - S_0(t)`` on a grid.

    ``var`` is the per-point asymptotic variance ``E_n[eps_i(t)^2]``, so the
    standard error is ``sqrt(var / n)``.
    """

    label: str
    grid: TimeGrid
    psi: np.ndarray
    s1: np.ndarray
    s0: np.ndarray
    var: np.ndarray
    n: int
    influence: Optional[np.ndarray] = None
    boot: Optional[np.ndarray] = None
    level: float = 0.05
    ci_lo: Optional[np.ndarray] = None
    ci_hi: Optional[np.ndarray] = None
    sup_stat: Optional[float] = None
    sup_pvalue: Optional[float] = None
    info: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var / self.n)


def _stratum_mean(values, labels, n):
    """Row j gets ``n^-1 sum_{i in stratum(j)} values_i``."""
    out = np.empty_like(values)
    for s in np.unique(labels):
        m = labels == s
        out[m] = values[m].sum(axis=0) / n
    return out


def _common(data, bridges, grid):
    if not bridges.q_fit.usable:
        raise EstimationError("q-bridge fit did not converge")
    t = grid.points
    bridges.censoring.check_positivity(t)
    a = data.treat
    sign = np.where(a == 1, 1.0, -1.0)
    qa = eval_q(bridges.q_spec, data.z, a, data.x)
    grad = q_gradient(bridges.q_spec, data.z, a, data.x)
    S = bridges.censoring.survival_matrix(t)
    ys = (data.time[:, None] > t[None, :]) / S
    return t, a, sign, qa, grad, S, ys


def _censoring_term(bridges, d_dS, t, n):
    phi = bridges.censoring.influence_matrix(t)
    return _stratum_mean(d_dS, bridges.censoring.stratum_labels(), n) * phi


def _finish_curve(label, grid, D, s1, s0, corrections, n, level=0.05):
    psi = s1 - s0
    eps = D - D.mean(axis=0) + sum(corrections)
    curve = CurveEstimate(label, grid, psi, s1, s0, (eps ** 2).mean(axis=0), n, influence=eps)
    return pointwise_ci(curve, level)


def pipw_curve(data: SurvivalDataset, bridges: FittedBridges, grid: TimeGrid,
               level: float = 0.05) -> CurveEstimate:
    """Proximal IPW survival difference with IPCW and influence-function variance."""
    t, a, sign, qa, grad, S, ys = _common(data, bridges, grid)
    n = data.n
    wq = sign * qa
    D = wq[:, None] * ys
    s1 = ((a == 1) * qa) @ ys / n
    s0 = ((a == 0) * qa) @ ys / n
    d_alpha = (sign[:, None] * grad).T @ ys / n                   # (p, G)
    alpha_term = bridges.q_fit.influence @ d_alpha
    cens_term = _censoring_term(bridges, -wq[:, None] * ys / S, t, n)
    return _finish_curve("pipw", grid, D, s1, s0, [alpha_term, cens_term], n, level)


def pdr_curve(data: SurvivalDataset, bridges: FittedBridges, grid: TimeGrid,
              level: float = 0.05) -> CurveEstimate:
    """Proximal doubly robust survival difference with IPCW."""
    if bridges.h_fit is None or not bridges.h_fit.usable:
        raise EstimationError("PDR needs a converged outcome-bridge fit")
    t, a, sign, qa, grad, S, ys = _common(data, bridges, grid)
    n = data.n
    h_spec = bridges.h_spec
    ones, zeros = np.ones(n), np.zeros(n)
    h1 = eval_h(h_spec, t, data.w, ones, data.x)
    h0 = eval_h(h_spec, t, data.w, zeros, data.x)
    ha = np.where((a == 1)[:, None], h1, h0)
    wq = sign * qa
    resid = ys - ha
    D = wq[:, None] * resid + h1 - h0
    s1 = (((a == 1) * qa)[:, None] * (ys - h1) + h1).mean(axis=0)
    s0 = (((a == 0) * qa)[:, None] * (ys - h0) + h0).mean(axis=0)

    d_alpha = (sign[:, None] * grad).T @ resid / n
    tp = t[None, :] ** h_spec.powers[:, None]                      # (p, G)
    d_beta = np.zeros((h_spec.beta.size, t.size))
    for arm, h_arm, arm_sign in ((1, h1, 1.0), (0, h0, -1.0)):
        f = h_spec.features(data.w, ones * arm, data.x)
        r = (1.0 - (a == arm) * qa)[:, None] * h_arm
        d_beta -= arm_sign * (f.T @ r) / n * tp
    alpha_term = bridges.q_fit.influence @ d_alpha
    beta_term = bridges.h_fit.influence @ d_beta
    cens_term = _censoring_term(bridges, -wq[:, None] * ys / S, t, n)
    return _finish_curve("pdr", grid, D, s1, s0, [alpha_term, beta_term, cens_term], n, level)


def pointwise_ci(curve: CurveEstimate, level: float = 0.05) -> CurveEstimate:
    """Wald intervals ``psi +/- z_{1 - level/2} * se`` at every grid point."""
    z = norm.ppf(1 - level / 2)
    se = curve.se
    return replace(curve, level=level, ci_lo=curve.psi - z * se, ci_hi=curve.psi + z * se)


def sup_test(curve: CurveEstimate, draws: int = 1000, seed: int = 0,
             block: int = 100) -> tuple[float, float]:
    """Supremum test of ``psi(t) == 0`` over the grid.

    With influence curves, the null law of ``sup_t |psi(t)|`` is simulated by
    Gaussian multipliers: ``G_m(t) = E_n[eps_i(t) J_i]``, ``J ~ N(0, 1)``.
    Curves that only carry bootstrap replicates use ``sup_t |psi_b - psi|``.
    The p-value is ``(1 + #{sup|G_m| >= stat}) / (draws + 1)``.
    """
    stat = float(np.max(np.abs(curve.psi)))
    if curve.influence is not None:
        if draws < 100:
            raise ValueError("draws must be at least 100")
        rng = np.random.default_rng(seed)
        eps = curve.influence
        n = eps.shape[0]
        sups = []
        for lo in range(0, draws, block):
            J = rng.standard_normal((min(block, draws - lo), n))
            sups.append(np.max(np.abs(J @ eps / n), axis=1))
        sups = np.concatenate(sups)
    elif curve.boot is not None:
        sups = np.max(np.abs(curve.boot - curve.psi[None, :]), axis=1)
        draws = sups.size
    else:
        raise ValueError("curve has neither influence curves nor bootstrap replicates")
    pvalue = (1 + int(np.sum(sups >= stat))) / (draws + 1)
    return stat, pvalue


def with_sup_test(curve: CurveEstimate, draws: int = 1000, seed: int = 0) -> CurveEstimate:
    stat, p = sup_test(curve, draws, seed)
    return replace(curve, sup_stat=stat, sup_pvalue=p)


# ---------------------------------------------------------------------------
# comparator assuming no unmeasured confounding


def fit_propensity(data: SurvivalDataset) -> SolveResult:
    """Logistic regression of A on (1, X, Z, W) via its score equations."""
    L = np.column_stack([np.ones(data.n), data.x, data.z, data.w])
    a = data.treat.astype(float)

    def g(gamma):
        return (a - expit(L @ gamma))[:, None] * L

    def jac(gamma):
        p = expit(L @ gamma)
        return -(L * (p * (1 - p))[:, None]).T @ L / data.n

    res = solve(MomentProblem(g, np.zeros(L.shape[1]), jac))
    if not res.converged:
        raise EstimationError("propensity model did not converge (possible separation)")
    return res


def _nuc_ipw_psi(data, censoring, t):
    gamma = fit_propensity(data).theta_hat
    L = np.column_stack([np.ones(data.n), data.x, data.z, data.w])
    p = expit(L @ gamma)
    censoring.check_positivity(t)
    ys = (data.time[:, None] > t[None, :]) / censoring.survival_matrix(t)
    a = data.treat
    s1 = (a / p) @ ys / data.n
    s0 = ((1 - a) / (1 - p)) @ ys / data.n
    return s1, s0


def nuc_ipw_curve(data: SurvivalDataset, censoring: CensoringModel, grid: TimeGrid,
                  n_boot: int = 200, seed: int = 0, level: float = 0.05) -> CurveEstimate:
    """Horvitz-Thompson IPW/IPCW contrast with a logistic propensity on (X, Z, W).

    Valid only without unmeasured confounding; standard errors by the
    nonparametric bootstrap (censoring model and propensity refit per draw).
    """
    t = grid.points
    s1, s0 = _nuc_ipw_psi(data, censoring, t)
    psi = s1 - s0
    rng = np.random.default_rng(seed)
    kind = getattr(censoring, "kind", "marginal_km")
    boots, failures = [], 0
    for _ in range(n_boot):
        idx = rng.integers(0, data.n, data.n)
        sub = data.subset(idx)
        try:
            b1, b0 = _nuc_ipw_psi(sub, fit_censoring(sub, kind, censoring.floor), t)
        except (EstimationError, PositivityError, SingularBreadError, ValueError):
            failures += 1
            continue
        boots.append(b1 - b0)
    if len(boots) < 2:
        raise EstimationError("bootstrap failed for the NUC comparator")
    boot = np.array(boots)
    var = data.n * boot.var(axis=0, ddof=1)
    curve = CurveEstimate("nuc_ipw", grid, psi, s1, s0, var, data.n, boot=boot,
                          info={"boot_failures": failures})
    return pointwise_ci(curve, level)
