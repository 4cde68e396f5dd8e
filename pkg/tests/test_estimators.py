from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from proxsurv.bridge import HBridgeSpec, QBridgeSpec, default_moments, eval_h, eval_q
from proxsurv.censoring import PositivityError, fit_censoring
from proxsurv.data import TimeGrid, dataset_from_arrays, event_time_grid
from proxsurv.estimators import (CurveEstimate, EstimationError, FittedBridges, _HMoment,
                                 fit_bridges, fit_h_bridge, fit_q_bridge, fit_propensity,
                                 gauss_legendre_nodes, nuc_ipw_curve, pdr_curve, pipw_curve,
                                 pointwise_ci, sup_test)
from proxsurv.simulation import DgpParams, sample_dgp
from proxsurv.zsolver import SingularBreadError, numerical_jacobian, sandwich_cov

from test_bridge import ALPHA_STAR, BETA_STAR

GRID = TimeGrid([0.25, 0.5, 0.75])


@pytest.fixture(scope="module")
def bridges2000(sim2000, censoring2000):
    tau = event_time_grid(sim2000).tau
    return fit_bridges(sim2000, QBridgeSpec.zeros(1, 1), censoring2000,
                       HBridgeSpec.zeros(1, 1), tau)


def test_gauss_legendre_integrates_polynomials():
    t, w = gauss_legendre_nodes(1.7, 256)
    assert t.size == 256
    for k in range(16):
        assert np.sum(w * t ** k) == pytest.approx(1.7 ** (k + 1) / (k + 1), rel=1e-13)
    with pytest.raises(ValueError):
        gauss_legendre_nodes(1.0, 100)


def test_alpha_recovery_large_n(sim_large):
    data, _ = sim_large
    res = fit_q_bridge(data, QBridgeSpec.zeros(1, 1))
    se = np.sqrt(np.diag(sandwich_cov(res)))
    assert res.converged
    assert np.all(np.abs(res.theta_hat - ALPHA_STAR) < 3 * se)


def test_beta_recovery_without_censoring():
    params = DgpParams(censoring_rate=1e-9, admin_censoring=1e9)
    data, _ = sample_dgp(params, 100_000, np.random.default_rng(31))
    assert data.event.all()
    cens = fit_censoring(data)
    tau = event_time_grid(data).tau
    res = fit_h_bridge(data, HBridgeSpec.zeros(1, 1), None, cens, tau)
    se = np.sqrt(np.diag(sandwich_cov(res)))
    assert res.converged
    assert np.all(np.abs(res.theta_hat - BETA_STAR) < 3 * se)


def test_degenerate_proxies_singular():
    rng = np.random.default_rng(0)
    n = 500
    data = dataset_from_arrays(rng.exponential(size=n), np.ones(n, int), rng.integers(0, 2, n),
                               rng.normal(size=n), np.zeros(n), np.zeros(n))
    with pytest.raises(SingularBreadError):
        fit_q_bridge(data, QBridgeSpec.zeros(1, 1))


def test_tau_zero_singular(sim2000, censoring2000):
    with pytest.raises(SingularBreadError):
        fit_h_bridge(sim2000, HBridgeSpec.zeros(1, 1), None, censoring2000, 0.0)


def test_tau_beyond_positivity(sim2000):
    cens = fit_censoring(sim2000, floor=0.9)
    with pytest.raises(PositivityError):
        fit_h_bridge(sim2000, HBridgeSpec.zeros(1, 1), None, cens, 1.9)


def test_quadrature_refinement(sim2000, censoring2000):
    tau = event_time_grid(sim2000).tau
    b = [fit_h_bridge(sim2000, HBridgeSpec.zeros(1, 1), None, censoring2000, tau, k).theta_hat
         for k in (256, 512)]
    assert np.max(np.abs(b[0] - b[1])) < 1e-6


def test_h_moment_jacobian(sim2000, censoring2000):
    tau = event_time_grid(sim2000).tau
    mom = _HMoment(sim2000, HBridgeSpec.zeros(1, 1), default_moments(), censoring2000, tau, 256)
    beta = np.array([0.5, 0.05, 0.5, 0.7, -0.05])
    num = numerical_jacobian(lambda b: mom.g(b).mean(axis=0), beta)
    np.testing.assert_allclose(mom.jac(beta), num, rtol=1e-6, atol=1e-9)


def test_h_moment_event_term_direct(sim2000, censoring2000):
    """Exact piecewise integral versus brute-force midpoint integration for a few subjects."""
    tau = event_time_grid(sim2000).tau
    mom = _HMoment(sim2000, HBridgeSpec.zeros(1, 1), default_moments(), censoring2000, tau, 256)
    for i in (0, 17, 404):
        upper = min(sim2000.time[i], tau)
        grid = np.linspace(0, upper, 100001)
        mid = (grid[1:] + grid[:-1]) / 2
        s_c = censoring2000.survival(mid)
        ref_const = np.sum(1 / s_c) * (grid[1] - grid[0])
        ref_lin = np.sum(mid / s_c) * (grid[1] - grid[0])
        assert mom.event_term[i, 0] == pytest.approx(ref_const, rel=1e-6)
        assert mom.event_term[i, -1] == pytest.approx(ref_lin, rel=1e-6)
        assert mom.event_term[i, 1] == pytest.approx(sim2000.z[i, 0] * ref_const, rel=1e-6)


def test_beta_influence_matches_bootstrap():
    data, _ = sample_dgp(DgpParams(), 2000, np.random.default_rng([78, 0]))
    cens = fit_censoring(data)
    tau = event_time_grid(data).tau
    full = fit_h_bridge(data, HBridgeSpec.zeros(1, 1), None, cens, tau)
    rng = np.random.default_rng(0)
    boots = []
    for _ in range(300):
        sub = data.subset(rng.integers(0, data.n, data.n))
        res = fit_h_bridge(sub, HBridgeSpec(full.theta_hat), None, fit_censoring(sub), tau)
        if res.converged:
            boots.append(res.theta_hat)
    ratio = np.sqrt(np.diag(sandwich_cov(full))) / np.array(boots).std(axis=0, ddof=1)
    assert np.all(np.abs(ratio - 1) < 0.15)


def test_curve_identities(sim2000, bridges2000):
    for curve in (pipw_curve(sim2000, bridges2000, GRID), pdr_curve(sim2000, bridges2000, GRID)):
        np.testing.assert_array_equal(curve.psi, curve.s1 - curve.s0)
        assert np.all(curve.var >= 0)
        assert np.all(curve.ci_lo <= curve.psi) and np.all(curve.psi <= curve.ci_hi)
        assert np.max(np.abs(curve.influence.mean(axis=0))) < 1e-10
        np.testing.assert_allclose(curve.var, (curve.influence ** 2).mean(axis=0))


def test_uncensored_pipw_equals_plain_estimator():
    params = DgpParams(censoring_rate=1e-9, admin_censoring=1e9)
    data, _ = sample_dgp(params, 1500, np.random.default_rng(4))
    cens = fit_censoring(data)
    bridges = fit_bridges(data, QBridgeSpec.zeros(1, 1), cens)
    curve = pipw_curve(data, bridges, GRID)
    q = eval_q(bridges.q_spec, data.z, data.treat, data.x)
    sign = np.where(data.treat == 1, 1.0, -1.0)
    plain = np.array([np.mean(sign * q * (data.time > t)) for t in GRID.points])
    np.testing.assert_array_equal(cens.survival_matrix(GRID.points), 1.0)
    np.testing.assert_allclose(curve.psi, plain, rtol=0, atol=1e-15)


def test_intercept_only_q_is_horvitz_thompson(sim2000, censoring2000, bridges2000):
    p1 = sim2000.treat.mean()
    alpha = np.array([np.log((1 - p1) / p1), 0.0, 0.0, 0.0])
    forced = replace(bridges2000, q_spec=QBridgeSpec(alpha))
    curve = pipw_curve(sim2000, forced, GRID)
    ys = (sim2000.time[:, None] > GRID.points) / censoring2000.survival_matrix(GRID.points)
    a = sim2000.treat
    ht = (a / p1) @ ys / sim2000.n - ((1 - a) / (1 - p1)) @ ys / sim2000.n
    np.testing.assert_allclose(curve.psi, ht, rtol=1e-12)


class _ZeroQ(QBridgeSpec):
    def exp_part(self, z, a, x):
        e, design, sign, flagged = super().exp_part(z, a, x)
        return -np.ones_like(e), design, sign, flagged


def test_pdr_with_zero_q_is_outcome_regression(sim2000, bridges2000):
    forced = replace(bridges2000, q_spec=_ZeroQ(bridges2000.q_spec.alpha))
    curve = pdr_curve(sim2000, forced, GRID)
    ones, zeros = np.ones(sim2000.n), np.zeros(sim2000.n)
    g = (eval_h(bridges2000.h_spec, GRID.points, sim2000.w, ones, sim2000.x)
         - eval_h(bridges2000.h_spec, GRID.points, sim2000.w, zeros, sim2000.x)).mean(axis=0)
    np.testing.assert_allclose(curve.psi, g, rtol=1e-12)


def test_arm_survival_at_time_zero(sim_large):
    data, _ = sim_large
    cens = fit_censoring(data)
    bridges = fit_bridges(data, QBridgeSpec.zeros(1, 1), cens)
    curve = pipw_curve(data, bridges, TimeGrid([0.0]))
    assert abs(curve.s1[0] - 1) < 0.02 and abs(curve.s0[0] - 1) < 0.02


def test_non_converged_fit_rejected(sim2000, bridges2000):
    bad = replace(bridges2000, q_fit=replace(bridges2000.q_fit, converged=False))
    with pytest.raises(EstimationError):
        pipw_curve(sim2000, bad, GRID)
    with pytest.raises(EstimationError):
        pdr_curve(sim2000, replace(bridges2000, h_fit=None), GRID)


def test_grid_beyond_positivity(sim2000, bridges2000):
    strict = replace(bridges2000, censoring=fit_censoring(sim2000, floor=0.9))
    with pytest.raises(PositivityError):
        pipw_curve(sim2000, strict, TimeGrid([0.25, 1.9]))


def test_pointwise_ci_degenerate():
    curve = CurveEstimate("x", GRID, np.array([0.1, 0.2, 0.3]), np.ones(3), np.ones(3),
                          np.zeros(3), 50, influence=np.zeros((50, 3)))
    out = pointwise_ci(curve, 0.05)
    np.testing.assert_array_equal(out.ci_lo, out.psi)
    np.testing.assert_array_equal(out.ci_hi, out.psi)


def test_sup_test_degenerate_null():
    curve = CurveEstimate("x", GRID, np.zeros(3), np.ones(3), np.ones(3), np.zeros(3), 50,
                          influence=np.zeros((50, 3)))
    assert sup_test(curve, 200, 0) == (0.0, 1.0)
    with pytest.raises(ValueError):
        sup_test(curve, 50, 0)


def test_sup_test_reproducible(sim2000, bridges2000):
    curve = pipw_curve(sim2000, bridges2000, event_time_grid(sim2000))
    a = sup_test(curve, 1000, 42)
    assert a == sup_test(curve, 1000, 42)
    assert a[0] == pytest.approx(np.max(np.abs(curve.psi)))
    assert 1 / 1001 <= a[1] <= 1


def test_propensity_matches_logistic_mle(sim2000):
    res = fit_propensity(sim2000)
    L = np.column_stack([np.ones(sim2000.n), sim2000.x, sim2000.z, sim2000.w])
    p = expit(L @ res.theta_hat)
    np.testing.assert_allclose(L.T @ (sim2000.treat - p), 0.0, atol=1e-6)


def test_nuc_ipw_randomized_matches_unadjusted_km():
    rng = np.random.default_rng(12)
    n = 4000
    a = rng.integers(0, 2, n)
    t = rng.exponential(1 / (0.5 + 0.3 * a))
    data = dataset_from_arrays(t, np.ones(n, int), a, rng.normal(size=n), rng.normal(size=n),
                               rng.normal(size=n))
    cens = fit_censoring(data)
    curve = nuc_ipw_curve(data, cens, GRID, n_boot=20, seed=1)
    km = np.array([np.mean(t[a == 1] > s) - np.mean(t[a == 0] > s) for s in GRID.points])
    np.testing.assert_allclose(curve.psi, km, atol=0.01)
    assert curve.boot.shape == (20, 3)
    assert sup_test(curve)[1] <= 1 / 21


def test_nuc_ipw_without_censoring_is_plain_ipw():
    params = DgpParams(censoring_rate=1e-9, admin_censoring=1e9)
    data, _ = sample_dgp(params, 1000, np.random.default_rng(6))
    curve = nuc_ipw_curve(data, fit_censoring(data), GRID, n_boot=5)
    L = np.column_stack([np.ones(data.n), data.x, data.z, data.w])
    p = expit(L @ fit_propensity(data).theta_hat)
    a = data.treat
    plain = [np.mean(a / p * (data.time > s)) - np.mean((1 - a) / (1 - p) * (data.time > s))
             for s in GRID.points]
    np.testing.assert_allclose(curve.psi, plain, rtol=1e-12)
