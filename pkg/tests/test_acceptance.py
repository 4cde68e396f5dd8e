"""Acceptance criteria, one test each.

Every test records a single ``PASS``/``FAIL`` line (printed immediately and
repeated in the terminal summary) before asserting. Criterion 7 needs a
user-supplied copy of the RHC data: set ``PROXSURV_RHC_CSV`` to a numeric,
pre-encoded CSV (time in months, 0/1 event and treatment columns) and, if
its column names differ from the defaults below, ``PROXSURV_RHC_ROLES`` to a
JSON role document.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (roughly six
minutes on one core).
"""

import json
import os

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from proxsurv.bridge import HBridgeSpec, QBridgeSpec, eval_h, eval_q, h_gradient, q_gradient
from proxsurv.censoring import censoring_influence, fit_censoring
from proxsurv.cli import AnalyzeConfig, analyze_dataset
from proxsurv.data import TimeGrid, event_time_grid
from proxsurv.estimators import fit_bridges, fit_h_bridge, fit_q_bridge, pipw_curve
from proxsurv.simulation import DgpParams, SimScenario, sample_dgp
from proxsurv.zsolver import MomentProblem, sandwich_cov, solve

TIMES = (0.25, 0.5, 0.75)
N, B, SEED = 2000, 200, 0

RHC_ROLES = {"time": "time", "event": "event", "treat": "swang1",
             "z": ["pafi1", "paco21"], "w": ["ph1", "hema1"],
             "x": ["age", "sex", "cat1_coma", "cat2_coma", "dnr1", "surv2md1", "aps1"]}


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def _fmt(values):
    return "(" + ", ".join(f"{v:+.4f}" for v in values) + ")"


def coefficient_matching(p: DgpParams):
    """Bridge parameters solving the matching equations for a DGP, in closed form.

    With ``Z | U, X ~ N(mz, sz^2)`` linear in ``(X, U)``, ``E[exp(c Z) | U, X]``
    is log-linear, so ``E[q | A = a, U, X] = 1 / P(A = a | U, X)`` and
    ``E[h | A, U, X] = P(T > t | A, U, X)`` reduce to linear equations in
    the coefficients of ``1, X, U`` (and ``t^2`` for h).
    """
    g0, gx, gu = p.ps_coef
    z0, zx, zu = p.z_coef
    w0, wx, wu = p.w_coef
    h0, ha, hx, hu = p.hazard
    # a = 0 arm: q - 1 = exp(-(a0 + az Z + ax X)) must equal exp(g0 + gx X + gu U)
    az = -gu / zu
    ax = -gx - zx * az
    half_var = az ** 2 * p.z_sd ** 2 / 2
    a0 = -g0 - az * z0 + half_var
    # a = 1 arm: exp(a0 + aa + az Z + ax X) must equal exp(-(g0 + gx X + gu U))
    aa = -g0 - az * z0 - half_var - a0
    # h: exp(-t (b0 + ba A + bw W + bx X) - b1 t^2) averaged over W | U, X
    bw = hu / wu
    bx = hx - wx * bw
    b0 = h0 - w0 * bw
    b1 = bw ** 2 * p.w_sd ** 2 / 2
    return np.array([a0, aa, az, ax]), np.array([b0, b1, ha, bw, bx])


# frozen from a hand derivation before the estimators existed
ALPHA_FROZEN = np.array([-0.0088757, -0.2130178, 0.9230769, -0.1230769])
BETA_FROZEN = np.array([0.5615385, 0.0739645, 0.6, 0.7692308, -0.0576923])


# ---------------------------------------------------------------------------


def test_criterion_1_table_reproduction(study):
    checks, parts = [], []
    for est in ("pipw", "pdr"):
        rep = study(SimScenario(n=N, reps=B, seed=SEED, estimator=est))
        bias = np.array([rep.row(t)["bias"] for t in TIMES])
        cp = np.array([rep.row(t)["cp"] for t in TIMES])
        ratio = np.array([rep.row(t)["sd"] / rep.row(t)["see"] for t in TIMES])
        checks += [np.all(np.abs(bias) <= 0.005), np.all((cp >= 0.915) & (cp <= 0.985)),
                   np.all(np.abs(ratio - 1) <= 0.15)]
        parts.append(f"{est}: bias {_fmt(bias)} cp {_fmt(cp)} sd/see {_fmt(ratio)}")
    ok = record(1, all(checks), "; ".join(parts))
    assert ok


def test_criterion_2_double_robustness(study):
    parts, checks = [], []
    for label, kw in (("pdr wrong h", dict(estimator="pdr", h_misspec="sqrt_plus_one")),
                      ("pdr wrong q", dict(estimator="pdr", q_misspec=True))):
        rep = study(SimScenario(n=N, reps=B, seed=SEED, **kw))
        bias = np.array([rep.row(t)["bias"] for t in TIMES])
        checks.append(np.all(np.abs(bias) <= 0.005))
        parts.append(f"{label}: bias {_fmt(bias)} (need |.| <= 0.005)")
    rep = study(SimScenario(n=N, reps=B, seed=SEED, estimator="pipw", q_misspec=True))
    bias = np.array([rep.row(t)["bias"] for t in (0.5, 0.75)])
    checks.append(np.all(bias >= 0.007))
    parts.append(f"pipw wrong q: bias at t=0.5, 0.75 {_fmt(bias)} (need >= +0.007)")
    ok = record(2, all(checks), "; ".join(parts))
    assert ok


def test_criterion_3_oracle_bridge_recovery(sim_large):
    alpha_derived, beta_derived = coefficient_matching(DgpParams())
    derived_ok = (np.allclose(alpha_derived, ALPHA_FROZEN, atol=1e-6)
                  and np.allclose(beta_derived, BETA_FROZEN, atol=1e-6))
    data, _ = sim_large
    q_fit = fit_q_bridge(data, QBridgeSpec.zeros(1, 1))
    cens = fit_censoring(data)
    h_fit = fit_h_bridge(data, HBridgeSpec.zeros(1, 1), None, cens, event_time_grid(data).tau)
    z_alpha = (q_fit.theta_hat - alpha_derived) / np.sqrt(np.diag(sandwich_cov(q_fit)))
    z_beta = (h_fit.theta_hat - beta_derived) / np.sqrt(np.diag(sandwich_cov(h_fit)))
    ok = derived_ok and q_fit.converged and h_fit.converged \
        and np.all(np.abs(z_alpha) < 3) and np.all(np.abs(z_beta) < 3)
    ok = record(3, ok, f"matching equations reproduce frozen truths: {derived_ok}; "
                       f"alpha z-scores {_fmt(z_alpha)}; beta z-scores {_fmt(z_beta)}")
    assert ok


def test_criterion_4_censoring_machinery(dgp, sim2000):
    big, _ = sample_dgp(dgp, 1_000_000, np.random.default_rng(4))
    frac = float(np.mean(big.event == 0))
    frac_ok = abs(frac - 0.22) <= 0.01

    params = DgpParams(censoring_rate=1e-12, admin_censoring=1e12)
    full, _ = sample_dgp(params, N, np.random.default_rng(5))
    all_events = bool(np.all(full.event == 1))
    cens = fit_censoring(full)
    bridges = fit_bridges(full, QBridgeSpec.zeros(1, 1), cens)
    grid = TimeGrid(TIMES)
    curve = pipw_curve(full, bridges, grid)
    # unweighted estimator: same arithmetic with the 1 / S_C factor removed
    q = eval_q(bridges.q_spec, full.z, full.treat, full.x)
    alive = (full.time[:, None] > grid.points[None, :]).astype(float)
    plain_s1 = ((full.treat == 1) * q) @ alive / full.n
    plain_s0 = ((full.treat == 0) * q) @ alive / full.n
    plain = plain_s1 - plain_s0
    weights_one = bool(np.all(cens.survival_matrix(grid.points) == 1.0))
    bitwise = all_events and weights_one and np.array_equal(curve.s1, plain_s1) \
        and np.array_equal(curve.s0, plain_s0) and np.array_equal(curve.psi, plain)

    km = fit_censoring(sim2000)
    se_if = censoring_influence(km, 1.0).std() / np.sqrt(sim2000.n)
    rng = np.random.default_rng(6)
    boot = [fit_censoring(sim2000.subset(rng.integers(0, sim2000.n, sim2000.n))).survival(1.0)
            for _ in range(500)]
    se_boot = float(np.std(boot, ddof=1))
    se_ok = abs(se_if / se_boot - 1) <= 0.10

    ok = record(4, frac_ok and bitwise and se_ok,
                f"censoring fraction {frac:.4f}; delta=1 weights all one {weights_one}, "
                f"IPCW and unweighted curves bitwise equal {bitwise}; "
                f"KM SE influence {se_if:.5f} vs bootstrap {se_boot:.5f} "
                f"(ratio {se_if / se_boot:.3f})")
    assert ok


def test_criterion_5_sup_test_calibration():
    from proxsurv.simulation import run_study

    parts, checks = [], []
    for est in ("pipw", "pdr"):
        null = run_study(SimScenario(n=N, reps=B, seed=SEED, estimator=est, sup_test=True,
                                     sup_draws=1000, dgp=DgpParams().with_treatment_effect(0.0)))
        alt = run_study(SimScenario(n=N, reps=B, seed=SEED + 1, estimator=est, sup_test=True,
                                    sup_draws=1000))
        size, power = null.sup_test["rejection_rate"], alt.sup_test["rejection_rate"]
        checks += [0.02 <= size <= 0.09, power > 0.99]
        parts.append(f"{est}: null rejection {size:.3f}, power {power:.3f}")
    ok = record(5, all(checks), "; ".join(parts) + " (need size in [0.02, 0.09], power > 0.99)")
    assert ok


def test_criterion_6_numerical_kernels(sim2000, censoring2000):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        alpha, beta = rng.normal(0, 0.5, 4), rng.normal(0, 0.5, 5)
        z, w, x = (rng.normal(size=(1, 1)) for _ in range(3))
        a = rng.integers(0, 2, size=1)
        t = float(rng.uniform(0, 2))
        for spec, f, grad, params, args in (
                (QBridgeSpec(alpha), eval_q, q_gradient, alpha, (z, a, x)),
                (HBridgeSpec(beta), eval_h, h_gradient, beta, (t, w, a, x))):
            ana = grad(spec, *args)[0]
            for j in range(params.size):
                e = np.zeros(params.size)
                e[j] = 1e-6 * max(1.0, abs(params[j]))
                num = (f(spec.with_params(params + e), *args)[0]
                       - f(spec.with_params(params - e), *args)[0]) / (2 * e[j])
                num = float(np.ravel(num)[0])
                worst = max(worst, abs(float(ana[j]) - num) / max(1.0, abs(num)))
    grad_ok = worst < 1e-6

    X = rng.normal(size=(500, 3))
    y = X @ [0.5, -1.0, 2.0] + rng.normal(size=500)
    lin = solve(MomentProblem(lambda th: X * (y - X @ th)[:, None], np.zeros(3)))
    lin_err = float(np.max(np.abs(lin.theta_hat - np.linalg.solve(X.T @ X, X.T @ y))))
    c = rng.exponential(size=400)
    mom = solve(MomentProblem(lambda th: np.column_stack([c - th[0], c ** 2 - th[0] ** 2 - th[1]]),
                              [0.0, 0.0]))
    mom_err = float(np.max(np.abs(mom.theta_hat - [c.mean(), c.var()])))
    solver_ok = lin_err < 1e-8 and mom_err < 1e-8

    tau = event_time_grid(sim2000).tau
    b256, b512 = (fit_h_bridge(sim2000, HBridgeSpec.zeros(1, 1), None, censoring2000, tau,
                               k).theta_hat for k in (256, 512))
    quad = float(np.max(np.abs(b256 - b512)))
    ok = record(6, grad_ok and solver_ok and quad < 1e-6,
                f"gradient max rel error {worst:.1e}; solver errors {lin_err:.1e}, {mom_err:.1e}; "
                f"256 -> 512 nodes shifts beta by {quad:.1e}")
    assert ok


def test_criterion_7_real_data():
    path = os.environ.get("PROXSURV_RHC_CSV")
    if not path:
        line = "criterion 7: SKIP | waived, PROXSURV_RHC_CSV not set (dataset is user-supplied)"
        print(line)
        ACCEPTANCE_LINES.append(line)
        pytest.skip("RHC dataset not supplied")
    roles = RHC_ROLES
    if os.environ.get("PROXSURV_RHC_ROLES"):
        with open(os.environ["PROXSURV_RHC_ROLES"], encoding="utf-8") as fh:
            roles = json.load(fh)
    cfg = AnalyzeConfig(dataset=path, roles=roles, estimators=["pipw", "pdr"], seed=0)
    curves = analyze_dataset(cfg)
    p_pipw, p_pdr = curves["pipw"].sup_pvalue, curves["pdr"].sup_pvalue
    gap = np.abs(curves["pipw"].psi - curves["pdr"].psi)
    se = np.median(curves["pdr"].se)
    close = float(gap.max()) < 0.05 and float(gap.mean()) <= se
    ok = record(7, p_pipw < 0.001 and p_pdr < 0.001 and close,
                f"sup-test p: pipw {p_pipw:.4g}, pdr {p_pdr:.4g}; |pipw - pdr| max {gap.max():.4f} "
                f"(need < 0.05), mean {gap.mean():.4f} vs median pdr SE {se:.4f}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
