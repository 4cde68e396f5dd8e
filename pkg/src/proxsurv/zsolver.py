"""Just-identified Z-estimation: solve ``E_n[g_i(theta)] = 0``.

Damped Newton first; if it stalls, Levenberg-Marquardt on ``||E_n g||^2``
(scipy's MINPACK wrapper). The result carries the bread matrix
``E_n[dg/dtheta]`` and per-subject influence vectors
``-bread^{-1} (g_i - E_n g)`` for sandwich variances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


class SingularBreadError(np.linalg.LinAlgError):
    """The averaged Jacobian of the moment function is (numerically) singular."""


@dataclass
class MomentProblem:
    """Stacked per-subject moment function.

    ``g(theta)`` returns an ``(n, p)`` array. ``jacobian(theta)``, if given,
    returns the ``(p, p)`` average Jacobian ``E_n[dg/dtheta]``.
    """

    g: Callable[[np.ndarray], np.ndarray]
    theta0: np.ndarray
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    tol: float = 1e-10
    step_tol: float = 1e-12
    max_newton: int = 100
    max_lm: int = 200
    max_halvings: int = 30

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float).ravel()
        if not np.all(np.isfinite(self.theta0)):
            raise ValueError("initial value must be finite")

    def mean(self, theta):
        return self.g(theta).mean(axis=0)

    def mean_jacobian(self, theta):
        if self.jacobian is not None:
            return np.asarray(self.jacobian(theta), dtype=float)
        return numerical_jacobian(self.mean, theta)


@dataclass
class SolveResult:
    theta_hat: np.ndarray
    converged: bool
    residual_norm: float
    bread: np.ndarray
    influence: np.ndarray
    iterations: int = 0
    method: str = "newton"
    stationary: bool = False
    info: dict = field(default_factory=dict)

    @property
    def usable(self) -> bool:
        """Exact root, or a least-squares point the caller explicitly accepted."""
        return self.converged or bool(self.info.get("accepted_least_squares"))

    @property
    def n(self) -> int:
        return self.influence.shape[0]


def numerical_jacobian(fun, theta, rel_step=1e-6):
    """Central-difference Jacobian with step ``rel_step * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = rel_step * max(1.0, abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        cols.append((fun(up) - fun(dn)) / (2 * h))
    return np.column_stack(cols)


def _norm(v):
    return np.inf if not np.all(np.isfinite(v)) else float(np.max(np.abs(v)))


def _newton(problem: MomentProblem):
    theta = problem.theta0.copy()
    G = problem.mean(theta)
    res = _norm(G)
    it = 0
    for it in range(1, problem.max_newton + 1):
        if res <= problem.tol:
            return theta, res, it - 1, True
        J = problem.mean_jacobian(theta)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > COND_LIMIT:
            return theta, res, it, False
        step = np.linalg.solve(J, -G)
        lam = 1.0
        improved = False
        for _ in range(problem.max_halvings + 1):
            cand = theta + lam * step
            Gc = problem.mean(cand)
            rc = _norm(Gc)
            if rc < res or (np.isfinite(rc) and rc <= problem.tol):
                improved = True
                break
            lam *= 0.5
        if not improved:
            return theta, res, it, False
        theta, G, res = cand, Gc, rc
        if np.max(np.abs(lam * step)) <= problem.step_tol * max(1.0, np.max(np.abs(theta))):
            break
    return theta, res, it, res <= problem.tol


def _levenberg_marquardt(problem: MomentProblem, theta):
    def fun(th):
        v = problem.mean(th)
        return np.where(np.isfinite(v), v, 1e100)

    out = least_squares(fun, theta, jac=lambda th: problem.mean_jacobian(th), method="lm",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=problem.max_lm * (theta.size + 1))
    res = _norm(problem.mean(out.x))
    return out.x, res, int(out.nfev)


def solve(problem: MomentProblem) -> SolveResult:
    """Solve the moment equations; non-convergence returns the best iterate flagged."""
    theta, res, iters, ok = _newton(problem)
    method = "newton"
    if not ok:
        logger.debug("newton stalled at residual %.3g; switching to LM", res)
        start = theta if np.isfinite(res) else problem.theta0
        theta_lm, res_lm, n_lm = _levenberg_marquardt(problem, start)
        iters += n_lm
        method = "levenberg-marquardt"
        if res_lm < res or not np.isfinite(res):
            theta, res = theta_lm, res_lm
        ok = res <= problem.tol
    return _finish(problem, theta, res, ok, iters, method)


def _finish(problem, theta, res, converged, iters, method) -> SolveResult:
    bread = problem.mean_jacobian(theta)
    if not np.all(np.isfinite(bread)) or np.linalg.cond(bread) > COND_LIMIT:
        raise SingularBreadError(f"bread matrix is singular (cond > {COND_LIMIT:g})")
    gi = problem.g(theta)
    gbar = gi.mean(axis=0)
    # gradient of 0.5 * ||E_n g||^2 relative to its scale
    grad = bread.T @ gbar
    stationary = bool(np.all(np.isfinite(grad))) and \
        np.max(np.abs(grad)) <= 1e-6 * max(1.0, np.max(np.abs(bread)) * np.max(np.abs(gbar)))
    influence = -np.linalg.solve(bread, (gi - gbar).T).T
    return SolveResult(theta, bool(converged), float(res), bread, influence, iters, method,
                       stationary=converged or stationary)


def sandwich_cov(result: SolveResult) -> np.ndarray:
    """``n^-1 E_n[eps eps']`` from stored influence vectors."""
    eps = result.influence
    return eps.T @ eps / eps.shape[0] ** 2
