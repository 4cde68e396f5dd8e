"""Censoring survival models for inverse-probability-of-censoring weights.

The censoring distribution is estimated by Kaplan-Meier, treating censored
observations as the "events" of the censoring process. Failures that coincide
with a censoring time are taken to occur first, so they leave the censoring
risk set before the censorings at that time are counted.

Besides evaluation, the model exposes the per-subject influence function of
``S_C(t)`` through its martingale representation::

    phi_j(t) = -S_C(t) * sum_{s_k <= t} a_jk
    a_jk     = n * (dN_j(s_k) / Y_k - R_j(s_k) * d_k / Y_k**2)

where ``s_k`` are the censoring times of subject j's stratum, ``d_k`` the
number censored there, ``Y_k`` the size of the censoring risk set and
``R_j(s_k)`` the at-risk indicator. ``sum_j a_jk == 0`` for every ``k``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset

DEFAULT_FLOOR = 0.05


class PositivityError(ValueError):
    """Estimated censoring survival fell below the positivity floor."""


@dataclass(frozen=True)
class _Stratum:
    members: np.ndarray      # subject indices
    jumps: np.ndarray        # distinct censoring times s_k
    censored: np.ndarray     # d_k
    at_risk: np.ndarray      # Y_k
    surv: np.ndarray         # S_C(s_k), right-continuous


def _fit_stratum(time, event, members) -> _Stratum:
    t = time[members]
    e = event[members]
    jumps, d = np.unique(t[e == 0], return_counts=True)
    ts = np.sort(t)
    tc = np.sort(t[e == 0])
    # subjects still under observation after s_k, plus those censored at s_k
    y = (ts.size - np.searchsorted(ts, jumps, side="right")) \
        + (np.searchsorted(tc, jumps, side="right") - np.searchsorted(tc, jumps, side="left"))
    surv = np.cumprod(1.0 - d / y)
    return _Stratum(members, jumps, d.astype(float), y.astype(float), surv)


class CensoringModel(ABC):
    """Interface the estimators use to weight by ``1 / S_C(t | subject)``.

    Implementations must be piecewise constant in ``t`` with a finite number
    of jumps; the h-bridge moment integrates ``t**p / S_C(t)`` exactly.
    """

    floor: float
    n: int

    @abstractmethod
    def survival_matrix(self, times) -> np.ndarray:
        """``S_C(t | i)`` for every subject (rows) and time (columns)."""

    @abstractmethod
    def influence_matrix(self, times) -> np.ndarray:
        """Per-subject influence ``phi_i(t)`` of the subject's own stratum curve."""

    @abstractmethod
    def integrate_increments(self, values) -> np.ndarray:
        """``sum_k a_jk * values_k`` per subject, ``values`` indexed by stratum jumps."""

    @abstractmethod
    def integral_inverse_survival(self, upper, power: int) -> np.ndarray:
        """``int_0^{upper_i} t**power / S_C(t | i) dt`` for each subject."""

    @abstractmethod
    def at_risk_tail(self, coef, upper) -> list[np.ndarray]:
        """Per stratum and jump ``s_k``: ``n^-1 sum_i int_{s_k}^{upper_i} poly_i(t) / S_C(t) dt``."""

    @abstractmethod
    def stratum_labels(self) -> np.ndarray:
        """Integer stratum of every subject."""

    @abstractmethod
    def min_survival_before(self, t: float) -> float:
        """Smallest ``S_C(s)`` over ``s < t`` across strata (left limit at ``t``)."""

    def check_positivity(self, times) -> None:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        for t in times:
            low = self.min_survival(t)
            if low < self.floor:
                raise PositivityError(
                    f"censoring survival {low:.4g} at t={t:.4g} is below the floor {self.floor}")

    @abstractmethod
    def min_survival(self, t: float) -> float:
        """Smallest ``S_C(t)`` across strata."""


class KaplanMeierCensoring(CensoringModel):
    """Marginal or treatment-stratified Kaplan-Meier censoring model."""

    def __init__(self, data: SurvivalDataset, kind: str = "marginal_km",
                 floor: float = DEFAULT_FLOOR):
        if kind not in ("marginal_km", "stratified_km"):
            raise ValueError(f"unknown censoring model kind {kind!r}")
        self.kind = kind
        self.floor = float(floor)
        self.n = data.n
        self.time = data.time
        self.event = data.event
        if kind == "marginal_km":
            labels = np.zeros(data.n, dtype=int)
        else:
            labels = data.treat.astype(int).copy()
        self._labels = labels
        self.strata: list[_Stratum] = []
        for s in range(1 if kind == "marginal_km" else 2):
            members = np.flatnonzero(labels == s)
            if members.size == 0:
                raise ValueError(f"censoring stratum {s} has no subjects")
            self.strata.append(_fit_stratum(data.time, data.event, members))

    # -- evaluation -----------------------------------------------------
    @staticmethod
    def _curve(st: _Stratum, times, side="right"):
        if st.jumps.size == 0:
            return np.ones(np.shape(times))
        idx = np.searchsorted(st.jumps, times, side=side)
        return np.where(idx > 0, st.surv[np.maximum(idx - 1, 0)], 1.0)

    def survival(self, t, stratum: int = 0):
        """``S_C(t)`` of one stratum (vectorized over ``t``)."""
        return self._curve(self.strata[stratum], np.asarray(t, dtype=float))

    def survival_matrix(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.empty((self.n, times.size))
        for st in self.strata:
            out[st.members] = self._curve(st, times)[None, :]
        return out

    def min_survival(self, t):
        return float(min(self._curve(st, np.array([t]))[0] for st in self.strata))

    def min_survival_before(self, t):
        return float(min(self._curve(st, np.array([t]), side="left")[0] for st in self.strata))

    def stratum_labels(self):
        return self._labels

    # -- influence ------------------------------------------------------
    def _risk_index(self, st: _Stratum):
        """Number of jumps at which each member is in the censoring risk set."""
        t = self.time[st.members]
        cens = self.event[st.members] == 0
        right = np.searchsorted(st.jumps, t, side="right")
        left = np.searchsorted(st.jumps, t, side="left")
        return np.where(cens, right, left), cens, right - 1

    def integrate_increments(self, values):
        out = None
        for s, st in enumerate(self.strata):
            v = np.asarray(values[s], dtype=float)
            if out is None:
                out = np.zeros((self.n,) + v.shape[1:])
            if st.jumps.size == 0:
                continue
            nrisk, cens, own = self._risk_index(st)
            w = (st.censored / st.at_risk ** 2).reshape((-1,) + (1,) * (v.ndim - 1))
            cum = np.concatenate([np.zeros((1,) + v.shape[1:]), np.cumsum(w * v, axis=0)])
            jump_part = np.zeros((st.members.size,) + v.shape[1:])
            jc = own[cens]
            jump_part[cens] = v[jc] / st.at_risk[jc].reshape((-1,) + (1,) * (v.ndim - 1))
            out[st.members] = self.n * (jump_part - cum[nrisk])
        return out

    def influence_matrix(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.zeros((self.n, times.size))
        for st in self.strata:
            if st.jumps.size == 0:
                continue
            nrisk, cens, own = self._risk_index(st)
            ngrid = np.searchsorted(st.jumps, times, side="right")
            cum = np.concatenate([[0.0], np.cumsum(st.censored / st.at_risk ** 2)])
            upto = np.minimum(nrisk[:, None], ngrid[None, :])
            own_t = self.time[st.members]
            jump = np.zeros((st.members.size, times.size))
            if cens.any():
                inv_y = 1.0 / st.at_risk[own[cens]]
                jump[cens] = inv_y[:, None] * (own_t[cens][:, None] <= times[None, :])
            s_t = self._curve(st, times)
            out[st.members] = -s_t[None, :] * self.n * (jump - cum[upto])
        return out

    # -- integrals for the h-bridge moment -----------------------------
    def _cum_integral(self, st: _Stratum, power: int):
        b = np.concatenate([[0.0], st.jumps])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.concatenate([[1.0], st.surv])
            piece = np.diff(b ** (power + 1)) / (power + 1) * inv[:-1]
        return b, inv, np.concatenate([[0.0], np.cumsum(piece)])

    def _integral_members(self, st, upper, power):
        b, inv, cum = self._cum_integral(st, power)
        k = np.searchsorted(b, upper, side="right") - 1
        rest = (upper ** (power + 1) - b[k] ** (power + 1)) / (power + 1)
        with np.errstate(invalid="ignore"):
            tail = np.where(rest > 0, rest * inv[k], 0.0)
        return cum[k] + tail

    def integral_inverse_survival(self, upper, power):
        upper = np.asarray(upper, dtype=float)
        out = np.empty(self.n)
        for st in self.strata:
            out[st.members] = self._integral_members(st, upper[st.members], power)
        return out

    def at_risk_tail(self, coef, upper):
        coef = np.asarray(coef, dtype=float)          # (n, d, J)
        upper = np.asarray(upper, dtype=float)
        J = coef.shape[2]
        result = []
        for st in self.strata:
            c = coef[st.members]
            u = upper[st.members]
            k_up = np.stack([self._integral_members(st, u, j) for j in range(J)], axis=1)
            g_up = np.einsum("idj,ij->id", c, k_up)
            order = np.argsort(u)
            u_sorted = u[order]
            # suffix sums over members with upper_i > s_k
            suf_g = np.concatenate([np.cumsum(g_up[order][::-1], axis=0)[::-1],
                                    np.zeros((1, c.shape[1]))])
            suf_c = np.concatenate([np.cumsum(c[order][::-1], axis=0)[::-1],
                                    np.zeros((1,) + c.shape[1:])])
            start = np.searchsorted(u_sorted, st.jumps, side="right")
            live = start < u.size
            k_at = np.stack([self._integral_members(st, st.jumps[live], j) for j in range(J)],
                            axis=1)
            omega = np.zeros((st.jumps.size, c.shape[1]))
            omega[live] = suf_g[start[live]] - np.einsum("kdj,kj->kd", suf_c[start[live]], k_at)
            result.append(omega / self.n)
        return result


def fit_censoring(data: SurvivalDataset, kind: str = "marginal_km",
                  floor: float = DEFAULT_FLOOR) -> KaplanMeierCensoring:
    """Fit a Kaplan-Meier censoring model (``marginal_km`` or ``stratified_km``)."""
    return KaplanMeierCensoring(data, kind, floor)


def censoring_survival_at(model: CensoringModel, t: float, subject: int) -> float:
    """``S_C(t)`` for one subject's stratum, enforcing the positivity floor."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    value = float(model.survival_matrix([t])[subject, 0])
    if value < model.floor:
        raise PositivityError(
            f"censoring survival {value:.4g} at t={t:.4g} is below the floor {model.floor}")
    return value


def censoring_influence(model: CensoringModel, t: float) -> np.ndarray:
    """Per-subject influence values ``phi_i(t)`` of the censoring survival estimate."""
    return model.influence_matrix([t])[:, 0]
