"""Parametric confounding bridge functions and their paired moment functions.

Treatment bridge::

    q(z, a, x; alpha) = 1 + exp(s_a * (alpha_0 + alpha_a * a + alpha_z . z + alpha_x . x)),
    s_a = +1 if a == 1 else -1

Outcome bridge::

    h(t, w, a, x; beta) = exp(-(beta_0 + beta_a * a + beta_w . w + beta_x . x) * t - beta_1 * t**2)

Parameter vectors are ordered ``(alpha_0, alpha_a, alpha_z..., alpha_x...)``
and ``(beta_0, beta_1, beta_a, beta_w..., beta_x...)``. A bridge may carry a
covariate transform applied to ``z`` (resp. ``w``) before evaluation, which is
how deliberately misspecified models are expressed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

INDEX_CLAMP = 500.0

TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda v: v,
    "sqrt_abs": lambda v: np.sqrt(np.abs(v)),
    "sqrt_abs_plus_one": lambda v: np.sqrt(np.abs(v)) + 1.0,
}


class BridgeOverflowWarning(RuntimeWarning):
    """A bridge linear index was clamped to +/- INDEX_CLAMP."""


def _as2d(v, n=None):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(-1, 1) if n is None or v.size == n else v.reshape(1, -1)
    return v


def _inputs(z, a, x):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    z = _as2d(z, a.size)
    n = max(a.size, z.shape[0])
    x = np.zeros((n, 0)) if x is None else _as2d(x, n)
    if x.shape[0] == 1 and n > 1:
        x = np.repeat(x, n, axis=0)
    if z.shape[0] == 1 and n > 1:
        z = np.repeat(z, n, axis=0)
    return z, np.broadcast_to(a, (n,)), x


def clamp_index(index):
    """Clamp a linear index to +/- INDEX_CLAMP; returns (clamped, flagged)."""
    flagged = bool(np.any(np.abs(index) > INDEX_CLAMP))
    if flagged:
        warnings.warn("bridge linear index clamped", BridgeOverflowWarning, stacklevel=3)
        index = np.clip(index, -INDEX_CLAMP, INDEX_CLAMP)
    return index, flagged


@dataclass(frozen=True)
class QBridgeSpec:
    """Treatment confounding bridge ``q(z, a, x; alpha)``."""

    alpha: np.ndarray
    z_transform: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).ravel())
        if self.z_transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.z_transform!r}")

    @classmethod
    def zeros(cls, dim_z: int, dim_x: int, z_transform: str = "identity") -> "QBridgeSpec":
        return cls(np.zeros(2 + dim_z + dim_x), z_transform)

    def with_params(self, alpha) -> "QBridgeSpec":
        return replace(self, alpha=np.asarray(alpha, dtype=float))

    def features(self, z, a, x):
        """Design rows ``(1, a, z*, x)`` and the sign ``(-1)**(1 - a)``."""
        z, a, x = _inputs(z, a, x)
        if 2 + z.shape[1] + x.shape[1] != self.alpha.size:
            raise ValueError(f"alpha has {self.alpha.size} entries, expected "
                             f"{2 + z.shape[1] + x.shape[1]}")
        zs = TRANSFORMS[self.z_transform](z)
        design = np.column_stack([np.ones_like(a), a, zs, x])
        return design, np.where(a == 1, 1.0, -1.0)

    def exp_part(self, z, a, x):
        design, sign = self.features(z, a, x)
        index, flagged = clamp_index(sign * (design @ self.alpha))
        return np.exp(index), design, sign, flagged


@dataclass(frozen=True)
class HBridgeSpec:
    """Outcome confounding bridge ``h(t, w, a, x; beta)``."""

    beta: np.ndarray
    w_transform: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        if self.w_transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.w_transform!r}")

    @classmethod
    def zeros(cls, dim_w: int, dim_x: int, w_transform: str = "identity") -> "HBridgeSpec":
        return cls(np.zeros(3 + dim_w + dim_x), w_transform)

    def with_params(self, beta) -> "HBridgeSpec":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def features(self, w, a, x):
        """Rows ``f`` with ``d h / d beta = -h * t**p * f``, ``p = (1, 2, 1, 1.., 1..)``.

        ``f = (1, 1, a, w*, x)``; the linear index is ``f`` without the second
        entry dotted with ``beta`` without ``beta_1``.
        """
        w, a, x = _inputs(w, a, x)
        if 3 + w.shape[1] + x.shape[1] != self.beta.size:
            raise ValueError(f"beta has {self.beta.size} entries, expected "
                             f"{3 + w.shape[1] + x.shape[1]}")
        ws = TRANSFORMS[self.w_transform](w)
        one = np.ones_like(a)
        return np.column_stack([one, one, a, ws, x])

    def rate(self, w, a, x):
        """Linear index ``beta_0 + beta_a a + beta_w w* + beta_x x`` multiplying ``t``."""
        f = self.features(w, a, x)
        b = self.beta.copy()
        b[1] = 0.0
        return f @ b

    @property
    def powers(self) -> np.ndarray:
        p = np.ones(self.beta.size, dtype=int)
        p[1] = 2
        return p


def eval_q(spec: QBridgeSpec, z, a, x=None) -> np.ndarray:
    """Treatment bridge values, one per row."""
    e, *_ = spec.exp_part(z, a, x)
    return 1.0 + e


def q_gradient(spec: QBridgeSpec, z, a, x=None) -> np.ndarray:
    """Rows of ``d q / d alpha``."""
    e, design, sign, _ = spec.exp_part(z, a, x)
    return (e * sign)[:, None] * design


def eval_h(spec: HBridgeSpec, t, w, a, x=None) -> np.ndarray:
    """Outcome bridge values for scalar ``t`` (one per row) or a time vector (rows x times)."""
    rate = spec.rate(w, a, x)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    if t.ndim == 0:
        index, _ = clamp_index(-rate * t - spec.beta[1] * t ** 2)
    else:
        index, _ = clamp_index(-np.outer(rate, t) - spec.beta[1] * t[None, :] ** 2)
    return np.exp(index)


def h_gradient(spec: HBridgeSpec, t, w, a, x=None) -> np.ndarray:
    """Rows of ``d h / d beta`` at scalar ``t``."""
    t = float(t)
    h = eval_h(spec, t, w, a, x)
    f = spec.features(w, a, x)
    return -(h[:, None] * f) * (t ** spec.powers)[None, :]


@dataclass(frozen=True)
class MomentChoice:
    """User-chosen instruments for the two bridge estimating equations.

    ``n_fn(w, a, x)`` returns rows of dimension ``dim(alpha)``.
    ``m_coef(z, a, x)`` returns an array ``(rows, dim(beta), degree + 1)`` of
    polynomial coefficients in ``t`` of the density ``dm/dt``.
    """

    n_fn: Callable[..., np.ndarray]
    m_coef: Callable[..., np.ndarray]
    max_degree: int = 1

    def m_density(self, t, z, a, x=None) -> np.ndarray:
        coef = self.m_coef(*_inputs(z, a, x))
        powers = float(t) ** np.arange(coef.shape[2])
        return coef @ powers


def _default_n(w, a, x=None):
    w, a, x = _inputs(w, a, x)
    sign = np.where(a == 1, 1.0, -1.0)
    return sign[:, None] * np.column_stack([np.ones_like(a), w, a, x])


def _default_m_coef(z, a, x=None):
    z, a, x = _inputs(z, a, x)
    n = a.size
    const = np.column_stack([np.ones(n), z, a, x, np.zeros(n)])
    linear = np.zeros_like(const)
    linear[:, -1] = 1.0
    return np.stack([const, linear], axis=2)


def default_moments() -> MomentChoice:
    """``n = (-1)**(1-a) (1, w, a, x)`` and ``dm/dt = (1, z, a, x, t)``."""
    return MomentChoice(_default_n, _default_m_coef, max_degree=1)


def degrees_for(dim_z: int, dim_x: int) -> tuple[int, ...]:
    """Polynomial degree of each default ``dm/dt`` component."""
    return (0,) * (2 + dim_z + dim_x) + (1,)
