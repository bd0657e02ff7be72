"""Mean trajectories of the four change-point models.

All functions broadcast over numpy arrays: ``t`` and every field of
:class:`ThetaIndividual` may be arrays of compatible shapes, which is how the
hierarchical likelihood evaluates all subjects and chains in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial import Polynomial

__all__ = [
    "ModelKind",
    "ThetaIndividual",
    "CubicRate",
    "DomainError",
    "SingularSystemError",
    "bsm_mean",
    "bwm_mean",
    "bcr_mean",
    "dem_mean",
    "p3_coefficients",
    "rate_fn",
    "p3_integral",
    "mean_fn",
]

# Below this transition width the Appendix system is treated as singular.
SINGULAR_TOL = 1e-8


class ModelKind(str, Enum):
    BSM = "bsm"
    BWM = "bwm"
    BCR = "bcr"
    DEM = "dem"

    @property
    def has_transition(self) -> bool:
        return self is not ModelKind.BSM

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, ModelKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


class DomainError(ValueError):
    """Raised when a rate quantity is evaluated outside its domain."""


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when the cubic-rate linear system cannot be solved."""


@dataclass(frozen=True)
class ThetaIndividual:
    """Subject-level parameters of a mean trajectory.

    ``theta2`` is the post change-point slope term for BSM/BWM/BCR and the
    (non-negative) decay-rate magnitude for DEM. ``theta_t`` is ignored by BSM.
    """

    theta0: np.ndarray | float
    theta1: np.ndarray | float
    theta2: np.ndarray | float
    theta_cp: np.ndarray | float
    theta_t: np.ndarray | float = 0.0


@dataclass(frozen=True)
class CubicRate:
    """Monomial coefficients of the transition polynomial ``p3``."""

    a0: float
    a1: float
    a2: float
    a3: float
    theta_cp: float
    theta_t: float

    @property
    def polynomial(self) -> Polynomial:
        return Polynomial([self.a0, self.a1, self.a2, self.a3])

    def __call__(self, t):
        return self.polynomial(np.asarray(t, dtype=float))

    def derivative(self, t):
        return self.polynomial.deriv()(np.asarray(t, dtype=float))


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=(num != 0) & (den != 0))
    # theta1 != 0 with theta0 == 0 has no finite initial rate
    bad = (num != 0) & (den == 0)
    if np.any(bad):
        out = np.where(bad, np.sign(num) * np.inf, out)
    return out


def bsm_mean(t, th: ThetaIndividual):
    """Broken stick: two lines joined at ``theta_cp``."""
    t = np.asarray(t, dtype=float)
    pre = th.theta0 + th.theta1 * t
    post = th.theta0 + th.theta1 * th.theta_cp + th.theta2 * (t - th.theta_cp)
    return np.where(t <= th.theta_cp, pre, post)


def bwm_mean(t, th: ThetaIndividual):
    """Bacon-Watts hyperbolic-tangent transition.

    A zero transition width is evaluated as the limit, i.e. ``tanh`` becomes
    ``sign``.
    """
    t = np.asarray(t, dtype=float)
    d = t - th.theta_cp
    tt = np.asarray(th.theta_t, dtype=float)
    positive = tt > 0
    blend = np.where(positive, np.tanh(d / np.where(positive, tt, 1.0)), np.sign(d))
    return th.theta0 + th.theta1 * d + th.theta2 * d * blend


def bcr_mean(t, th: ThetaIndividual):
    """Bent cable: two lines joined by a quadratic arc of half-width ``theta_t``."""
    t = np.asarray(t, dtype=float)
    tt = np.asarray(th.theta_t, dtype=float)
    lo = th.theta_cp - tt
    hi = th.theta_cp + tt
    left = th.theta0 + th.theta1 * t
    right = th.theta0 + (th.theta1 + th.theta2) * t - th.theta2 * th.theta_cp
    width = np.where(tt > 0, 4.0 * tt, 1.0)
    middle = left + th.theta2 * (t - lo) ** 2 / width
    return np.where(t <= lo, left, np.where(t <= hi, middle, right))


def _dem_log_decay(t, th: ThetaIndividual):
    """Integrated rate from ``theta_cp`` to ``t`` (zero before the change point).

    The transition cubic is written in Hermite form on the local coordinate
    ``s = (t - theta_cp) / theta_t`` which equals the monomial solution but
    does not lose digits to cancellation for late change points.
    """
    t = np.asarray(t, dtype=float)
    tt = np.asarray(th.theta_t, dtype=float)
    r0 = _safe_ratio(th.theta1, th.theta0)
    gap = th.theta2 - r0
    elapsed = np.maximum(t - th.theta_cp, 0.0)
    positive = tt > 0
    width = np.where(positive, tt, 1.0)
    s = np.minimum(elapsed / width, 1.0)
    in_transition = width * (r0 * s + gap * (s**3 - 0.5 * s**4))
    after = np.maximum(elapsed - tt, 0.0)
    smooth = in_transition + th.theta2 * after
    return np.where(positive, smooth, th.theta2 * elapsed)


def dem_mean(t, th: ThetaIndividual):
    """Differential-equation model: linear before the change point, then
    exponential decay with a smoothly increasing rate.

    The result is strictly positive after the change point whenever
    ``theta0 > 0``.
    """
    t = np.asarray(t, dtype=float)
    pre = th.theta0 + th.theta1 * (t - th.theta_cp)
    # a large negative rate overflows to inf, a valid limit for the sampler
    with np.errstate(over="ignore"):
        post = th.theta0 * np.exp(-_dem_log_decay(t, th))
    return np.where(t <= th.theta_cp, pre, post)


def p3_coefficients(th: ThetaIndividual) -> CubicRate:
    """Solve the 4x4 linear system for the transition cubic.

    The constraints are ``p3(cp) = theta1/theta0``, ``p3'(cp) = 0``,
    ``p3(cp + T) = theta2`` and ``p3'(cp + T) = 0``.
    """
    cp = float(th.theta_cp)
    tt = float(th.theta_t)
    theta0 = float(th.theta0)
    if not tt > SINGULAR_TOL:
        raise SingularSystemError(f"transition width {tt!r} too small for the cubic system")
    if theta0 == 0:
        raise SingularSystemError("theta0 must be non-zero to define the initial rate")
    end = cp + tt
    matrix = np.array(
        [
            [1.0, cp, cp**2, cp**3],
            [0.0, 1.0, 2.0 * cp, 3.0 * cp**2],
            [1.0, end, end**2, end**3],
            [0.0, 1.0, 2.0 * end, 3.0 * end**2],
        ]
    )
    rhs = np.array([float(th.theta1) / theta0, 0.0, float(th.theta2), 0.0])
    # column equilibration keeps the solve accurate when cp is large
    scale = np.abs(matrix).max(axis=0)
    coef = np.linalg.solve(matrix / scale, rhs) / scale
    return CubicRate(*map(float, coef), theta_cp=cp, theta_t=tt)


def rate_fn(t, th: ThetaIndividual, cub: CubicRate):
    """Decay rate at time ``t >= theta_cp``."""
    t = np.asarray(t, dtype=float)
    cp = float(th.theta_cp)
    if np.any(t < cp):
        raise DomainError(f"rate is defined for t >= theta_cp={cp}")
    end = cp + float(th.theta_t)
    initial = float(th.theta1) / float(th.theta0)
    out = np.where(t > end, float(th.theta2), cub(t))
    return np.where(t == cp, initial, out)


def p3_integral(t, cub: CubicRate):
    """Exact integral of ``p3`` from ``theta_cp`` to ``t`` on the transition."""
    t = np.asarray(t, dtype=float)
    lo = cub.theta_cp
    hi = cub.theta_cp + cub.theta_t
    slack = 1e-12 * max(1.0, abs(hi))
    if np.any(t < lo - slack) or np.any(t > hi + slack):
        raise DomainError(f"p3 integral is defined on [{lo}, {hi}]")
    # integrate in the shifted variable u = t - cp to avoid cancellation
    shifted = Polynomial([cub.a0, cub.a1, cub.a2, cub.a3])(Polynomial([lo, 1.0]))
    return shifted.integ()(t - lo)


_DISPATCH = {
    ModelKind.BSM: bsm_mean,
    ModelKind.BWM: bwm_mean,
    ModelKind.BCR: bcr_mean,
    ModelKind.DEM: dem_mean,
}


def mean_fn(model, t, th: ThetaIndividual):
    """Evaluate the mean trajectory of ``model`` at ``t`` (scalar or array)."""
    return _DISPATCH[ModelKind.parse(model)](t, th)
