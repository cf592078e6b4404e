"""Quadratic Lyapunov function synthesis and stability-constraint values.

The control Lyapunov function comes from feedback linearization of the
pitch output: closed-loop error dynamics eta_dot = A eta with A Hurwitz,
then the continuous-time Lyapunov equation A'P + PA = -Q gives V = eta'P eta
with decay rate gamma = lambda_min(Q) / lambda_max(P).

Error-state convention: eta = [e, e_dot] where e_dot is the drift-only time
derivative of the tracking error, so eta is a pure state function and the
rate of V along the dynamics stays affine in the input.  For the piecewise
constant velocity command the partial of eta in time is zero between
switches (right limits at switch instants).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

from . import diff, model
from .model import Input, SegwayParams, State


class NotHurwitz(ValueError):
    """The closed-loop error matrix has an eigenvalue with Re >= 0."""


@dataclass(frozen=True)
class PiecewiseConstant:
    """Piecewise-constant signal: values[i] holds on [breaks[i-1], breaks[i])."""

    breaks: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.breaks) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    def value(self, t):
        idx = np.searchsorted(np.asarray(self.breaks), t, side="right")
        return np.asarray(self.values)[idx]


CONSTANT_ZERO = PiecewiseConstant((), (0.0,))


@dataclass(frozen=True)
class FixedPoint:
    """Regulate the pitch to the pitch angle of a target state."""

    target: State


@dataclass(frozen=True)
class VelocityTracking:
    """Track a commanded forward velocity through a pitch reference.

    The pitch reference is theta_e - gain * (r_dot - r_dot_desired(t)); the
    plant parameters are part of the reference because both the equilibrium
    pitch and the drift-only error derivative depend on them.
    """

    r_dot_desired: PiecewiseConstant
    gain: float
    params: SegwayParams
    theta_e: float

    def __post_init__(self):
        if self.gain < 0.0:
            raise ValueError("velocity feedback gain must be nonnegative")


ReferenceSignal = Union[FixedPoint, VelocityTracking]


def velocity_tracking(params: SegwayParams, profile: PiecewiseConstant,
                      gain: float = 0.3) -> VelocityTracking:
    theta_e = model.equilibrium(params).theta
    return VelocityTracking(profile, gain, params, theta_e)


@dataclass(frozen=True)
class ErrorState:
    e: float
    e_dot: float

    def norm_sq(self) -> float:
        return self.e ** 2 + self.e_dot ** 2


@dataclass(frozen=True)
class ClfData:
    """Everything needed to evaluate V, its rate, and the two constraints."""

    A_cl: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    gamma: float
    c3: float

    def validate(self, tol: float = 1e-10) -> None:
        res = self.A_cl.T @ self.P + self.P @ self.A_cl + self.Q
        if np.linalg.norm(res, "fro") > tol:
            raise ValueError("Lyapunov equation residual too large")
        if np.any(np.linalg.eigvalsh(self.P) <= 0.0):
            raise ValueError("P is not positive definite")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")


def _check_spd(Q: np.ndarray) -> None:
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    if np.any(np.linalg.eigvalsh(Q) <= 0.0):
        raise ValueError("Q must be positive definite")


def solve_ctle(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve A'P + PA = -Q for symmetric positive definite P.

    Requires A Hurwitz; raises :class:`NotHurwitz` before attempting the
    solve otherwise.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if np.any(np.linalg.eigvals(A).real >= 0.0):
        raise NotHurwitz("closed-loop matrix has an unstable eigenvalue")
    _check_spd(Q)
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
    return 0.5 * (P + P.T)


def synthesize_clf(gains: tuple[float, float], Q: np.ndarray) -> ClfData:
    """Build the quadratic CLF from proportional/derivative error gains."""
    k_p, k_d = gains
    A_cl = np.array([[0.0, 1.0], [-k_p, -k_d]])
    P = solve_ctle(A_cl, Q)
    lam_min_q = float(np.min(np.linalg.eigvalsh(Q)))
    lam_max_p = float(np.max(np.linalg.eigvalsh(P)))
    data = ClfData(A_cl=A_cl, Q=np.asarray(Q, dtype=float), P=P,
                   gamma=lam_min_q / lam_max_p, c3=lam_min_q)
    data.validate()
    return data


def default_clf() -> ClfData:
    """Identity Q with the gain pair calibrated for the best certified
    decay rate this error parameterization admits (gamma just under 1)."""
    return synthesize_clf((25.0, 25.5), np.eye(2))


def eta_parts(ref: ReferenceSignal, x, t):
    """Error state (e, e_dot) on component tuples; works on duals."""
    if isinstance(ref, FixedPoint):
        return (x[1] - ref.target.theta, x[3])
    rd = float(ref.r_dot_desired.value(t)) if np.isscalar(t) else ref.r_dot_desired.value(t)
    e = x[1] - ref.theta_e + ref.gain * (x[2] - rd)
    (f_r, _), _ = model.caf_parts(ref.params, x[1], x[2], x[3])
    return (e, x[3] + ref.gain * f_r)


def eta_jacobian_parts(ref: ReferenceSignal, x):
    """Rows of d eta / d x as two 4-tuples; works on duals."""
    if isinstance(ref, FixedPoint):
        return ((0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0))
    d_th, d_rd, d_td = model.r_accel_gradient(ref.params, x[1], x[2], x[3])
    kv = ref.gain
    return ((0.0, 1.0, kv, 0.0),
            (0.0, kv * d_th, kv * d_rd, 1.0 + kv * d_td))


def v_quad(P: np.ndarray, e, e_dot):
    """eta' P eta on generic scalars."""
    return (P[0, 0] * e * e + 2.0 * P[0, 1] * e * e_dot
            + P[1, 1] * e_dot * e_dot)


def vdot_parts(clfd: ClfData, ref: ReferenceSignal, params: SegwayParams,
               x, u, t):
    """Rate of V along the closed dynamics; exact and affine in u."""
    e, e_dot = eta_parts(ref, x, t)
    j1, j2 = eta_jacobian_parts(ref, x)
    xdot = model._xdot_parts(params, x, u)
    eta1_dot = sum(j1[i] * xdot[i] for i in range(4) if not _is_zero(j1[i]))
    eta2_dot = sum(j2[i] * xdot[i] for i in range(4) if not _is_zero(j2[i]))
    P = clfd.P
    return (2.0 * (P[0, 0] * e + P[0, 1] * e_dot) * eta1_dot
            + 2.0 * (P[0, 1] * e + P[1, 1] * e_dot) * eta2_dot)


def _is_zero(v) -> bool:
    return isinstance(v, float) and v == 0.0


def h_clf_parts(clfd: ClfData, ref: ReferenceSignal, params: SegwayParams,
                x, u, t):
    """Decrease-condition value V_dot + c3 * |eta|^2 on generic scalars."""
    e, e_dot = eta_parts(ref, x, t)
    rate = vdot_parts(clfd, ref, params, x, u, t)
    return rate + clfd.c3 * (e * e + e_dot * e_dot)


def error_state(x: State, t: float, ref: ReferenceSignal) -> ErrorState:
    e, e_dot = eta_parts(ref, (x.r, x.theta, x.r_dot, x.theta_dot), t)
    return ErrorState(float(e), float(e_dot))


def lyapunov_value(clf: ClfData, eta: ErrorState) -> float:
    """V = eta' P eta; nonnegative, zero only at zero error."""
    return float(v_quad(clf.P, eta.e, eta.e_dot))


def lyapunov_rate(clf: ClfData, x: State, t: float, u: Input,
                  ref: ReferenceSignal, params: SegwayParams) -> float:
    return float(vdot_parts(clf, ref, params,
                            (x.r, x.theta, x.r_dot, x.theta_dot),
                            u.current, t))


def h_clf(clf: ClfData, x: State, t: float, u: Input,
          ref: ReferenceSignal, params: SegwayParams) -> float:
    """Stability constraint value; nonpositive when the decrease holds."""
    return float(h_clf_parts(clf, ref, params,
                             (x.r, x.theta, x.r_dot, x.theta_dot),
                             u.current, t))


def h_lls(clf: ClfData, x_k: State, t_k: float, x_hat: State, k: int,
          dt: float, ref: ReferenceSignal) -> float:
    """Level-set constraint V(x_k) - V(x_hat) exp(-gamma k dt)."""
    if k < 0:
        raise ValueError("node index must be nonnegative")
    if dt <= 0.0:
        raise ValueError("dt must be strictly positive")
    t0 = t_k - k * dt
    v_k = lyapunov_value(clf, error_state(x_k, t_k, ref))
    v_hat = lyapunov_value(clf, error_state(x_hat, t0, ref))
    return v_k - v_hat * float(np.exp(-clf.gamma * k * dt))
