"""Planar Segway dynamics: asymmetric two-wheeled inverted pendulum.

The chassis center of mass sits a fixed angle off the measured pitch axis,
so the unforced balance point is at a nonzero pitch angle.  Generalized
coordinates are wheel travel r and chassis pitch theta; the single input is
motor current, converted to an axle torque by the motor constant.  The
Newton-Euler equations reduce to

    M(theta) [r_dd, theta_dd]' = rhs(x) + b(theta) * torque

with a 2x2 mass matrix M, so the system is control affine.

The low-level ``*_parts`` functions work componentwise on anything with
float arithmetic (plain floats, numpy arrays, dual numbers) and are shared
by the public API, the horizon-problem stacks, and the derivative engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import diff


class NoEquilibrium(RuntimeError):
    """The pitch-acceleration root solve failed to bracket a balance point."""


@dataclass(frozen=True)
class SegwayParams:
    """Physical constants of the planar Segway.

    The default set is calibrated so the unforced equilibrium pitch is
    0.138 rad and the open-loop instability time constant is on the order
    of a tenth of a second.
    """

    wheel_mass: float = 12.0            # kg, both wheels, incl. rotary inertia
    body_mass: float = 44.0             # kg
    body_inertia: float = 1.2           # kg m^2, chassis about its COM
    wheel_radius: float = 0.19          # m
    com_distance: float = 0.45          # m, COM offset from the axle
    com_angle_offset: float = -0.138    # rad, COM angle relative to pitch axis
    motor_torque_constant: float = 8.0  # N m / A
    gravity: float = 9.81               # m / s^2
    friction_coeff: float = 0.0         # N m s / rad, viscous, motor-side

    def __post_init__(self):
        for name in ("wheel_mass", "body_mass", "body_inertia",
                     "wheel_radius", "com_distance", "motor_torque_constant",
                     "gravity"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.friction_coeff < 0.0:
            raise ValueError("friction_coeff must be nonnegative")


@dataclass(frozen=True)
class State:
    """Planar Segway state [r, theta, r_dot, theta_dot]."""

    r: float
    theta: float
    r_dot: float
    theta_dot: float

    def to_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.r_dot, self.theta_dot])

    @staticmethod
    def from_array(x) -> "State":
        r, theta, r_dot, theta_dot = (float(v) for v in x)
        return State(r, theta, r_dot, theta_dot)


@dataclass(frozen=True)
class Input:
    """Motor current command in amperes."""

    current: float

    def clamped(self, lo: float, hi: float) -> "Input":
        return Input(min(max(self.current, lo), hi))


class Integrator(Enum):
    FORWARD_EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class DiscretizationConfig:
    dt: float
    method: Integrator = Integrator.FORWARD_EULER

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be strictly positive")


def caf_parts(p: SegwayParams, theta, r_dot, theta_dot):
    """Control-affine terms: drift accelerations and input column.

    Returns ((r_dd, theta_dd) drift part, (g_r, g_theta) input part).  The
    kinematic rows are the trivial identities (r_dot, theta_dot).
    """
    s = diff.sin(theta + p.com_angle_offset)
    c = diff.cos(theta + p.com_angle_offset)
    mL = p.body_mass * p.com_distance
    m_t = p.wheel_mass + p.body_mass
    I_t = p.body_mass * p.com_distance ** 2 + p.body_inertia
    det = m_t * I_t - (mL * c) ** 2

    # Motor-side viscous friction acts on the wheel rotation relative to
    # the chassis, entering both generalized forces like the motor torque.
    rel = r_dot / p.wheel_radius - theta_dot
    rhs_r = mL * theta_dot ** 2 * s - p.friction_coeff * rel / p.wheel_radius
    rhs_t = p.body_mass * p.gravity * p.com_distance * s + p.friction_coeff * rel

    f_r = (I_t * rhs_r - mL * c * rhs_t) / det
    f_t = (m_t * rhs_t - mL * c * rhs_r) / det

    k = p.motor_torque_constant
    g_r = k * (I_t / p.wheel_radius + mL * c) / det
    g_t = -k * (m_t + mL * c / p.wheel_radius) / det
    return (f_r, f_t), (g_r, g_t)


def drift_parts(p: SegwayParams, x):
    """Drift vector f(x) as a 4-tuple for a component 4-tuple x."""
    _, theta, r_dot, theta_dot = x
    (f_r, f_t), _ = caf_parts(p, theta, r_dot, theta_dot)
    return (r_dot, theta_dot, f_r, f_t)


def r_accel_gradient(p: SegwayParams, theta, r_dot, theta_dot):
    """Partials of the drift r-acceleration w.r.t. (theta, r_dot, theta_dot).

    Closed form so that error maps built on the drift stay differentiable
    by a single forward-mode pass.
    """
    s = diff.sin(theta + p.com_angle_offset)
    c = diff.cos(theta + p.com_angle_offset)
    mL = p.body_mass * p.com_distance
    m_t = p.wheel_mass + p.body_mass
    I_t = p.body_mass * p.com_distance ** 2 + p.body_inertia
    det = m_t * I_t - (mL * c) ** 2
    ddet = 2.0 * mL ** 2 * c * s

    b = p.friction_coeff
    R = p.wheel_radius
    mgL = p.body_mass * p.gravity * p.com_distance
    rel = r_dot / R - theta_dot
    rhs_r = mL * theta_dot ** 2 * s - b * rel / R
    rhs_t = mgL * s + b * rel

    f_r = (I_t * rhs_r - mL * c * rhs_t) / det
    d_theta = (I_t * (mL * theta_dot ** 2 * c) + mL * s * rhs_t
               - mL * c * (mgL * c)) / det - f_r * ddet / det
    d_rdot = (I_t * (-b / R ** 2) - mL * c * (b / R)) / det
    d_thetadot = (I_t * (2.0 * mL * theta_dot * s + b / R) - mL * c * (-b)) / det
    return (d_theta, d_rdot, d_thetadot)


def _xdot_parts(p: SegwayParams, x, u):
    _, theta, r_dot, theta_dot = x
    (f_r, f_t), (g_r, g_t) = caf_parts(p, theta, r_dot, theta_dot)
    return (r_dot, theta_dot, f_r + g_r * u, f_t + g_t * u)


def step_parts(p: SegwayParams, dt: float, method: Integrator, x, u):
    """One zero-order-hold integration step on component tuples."""
    if method is Integrator.FORWARD_EULER:
        k1 = _xdot_parts(p, x, u)
        return tuple(x[i] + dt * k1[i] for i in range(4))
    k1 = _xdot_parts(p, x, u)
    x2 = tuple(x[i] + 0.5 * dt * k1[i] for i in range(4))
    k2 = _xdot_parts(p, x2, u)
    x3 = tuple(x[i] + 0.5 * dt * k2[i] for i in range(4))
    k3 = _xdot_parts(p, x3, u)
    x4 = tuple(x[i] + dt * k3[i] for i in range(4))
    k4 = _xdot_parts(p, x4, u)
    return tuple(
        x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(4)
    )


def eval_drift(params: SegwayParams, x: State) -> np.ndarray:
    """Drift vector f(x); the first two entries are [r_dot, theta_dot]."""
    return np.array(drift_parts(params, (x.r, x.theta, x.r_dot, x.theta_dot)))


def eval_input_matrix(params: SegwayParams, x: State) -> np.ndarray:
    """Input matrix g(x) as a 4x1 column; kinematic rows are zero."""
    _, (g_r, g_t) = caf_parts(params, x.theta, x.r_dot, x.theta_dot)
    return np.array([[0.0], [0.0], [g_r], [g_t]])


def pitch_acceleration(params: SegwayParams, theta: float) -> float:
    """Pitch acceleration of the unforced system at rest at the given pitch."""
    (_, f_t), _ = caf_parts(params, theta, 0.0, 0.0)
    return float(f_t)


def equilibrium(params: SegwayParams) -> State:
    """Unforced balance point [0, theta_e, 0, 0].

    Bisection on the pitch acceleration over (-pi/2, pi/2) followed by a
    Newton polish to a 1e-12 residual.  Raises :class:`NoEquilibrium` when
    no sign change exists in the bracket.
    """
    lo, hi = -0.5 * math.pi + 1e-9, 0.5 * math.pi - 1e-9
    f_lo, f_hi = pitch_acceleration(params, lo), pitch_acceleration(params, hi)
    if f_lo == 0.0:
        return State(0.0, lo, 0.0, 0.0)
    if f_hi == 0.0:
        return State(0.0, hi, 0.0, 0.0)
    if f_lo * f_hi > 0.0:
        raise NoEquilibrium(
            "pitch acceleration does not change sign on (-pi/2, pi/2)"
        )
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        f_mid = pitch_acceleration(params, mid)
        if f_mid == 0.0:
            lo = hi = mid
            break
        if f_lo * f_mid < 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    theta = 0.5 * (lo + hi)
    for _ in range(20):
        f_val = pitch_acceleration(params, theta)
        if abs(f_val) <= 1e-12:
            break
        block = diff.jacobian(
            lambda seg: [caf_parts(params, seg[0], 0.0, 0.0)[0][1]],
            np.array([theta]),
        )
        slope = block.values[0, 0]
        theta -= f_val / slope
    return State(0.0, theta, 0.0, 0.0)


def discrete_step(x: State, u: Input, cfg: DiscretizationConfig,
                  params: SegwayParams) -> State:
    """Zero-order-hold step of the chosen integrator."""
    nxt = step_parts(params, cfg.dt, cfg.method,
                     (x.r, x.theta, x.r_dot, x.theta_dot), u.current)
    return State(*(float(v) for v in nxt))


def discrete_jacobians(x: State, u: Input, cfg: DiscretizationConfig,
                       params: SegwayParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact step sensitivities (d x+/d x, d x+/d u)."""

    def step_fn(seg):
        return list(step_parts(params, cfg.dt, cfg.method, tuple(seg[:4]), seg[4]))

    block = diff.jacobian(
        step_fn, np.array([x.r, x.theta, x.r_dot, x.theta_dot, u.current])
    )
    return block.values[:, :4].copy(), block.values[:, 4:5].copy()


def mechanical_energy(params: SegwayParams, x: State) -> float:
    """Kinetic plus gravitational potential energy of the wheel/body pair."""
    mL = params.body_mass * params.com_distance
    m_t = params.wheel_mass + params.body_mass
    I_t = params.body_mass * params.com_distance ** 2 + params.body_inertia
    c = math.cos(x.theta + params.com_angle_offset)
    kinetic = (0.5 * m_t * x.r_dot ** 2
               + mL * x.r_dot * x.theta_dot * c
               + 0.5 * I_t * x.theta_dot ** 2)
    potential = params.body_mass * params.gravity * params.com_distance * c
    return kinetic + potential
