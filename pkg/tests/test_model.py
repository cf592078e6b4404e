import math

import numpy as np
import pytest
from scipy.optimize import brentq

from clfnmpc import diff, model
from clfnmpc.model import (DiscretizationConfig, Input, Integrator,
                           SegwayParams, State)
from conftest import central_difference, random_state

EULER = DiscretizationConfig(0.01, Integrator.FORWARD_EULER)
RK4 = DiscretizationConfig(0.01, Integrator.RK4)


class TestParams:
    def test_defaults_valid(self, params):
        assert params.com_angle_offset != 0.0

    @pytest.mark.parametrize("field", ["wheel_mass", "body_mass",
                                       "body_inertia", "wheel_radius",
                                       "com_distance",
                                       "motor_torque_constant", "gravity"])
    def test_nonpositive_rejected(self, field):
        with pytest.raises(ValueError):
            SegwayParams(**{field: 0.0})

    def test_negative_friction_rejected(self):
        with pytest.raises(ValueError):
            SegwayParams(friction_coeff=-0.1)


class TestEquilibrium:
    def test_calibrated_pitch(self, params, x_eq):
        assert abs(x_eq.theta - 0.138) <= 1e-3
        assert x_eq.r == 0.0 and x_eq.r_dot == 0.0 and x_eq.theta_dot == 0.0

    def test_drift_vanishes_at_equilibrium(self, params, x_eq):
        assert np.max(np.abs(model.eval_drift(params, x_eq))) <= 1e-10

    def test_symmetric_pendulum(self):
        p = SegwayParams(com_angle_offset=0.0)
        assert abs(model.equilibrium(p).theta) <= 1e-12

    def test_matches_bisection_oracle_on_perturbed_params(self, params):
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = SegwayParams(
                wheel_mass=params.wheel_mass * rng.uniform(0.5, 1.5),
                body_mass=params.body_mass * rng.uniform(0.5, 1.5),
                body_inertia=params.body_inertia * rng.uniform(0.5, 1.5),
                com_distance=params.com_distance * rng.uniform(0.5, 1.5),
                com_angle_offset=rng.uniform(-0.4, 0.4) or 0.1,
            )
            theta = model.equilibrium(p).theta
            oracle = brentq(lambda t: model.pitch_acceleration(p, t),
                            -math.pi / 2 + 1e-9, math.pi / 2 - 1e-9,
                            xtol=1e-13)
            assert abs(theta - oracle) <= 1e-8

    def test_no_equilibrium_when_com_never_crosses_vertical(self):
        p = SegwayParams(com_angle_offset=math.pi / 2)
        with pytest.raises(model.NoEquilibrium):
            model.equilibrium(p)


class TestDrift:
    def test_kinematic_identity(self, params):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = random_state(rng)
            f = model.eval_drift(params, x)
            assert f[0] == x.r_dot and f[1] == x.theta_dot

    def test_translation_invariance(self, params):
        x = State(5.0, 0.3, -0.7, 1.1)
        shifted = State(0.0, 0.3, -0.7, 1.1)
        assert np.array_equal(model.eval_drift(params, x),
                              model.eval_drift(params, shifted))
        assert np.array_equal(model.eval_input_matrix(params, x),
                              model.eval_input_matrix(params, shifted))

    def test_tilted_body_falls_forward(self, params):
        assert model.pitch_acceleration(params, math.pi / 8) > 0.0


class TestInputMatrix:
    def test_kinematic_rows_zero(self, params):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = model.eval_input_matrix(params, random_state(rng))
            assert g[0, 0] == 0.0 and g[1, 0] == 0.0

    def test_column_matches_input_finite_difference(self, params):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = random_state(rng)
            g = model.eval_input_matrix(params, x).ravel()

            def xdot(u):
                return np.array(model._xdot_parts(
                    params, (x.r, x.theta, x.r_dot, x.theta_dot), u[0]))

            fd = central_difference(xdot, np.array([0.0]), step=1e-4).ravel()
            scale = np.maximum(np.abs(g), 1e-12)
            assert np.max(np.abs(fd - g) / scale) <= 1e-8


class TestDiscreteStep:
    def test_equilibrium_fixed_point_both_methods(self, params, x_eq):
        for cfg in (EULER, RK4):
            nxt = model.discrete_step(x_eq, Input(0.0), cfg, params)
            assert np.max(np.abs(nxt.to_array() - x_eq.to_array())) <= 1e-12

    def test_euler_rule_is_textbook(self, params):
        x = State(0.1, 0.3, -0.2, 0.5)
        u = Input(2.0)
        xdot = (model.eval_drift(params, x)
                + model.eval_input_matrix(params, x).ravel() * u.current)
        expected = x.to_array() + EULER.dt * xdot
        nxt = model.discrete_step(x, u, EULER, params)
        assert np.array_equal(nxt.to_array(), expected)

    def test_rk4_euler_gap_shrinks_quadratically(self, params):
        x = State(0.0, math.pi / 8, 0.0, 0.0)
        u = Input(0.0)

        def gap(dt):
            e = model.discrete_step(x, u, DiscretizationConfig(
                dt, Integrator.FORWARD_EULER), params)
            r = model.discrete_step(x, u, DiscretizationConfig(
                dt, Integrator.RK4), params)
            return np.linalg.norm(e.to_array() - r.to_array())

        ratio = gap(0.01) / gap(0.005)
        assert 3.5 <= ratio <= 4.5

    def test_invalid_dt_rejected(self):
        with pytest.raises(ValueError):
            DiscretizationConfig(0.0)


class TestDiscreteJacobians:
    def test_euler_chain_rule(self, params):
        x = State(0.0, 0.25, 0.4, -0.3)
        u = Input(1.5)
        A, Bu = model.discrete_jacobians(x, u, EULER, params)

        def xdot(v):
            return np.array(model._xdot_parts(params, tuple(v[:4]), v[4]))

        jac = central_difference(xdot, np.append(x.to_array(), u.current))
        assert np.allclose(A, np.eye(4) + EULER.dt * jac[:, :4],
                           rtol=0, atol=1e-7)
        assert np.allclose(Bu, EULER.dt * jac[:, 4:5], rtol=0, atol=1e-9)

    @pytest.mark.parametrize("cfg", [EULER, RK4])
    def test_matches_finite_differences_at_random_points(self, params, cfg):
        rng = np.random.default_rng(9)
        for _ in range(100):
            x = random_state(rng)
            u = Input(float(rng.uniform(-20, 20)))
            A, Bu = model.discrete_jacobians(x, u, cfg, params)

            def step(v):
                s = model.discrete_step(State.from_array(v[:4]),
                                        Input(float(v[4])), cfg, params)
                return s.to_array()

            fd = central_difference(step, np.append(x.to_array(), u.current))
            scale = np.maximum(np.abs(fd), 1.0)
            err = np.abs(np.hstack([A, Bu]) - fd) / scale
            assert np.max(err) <= 1e-6

    def test_identity_limit(self, params):
        x = State(0.0, 0.2, 0.1, -0.1)
        A, _ = model.discrete_jacobians(x, Input(0.5),
                                        DiscretizationConfig(1e-10), params)
        assert np.allclose(A, np.eye(4), atol=1e-8)


def test_energy_conserved_without_friction_or_input(params):
    assert params.friction_coeff == 0.0
    cfg = DiscretizationConfig(1e-4, Integrator.RK4)
    x = State(0.0, math.pi / 8, 0.0, 0.0)
    e0 = model.mechanical_energy(params, x)
    for _ in range(10000):
        x = model.discrete_step(x, Input(0.0), cfg, params)
    drift = abs(model.mechanical_energy(params, x) - e0) / abs(e0)
    assert drift <= 1e-6


def test_friction_dissipates_energy(params):
    p = SegwayParams(friction_coeff=0.5)
    cfg = DiscretizationConfig(1e-4, Integrator.RK4)
    x = State(0.0, math.pi / 8, 0.3, 0.0)
    e0 = model.mechanical_energy(p, x)
    for _ in range(2000):
        x = model.discrete_step(x, Input(0.0), cfg, p)
    assert model.mechanical_energy(p, x) < e0


def test_r_accel_gradient_matches_finite_differences(params):
    p = SegwayParams(friction_coeff=0.3)
    rng = np.random.default_rng(13)
    for _ in range(30):
        v = rng.uniform(-1.5, 1.5, size=3)
        grad = model.r_accel_gradient(p, *v)

        def f_r(w):
            return [model.caf_parts(p, w[0], w[1], w[2])[0][0]]

        fd = central_difference(f_r, v).ravel()
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(np.array(grad) - fd) / scale) <= 1e-6
