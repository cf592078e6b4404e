import math

import numpy as np
import pytest

from clfnmpc import diff
from conftest import central_difference


def test_identity_jacobian():
    block = diff.jacobian(lambda w: list(w), np.array([3.0, -2.0, 0.5]))
    assert np.array_equal(block.values, np.eye(3))


def test_hand_chain_rule():
    block = diff.jacobian(
        lambda w: [w[0] * w[1], diff.sin(w[0])], np.array([1.0, 2.0]))
    expected = np.array([[2.0, 1.0], [math.cos(1.0), 0.0]])
    assert np.allclose(block.values, expected, atol=1e-15)


def _random_stack(rng):
    a, b, c = rng.uniform(0.5, 2.0, size=3)

    def fn(w):
        t0 = diff.sin(a * w[0]) * w[1] + diff.cos(w[2] - w[0])
        t1 = diff.exp(0.3 * w[1]) / (1.0 + w[2] * w[2])
        t2 = diff.sqrt(1.5 + w[0] * w[0]) - b * w[1] ** 2 + c / (2.0 + w[2])
        t3 = (w[0] - w[1]) * (w[2] + 0.5) + 2.0
        return [t0, t1, t2, t3]

    return fn


def test_random_stacks_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(50):
        fn = _random_stack(rng)
        w = rng.uniform(-1.5, 1.5, size=3)
        block = diff.jacobian(fn, w)
        fd = central_difference(lambda v: [diff.value(o) for o in fn(list(v))], w)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(block.values - fd) / scale) <= 1e-6


def test_batched_matches_per_point():
    rng = np.random.default_rng(11)
    fn = _random_stack(rng)
    W = rng.uniform(-1.0, 1.0, size=(6, 3))
    vals, jac = diff.evaluate_batch(fn, W)
    for i in range(W.shape[0]):
        block = diff.jacobian(fn, W[i])
        assert np.allclose(jac[i], block.values, atol=1e-14)
        out = [diff.value(o) for o in fn(list(W[i]))]
        assert np.allclose(vals[i], out, atol=1e-14)


def test_constant_output_has_zero_derivative():
    block = diff.jacobian(lambda w: [1.5, w[0]], np.array([2.0]))
    assert np.allclose(block.values, [[0.0], [1.0]])


def test_unsupported_primitive_raises():
    w = np.array([1.0, 2.0])
    with pytest.raises(diff.UnsupportedPrimitive):
        diff.jacobian(lambda s: [s[0] % s[1]], w)
    with pytest.raises(diff.UnsupportedPrimitive):
        diff.jacobian(lambda s: [s[0] ** s[1]], w)
    with pytest.raises(diff.UnsupportedPrimitive):
        diff.jacobian(lambda s: [abs(s[0])], w)


def test_division_rules():
    block = diff.jacobian(lambda w: [w[0] / w[1], 3.0 / w[0]],
                          np.array([2.0, 4.0]))
    expected = np.array([[0.25, -0.125], [-0.75, 0.0]])
    assert np.allclose(block.values, expected, atol=1e-15)


def test_pow_scalar_exponent():
    block = diff.jacobian(lambda w: [w[0] ** 3, w[0] ** 2], np.array([2.0]))
    assert np.allclose(block.values.ravel(), [12.0, 4.0])


class _FakeClf:
    def __init__(self, P):
        self.P = P


def test_lls_hessian_identity_case():
    H = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    block = diff.lls_hessian_block(_FakeClf(np.eye(2)), H)
    expected = np.zeros((4, 4))
    expected[1, 1] = expected[3, 3] = 2.0
    assert np.array_equal(block, expected)


def test_lls_hessian_psd_on_random_inputs():
    rng = np.random.default_rng(3)
    for _ in range(100):
        M = rng.normal(size=(2, 2))
        P = M @ M.T + 0.1 * np.eye(2)
        H = rng.normal(size=(2, 4))
        block = diff.lls_hessian_block(_FakeClf(P), H)
        assert np.allclose(block, block.T)
        assert np.min(np.linalg.eigvalsh(block)) >= -1e-12
