import numpy as np
import pytest

from clfnmpc import clf, model


@pytest.fixture(scope="session")
def params():
    return model.SegwayParams()


@pytest.fixture(scope="session")
def x_eq(params):
    return model.equilibrium(params)


@pytest.fixture(scope="session")
def clfd():
    return clf.default_clf()


@pytest.fixture(scope="session")
def fixed_ref(x_eq):
    return clf.FixedPoint(x_eq)


def random_state(rng, scale=2.0):
    return model.State(*(rng.uniform(-scale, scale, size=4)))


def central_difference(fn, x, step=1e-6):
    """Central finite-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[j] += step
        lo[j] -= step
        jac[:, j] = (np.asarray(fn(hi)) - np.asarray(fn(lo))) / (2 * step)
    return jac
