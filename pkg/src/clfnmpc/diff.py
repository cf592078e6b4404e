"""Forward-mode automatic differentiation with dual numbers.

Decision segments in the horizon problems are tiny (at most nine variables
per node), so forward mode with seed width equal to the segment width gives
exact first derivatives without a tape.  A batch axis lets one pass
differentiate the same segment function at many nodes simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .clf import ClfData


class UnsupportedPrimitive(TypeError):
    """An operation outside the supported dual-number primitive set."""


def _scaled(der: np.ndarray, c) -> np.ndarray:
    if isinstance(c, np.ndarray):
        return der * c[..., None]
    return der * c


class Dual:
    """Scalar with attached partial derivatives.

    ``val`` has shape (batch,) and ``der`` has shape (batch, width).
    Supported primitives: +, -, *, /, unary -, ** with a real exponent, and
    the functions :func:`sin`, :func:`cos`, :func:`exp`, :func:`sqrt`.
    """

    __slots__ = ("val", "der")

    # Keep numpy from consuming Duals elementwise; reflected ops run instead.
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = val
        self.der = der

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        return Dual(self.val + other, self.der)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        return Dual(self.val - other, self.der)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.der)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                _scaled(other.der, self.val) + _scaled(self.der, other.val),
            )
        return Dual(self.val * other, _scaled(self.der, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            return Dual(val, _scaled(self.der - _scaled(other.der, val), inv))
        inv = 1.0 / other
        return Dual(self.val * inv, _scaled(self.der, inv))

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        val = other * inv
        return Dual(val, _scaled(self.der, -val * inv))

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise UnsupportedPrimitive("dual-valued exponents are not supported")
        if p == 2:
            return Dual(self.val * self.val, _scaled(self.der, 2.0 * self.val))
        return Dual(self.val ** p, _scaled(self.der, p * self.val ** (p - 1)))

    def _unsupported(self, *args):
        raise UnsupportedPrimitive(
            "operation outside the dual-number primitive set"
        )

    __mod__ = __rmod__ = __floordiv__ = __rfloordiv__ = _unsupported
    __abs__ = __matmul__ = __rmatmul__ = _unsupported


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), _scaled(x.der, np.cos(x.val)))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), _scaled(x.der, -np.sin(x.val)))
    return np.cos(x)


def exp(x):
    if isinstance(x, Dual):
        v = np.exp(x.val)
        return Dual(v, _scaled(x.der, v))
    return np.exp(x)


def sqrt(x):
    if isinstance(x, Dual):
        v = np.sqrt(x.val)
        return Dual(v, _scaled(x.der, 0.5 / v))
    return np.sqrt(x)


def value(x):
    """Strip the derivative part, passing plain numbers through."""
    return x.val if isinstance(x, Dual) else x


@dataclass
class JacobianBlock:
    """Dense derivative block addressed into a larger constraint stack.

    ``rows`` and ``cols`` give the constraint and decision-variable indices
    the block occupies; ``values`` is the (len(rows), len(cols)) matrix.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray


def evaluate_batch(
    fn: Callable[[list], Sequence], seg: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``fn`` and its Jacobian at every row of ``seg``.

    ``seg`` has shape (batch, width).  Returns the stacked values with shape
    (batch, n_out) and the Jacobians with shape (batch, n_out, width).
    """
    seg = np.atleast_2d(np.asarray(seg, dtype=float))
    batch, width = seg.shape
    eye = np.eye(width)
    seeds = [
        Dual(seg[:, j], np.broadcast_to(eye[j], (batch, width)))
        for j in range(width)
    ]
    out = fn(seeds)
    vals = np.empty((batch, len(out)))
    jac = np.zeros((batch, len(out), width))
    for i, o in enumerate(out):
        if isinstance(o, Dual):
            vals[:, i] = o.val
            jac[:, i, :] = o.der
        else:
            vals[:, i] = o
    return vals, jac


def jacobian(
    fn: Callable[[list], Sequence],
    w_seg: np.ndarray,
    rows: np.ndarray | None = None,
    cols: np.ndarray | None = None,
) -> JacobianBlock:
    """Exact Jacobian of a segment function at ``w_seg``.

    ``fn`` maps a list of scalars to a sequence of scalars and must be built
    from the supported primitives.  ``rows``/``cols`` optionally place the
    block inside a larger stack; they default to local indices.
    """
    w = np.asarray(w_seg, dtype=float).ravel()
    _, jac = evaluate_batch(fn, w[None, :])
    values = jac[0]
    if rows is None:
        rows = np.arange(values.shape[0])
    if cols is None:
        cols = np.arange(values.shape[1])
    return JacobianBlock(np.asarray(rows), np.asarray(cols), values)


def lls_hessian_block(clf: "ClfData", error_map_jacobian: np.ndarray) -> np.ndarray:
    """Curvature block of a Lyapunov level-set constraint row.

    For a quadratic Lyapunov function with matrix P and an error map with
    state Jacobian H, the second derivative in the state is 2 H' P H, which
    is symmetric positive semidefinite whenever P is positive definite.
    """
    H = np.asarray(error_map_jacobian, dtype=float)
    block = 2.0 * H.T @ clf.P @ H
    return 0.5 * (block + block.T)
