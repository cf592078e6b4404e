"""Parametric horizon problems for the stability-constrained controllers.

Decision vector w = [X, U, S]: stacked states x_0..x_N, zero-order-hold
inputs u_0..u_{N-1}, and one scalar slack per soft constraint row.  All
inequalities use the "<= 0" convention with slacks moved to the left side:

    h - s <= 0,   -s <= 0,   u - u_hi <= 0,   u_lo - u <= 0.

Soft rows per formulation (the constraint-count table):
    clf-0    1 decrease row at node 0 (on the measured state, affine in u_0)
    clf-all  N decrease rows at nodes 0..N-1
    lls-n    decrease row at node 0 plus one level-set row at node N
    lls-all  decrease row at node 0 plus level-set rows at nodes 1..N
    nmpc-b   none; stability is pursued through the cost instead
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import clf as clf_mod
from . import diff, model
from .clf import ClfData, ReferenceSignal
from .model import Input, Integrator, SegwayParams, State
from .qp import AdmmSolver, QpData, Status


class InvalidConfig(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class SolverFailure(RuntimeError):
    """The inner QP solver returned a non-solved status."""


class HessianMode(Enum):
    GAUSS_NEWTON = "gauss-newton"
    GAUSS_NEWTON_PLUS_LLS = "gauss-newton-plus-lls"


@dataclass(frozen=True)
class FormulationKind:
    """Controller family tag; beta only applies to the cost-driven baseline."""

    name: str
    beta: float = 0.0

    _NAMES = ("clf-qp", "clf-0", "clf-all", "lls-n", "lls-all", "nmpc-beta")

    def __post_init__(self):
        if self.name not in self._NAMES:
            raise InvalidConfig(f"unknown formulation {self.name!r}")
        if self.name == "nmpc-beta" and self.beta <= 0.0:
            raise InvalidConfig("beta must be strictly positive")

    @property
    def is_nmpc(self) -> bool:
        return self.name == "nmpc-beta"

    @property
    def is_pointwise(self) -> bool:
        return self.name == "clf-qp"

    def label(self) -> str:
        if self.is_nmpc:
            return f"nmpc-{self.beta:g}"
        return self.name


CLF_QP = FormulationKind("clf-qp")
CLF_0 = FormulationKind("clf-0")
CLF_ALL = FormulationKind("clf-all")
LLS_N = FormulationKind("lls-n")
LLS_ALL = FormulationKind("lls-all")


def nmpc_beta(beta: float) -> FormulationKind:
    return FormulationKind("nmpc-beta", float(beta))


def parse_formulation(text: str) -> FormulationKind:
    text = text.strip().lower()
    if text.startswith("nmpc-"):
        try:
            return nmpc_beta(float(text[5:]))
        except ValueError as err:
            raise InvalidConfig(f"bad beta in {text!r}") from err
    return FormulationKind(text)


@dataclass(frozen=True)
class NlpParameters:
    """Per-solve parameters: measured state and wall-clock time of node 0."""

    x_hat: State
    t0: float = 0.0


def soft_rows(kind: FormulationKind, N: int) -> list[tuple[str, int]]:
    if kind.is_nmpc:
        return []
    if kind.name in ("clf-qp", "clf-0"):
        return [("clf", 0)]
    if kind.name == "clf-all":
        return [("clf", k) for k in range(N)]
    if kind.name == "lls-n":
        return [("clf", 0), ("lls", N)]
    return [("clf", 0)] + [("lls", k) for k in range(1, N + 1)]


class Layout:
    """Bijection between (node, variable role) and flat indices of w."""

    def __init__(self, N: int, n_slack: int):
        self.N = N
        self.n_slack = n_slack
        self.n_x = 4 * (N + 1)
        self.dim = self.n_x + N + n_slack
        self._roles: list[tuple] = []
        for k in range(N + 1):
            for i in range(4):
                self._roles.append(("x", k, i))
        for k in range(N):
            self._roles.append(("u", k))
        for j in range(n_slack):
            self._roles.append(("s", j))
        self._flat = {role: i for i, role in enumerate(self._roles)}

    def x_slice(self, k: int) -> slice:
        return slice(4 * k, 4 * k + 4)

    def u_index(self, k: int) -> int:
        return self.n_x + k

    def s_index(self, j: int) -> int:
        return self.n_x + self.N + j

    def role_of(self, i: int) -> tuple:
        return self._roles[i]

    def flat_of(self, role: tuple) -> int:
        return self._flat[role]


@dataclass
class HorizonProblem:
    """Fully assembled parametric horizon problem for one formulation."""

    kind: FormulationKind
    N: int
    dt: float
    clf: ClfData
    params: SegwayParams
    ref: ReferenceSignal
    u_bounds: tuple[float, float]
    slack_linear: np.ndarray      # z, one weight per slack
    slack_quadratic: np.ndarray   # diagonal of Z
    layout: Layout = field(init=False)
    soft: list[tuple[str, int]] = field(init=False)
    eq_rows: list[tuple] = field(init=False)
    ineq_rows: list[tuple] = field(init=False)

    def __post_init__(self):
        self.soft = soft_rows(self.kind, self.N)
        self.layout = Layout(self.N, len(self.soft))
        self.eq_rows = [("init", i) for i in range(4)]
        for k in range(self.N):
            self.eq_rows += [("dyn", k, i) for i in range(4)]
        self.ineq_rows = [("h", ctype, k, j)
                          for j, (ctype, k) in enumerate(self.soft)]
        self.ineq_rows += [("s_nonneg", j) for j in range(len(self.soft))]
        self.ineq_rows += [("u_hi", k) for k in range(self.N)]
        self.ineq_rows += [("u_lo", k) for k in range(self.N)]

    # number of equality / inequality rows
    @property
    def n_eq(self) -> int:
        return len(self.eq_rows)

    @property
    def n_ineq(self) -> int:
        return len(self.ineq_rows)

    def node_time(self, p: NlpParameters, k) -> float:
        return p.t0 + np.asarray(k) * self.dt

    def states(self, w: np.ndarray) -> np.ndarray:
        return w[: self.layout.n_x].reshape(self.N + 1, 4)

    def inputs(self, w: np.ndarray) -> np.ndarray:
        return w[self.layout.n_x: self.layout.n_x + self.N]

    def slacks(self, w: np.ndarray) -> np.ndarray:
        return w[self.layout.n_x + self.N:]

    def _check_dim(self, w: np.ndarray) -> None:
        if w.shape != (self.layout.dim,):
            raise DimensionMismatch(
                f"decision vector has shape {w.shape}, "
                f"expected ({self.layout.dim},)")

    def eval_cost(self, w: np.ndarray, p: NlpParameters) -> float:
        w = np.asarray(w, dtype=float)
        self._check_dim(w)
        u = self.inputs(w)
        s = self.slacks(w)
        total = 0.0
        for k in range(self.N):
            total += 0.5 * u[k] ** 2
        if self.kind.is_nmpc:
            xs = self.states(w)
            for k in range(self.N):
                eta = clf_mod.error_state(State.from_array(xs[k]),
                                          self.node_time(p, k), self.ref)
                total += float(clf_mod.v_quad(self.clf.Q, eta.e, eta.e_dot))
            eta_n = clf_mod.error_state(State.from_array(xs[self.N]),
                                        self.node_time(p, self.N), self.ref)
            total += self.kind.beta * clf_mod.lyapunov_value(self.clf, eta_n)
        else:
            for j in range(len(self.soft)):
                total += (self.slack_linear[j] * s[j]
                          + 0.5 * self.slack_quadratic[j] * s[j] ** 2)
        return float(total)

    def eval_eq(self, w: np.ndarray, p: NlpParameters) -> np.ndarray:
        """Stacked [x_0 - x_hat; x_{k+1} - f_d(x_k, u_k)]."""
        w = np.asarray(w, dtype=float)
        self._check_dim(w)
        xs = self.states(w)
        u = self.inputs(w)
        out = np.empty(self.n_eq)
        out[:4] = xs[0] - p.x_hat.to_array()
        cfg = model.DiscretizationConfig(self.dt, Integrator.FORWARD_EULER)
        for k in range(self.N):
            nxt = model.discrete_step(State.from_array(xs[k]),
                                      Input(float(u[k])), cfg, self.params)
            out[4 + 4 * k: 8 + 4 * k] = xs[k + 1] - nxt.to_array()
        return out

    def eval_ineq(self, w: np.ndarray, p: NlpParameters) -> np.ndarray:
        """Stacked [h - s; -s; u - u_hi; u_lo - u] residuals."""
        w = np.asarray(w, dtype=float)
        self._check_dim(w)
        xs = self.states(w)
        u = self.inputs(w)
        s = self.slacks(w)
        vals = []
        for ctype, k in self.soft:
            t_k = float(self.node_time(p, k))
            if ctype == "clf" and k == 0:
                h = clf_mod.h_clf(self.clf, p.x_hat, p.t0, Input(float(u[0])),
                                  self.ref, self.params)
            elif ctype == "clf":
                h = clf_mod.h_clf(self.clf, State.from_array(xs[k]), t_k,
                                  Input(float(u[k])), self.ref, self.params)
            else:
                h = clf_mod.h_lls(self.clf, State.from_array(xs[k]), t_k,
                                  p.x_hat, k, self.dt, self.ref)
            vals.append(h)
        out = np.concatenate((
            np.array(vals) - s if len(vals) else np.zeros(0),
            -s,
            u - self.u_bounds[1],
            self.u_bounds[0] - u,
        ))
        return out

    # ---- quadratic model assembly -------------------------------------

    def _eta_fn(self, t_arr):
        ref = self.ref

        def fn(seg):
            e, e_dot = clf_mod.eta_parts(ref, seg, t_arr)
            return [e, e_dot]

        return fn

    def linearize(self, w: np.ndarray, p: NlpParameters,
                  hessian_mode: HessianMode = HessianMode.GAUSS_NEWTON,
                  mu: np.ndarray | None = None) -> QpData:
        """Quadratic model at w: psd Hessian, exact gradient and Jacobians.

        ``mu`` carries the current inequality multipliers; only the
        level-set rows contribute curvature, clamped at zero, and only in
        the plus-LLS mode.
        """
        w = np.asarray(w, dtype=float)
        self._check_dim(w)
        lay = self.layout
        n = lay.dim
        xs = self.states(w)
        u = self.inputs(w)
        s = self.slacks(w)

        a_rows: list[np.ndarray] = []
        a_cols: list[np.ndarray] = []
        a_vals: list[np.ndarray] = []

        def add_block(rows, cols, values):
            r = np.repeat(np.asarray(rows), len(cols))
            c = np.tile(np.asarray(cols), len(rows))
            a_rows.append(r)
            a_cols.append(c)
            a_vals.append(np.asarray(values, dtype=float).ravel())

        # equality rows: initial condition, then dynamics defects
        add_block(np.arange(4), np.arange(4), np.eye(4))
        dt = self.dt
        params = self.params

        def step_fn(seg):
            return list(model.step_parts(params, dt, Integrator.FORWARD_EULER,
                                         tuple(seg[:4]), seg[4]))

        seg_xu = np.column_stack((xs[:-1], u))
        _, jac_dyn = diff.evaluate_batch(step_fn, seg_xu)
        for k in range(self.N):
            rows = 4 + 4 * k + np.arange(4)
            cols = np.concatenate((np.arange(4 * k, 4 * k + 4),
                                   [lay.u_index(k)]))
            add_block(rows, cols, -jac_dyn[k])
            add_block(rows, np.arange(4 * (k + 1), 4 * (k + 1) + 4),
                      np.eye(4))

        # inequality rows, in eval_ineq order
        row0 = self.n_eq
        clfd = self.clf
        ref = self.ref
        x_hat_tuple = (p.x_hat.r, p.x_hat.theta, p.x_hat.r_dot,
                       p.x_hat.theta_dot)

        clf_nodes = [k for (ctype, k) in self.soft if ctype == "clf" and k > 0]
        lls_nodes = [k for (ctype, k) in self.soft if ctype == "lls"]

        jac_clf: dict[int, np.ndarray] = {}
        if clf_nodes:
            t_arr = self.node_time(p, np.array(clf_nodes, dtype=float))

            def hclf_fn(seg):
                return [clf_mod.h_clf_parts(clfd, ref, params,
                                            tuple(seg[:4]), seg[4], t_arr)]

            seg = np.column_stack((xs[clf_nodes], u[clf_nodes]))
            _, jc = diff.evaluate_batch(hclf_fn, seg)
            jac_clf = {k: jc[i, 0] for i, k in enumerate(clf_nodes)}

        eta_jac_lls: dict[int, np.ndarray] = {}
        jac_lls: dict[int, np.ndarray] = {}
        if lls_nodes:
            t_arr = self.node_time(p, np.array(lls_nodes, dtype=float))
            eta_fn = self._eta_fn(t_arr)
            eta_vals, eta_jac = diff.evaluate_batch(eta_fn, xs[lls_nodes])
            P = clfd.P
            for i, k in enumerate(lls_nodes):
                eta_jac_lls[k] = eta_jac[i]
                grad_v = 2.0 * (eta_vals[i] @ P) @ eta_jac[i]
                jac_lls[k] = grad_v

        for j, (ctype, k) in enumerate(self.soft):
            row = row0 + j
            s_col = lay.s_index(j)
            if ctype == "clf" and k == 0:
                block = diff.jacobian(
                    lambda seg: [clf_mod.h_clf_parts(clfd, ref, params,
                                                     x_hat_tuple, seg[0],
                                                     p.t0)],
                    np.array([u[0]]),
                )
                add_block([row], [lay.u_index(0)], block.values)
            elif ctype == "clf":
                cols = np.concatenate((
                    np.arange(4 * k, 4 * k + 4),
                    [lay.u_index(k)]))
                add_block([row], cols, jac_clf[k])
            else:
                add_block([row], np.arange(4 * k, 4 * k + 4),
                          jac_lls[k])
            add_block([row], [s_col], [-1.0])

        row_s = row0 + len(self.soft)
        for j in range(len(self.soft)):
            add_block([row_s + j], [lay.s_index(j)], [-1.0])
        row_uhi = row_s + len(self.soft)
        for k in range(self.N):
            add_block([row_uhi + k], [lay.u_index(k)], [1.0])
        row_ulo = row_uhi + self.N
        for k in range(self.N):
            add_block([row_ulo + k], [lay.u_index(k)], [-1.0])

        n_rows = self.n_eq + self.n_ineq
        A = sp.csc_matrix(
            (np.concatenate(a_vals),
             (np.concatenate(a_rows), np.concatenate(a_cols))),
            shape=(n_rows, n),
        )

        # gradient of the cost
        q = np.zeros(n)
        if self.N:
            _, ju = diff.evaluate_batch(lambda seg: [0.5 * seg[0] ** 2],
                                        u[:, None])
            q[lay.n_x: lay.n_x + self.N] = ju[:, 0, 0]
        if len(self.soft):
            z_arr = self.slack_linear
            big_z = self.slack_quadratic
            _, js = diff.evaluate_batch(
                lambda seg: [z_arr * seg[0] + 0.5 * big_z * seg[0] ** 2],
                s[:, None])
            q[lay.s_index(0):] = js[:, 0, 0]

        b_rows: list[np.ndarray] = []
        b_cols: list[np.ndarray] = []
        b_vals: list[np.ndarray] = []

        def add_b(rows, cols, values):
            r = np.repeat(np.asarray(rows), len(cols))
            c = np.tile(np.asarray(cols), len(rows))
            b_rows.append(r)
            b_cols.append(c)
            b_vals.append(np.asarray(values, dtype=float).ravel())

        u_cols = np.arange(lay.n_x, lay.n_x + self.N)
        b_rows.append(u_cols)
        b_cols.append(u_cols)
        b_vals.append(np.ones(self.N))
        if len(self.soft):
            s_cols = np.arange(lay.s_index(0), lay.s_index(0) + len(self.soft))
            b_rows.append(s_cols)
            b_cols.append(s_cols)
            b_vals.append(self.slack_quadratic.astype(float))

        if self.kind.is_nmpc:
            t_arr = self.node_time(p, np.arange(self.N + 1, dtype=float))
            eta_vals, eta_jac = diff.evaluate_batch(self._eta_fn(t_arr), xs)
            Q = self.clf.Q
            P = self.clf.P
            for k in range(self.N):
                cols = np.arange(4 * k, 4 * k + 4)
                q[cols] += 2.0 * (eta_vals[k] @ Q) @ eta_jac[k]
                add_b(cols, cols, 2.0 * eta_jac[k].T @ Q @ eta_jac[k])
            cols = np.arange(4 * self.N, 4 * self.N + 4)
            q[cols] += 2.0 * self.kind.beta * (eta_vals[self.N] @ P) @ eta_jac[self.N]
            add_b(cols, cols,
                  2.0 * self.kind.beta * eta_jac[self.N].T @ P @ eta_jac[self.N])

        if (hessian_mode is HessianMode.GAUSS_NEWTON_PLUS_LLS
                and lls_nodes and mu is not None):
            for j, (ctype, k) in enumerate(self.soft):
                if ctype != "lls":
                    continue
                weight = max(float(mu[j]), 0.0)
                if weight == 0.0:
                    continue
                cols = np.arange(4 * k, 4 * k + 4)
                add_b(cols, cols,
                      weight * diff.lls_hessian_block(clfd, eta_jac_lls[k]))

        B = sp.csc_matrix(
            (np.concatenate(b_vals),
             (np.concatenate(b_rows), np.concatenate(b_cols))),
            shape=(n, n),
        )

        g_val = self.eval_eq(w, p)
        h_val = self.eval_ineq(w, p)
        lo = np.concatenate((-g_val, np.full(self.n_ineq, -np.inf)))
        hi = np.concatenate((-g_val, -h_val))
        return QpData(B=B, q=q, A=A, lo=lo, hi=hi)


def build(kind: FormulationKind, N: int, dt: float, clf: ClfData,
          params: SegwayParams, ref: ReferenceSignal,
          u_bounds: tuple[float, float] = (-20.0, 20.0),
          slack_linear: float = 1e4,
          slack_quadratic: float = 1e4) -> HorizonProblem:
    """Assemble the horizon problem for one formulation.

    The pointwise clf-qp kind builds the same problem as clf-0; its closed
    loop is normally run through :func:`clf_qp_pointwise` instead.
    """
    if N < 1:
        raise InvalidConfig("horizon must contain at least one interval")
    if dt <= 0.0:
        raise InvalidConfig("dt must be strictly positive")
    if u_bounds[0] >= u_bounds[1]:
        raise InvalidConfig("input bounds must satisfy u_lo < u_hi")
    if slack_linear < 0.0 or slack_quadratic < 0.0:
        raise InvalidConfig("slack weights must be nonnegative")
    n_s = len(soft_rows(kind, N))
    return HorizonProblem(
        kind=kind, N=N, dt=dt, clf=clf, params=params, ref=ref,
        u_bounds=u_bounds,
        slack_linear=np.full(n_s, float(slack_linear)),
        slack_quadratic=np.full(n_s, float(slack_quadratic)),
    )


def clf_qp_pointwise(clf: ClfData, x_hat: State, t: float,
                     ref: ReferenceSignal, params: SegwayParams,
                     slack_weights: tuple[float, float] = (1e4, 1e4),
                     u_bounds: tuple[float, float] = (-20.0, 20.0),
                     solver: AdmmSolver | None = None) -> tuple[Input, float]:
    """Min-norm stabilizing input from the slacked pointwise QP.

    Decision variables (u, s); always feasible because the slack absorbs
    any violation of the decrease condition.
    """
    x_tuple = (x_hat.r, x_hat.theta, x_hat.r_dot, x_hat.theta_dot)
    h0 = float(clf_mod.h_clf_parts(clf, ref, params, x_tuple, 0.0, t))
    block = diff.jacobian(
        lambda seg: [clf_mod.h_clf_parts(clf, ref, params, x_tuple,
                                         seg[0], t)],
        np.array([0.0]),
    )
    slope = float(block.values[0, 0])
    z, big_z = slack_weights
    data = QpData(
        B=sp.csc_matrix(np.diag([1.0, big_z])),
        q=np.array([0.0, z]),
        A=sp.csc_matrix(np.array([[slope, -1.0],
                                  [0.0, 1.0],
                                  [1.0, 0.0]])),
        lo=np.array([-np.inf, 0.0, u_bounds[0]]),
        hi=np.array([-h0, np.inf, u_bounds[1]]),
    )
    sol = (solver or AdmmSolver()).solve(data)
    if sol.status is not Status.SOLVED:
        raise SolverFailure(f"pointwise QP ended with {sol.status}")
    return Input(float(sol.primal[0])), float(sol.primal[1])
