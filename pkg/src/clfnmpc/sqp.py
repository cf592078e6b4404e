"""Sequential quadratic programming on the horizon problems.

Two entry points: :func:`sqp_solve` iterates linearize / QP / full-step
update until the constraints are satisfied and the cost stops moving, and
:func:`rti_controller_step` performs exactly one such iteration per control
sample, warm-started from the shifted previous solution.

Full steps only (step scale fixed at 1.0); multipliers are overwritten each
iteration, never blended.  Divergence on hard cold starts is reported, not
patched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import qp
from .model import Input
from .nlp import HessianMode, HorizonProblem, NlpParameters


class SqpStatus(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"


class QpFailure(RuntimeError):
    """A QP subproblem ended in a non-solved status."""

    def __init__(self, iteration: int, status: qp.Status):
        super().__init__(f"QP returned {status.value} at iteration {iteration}")
        self.iteration = iteration
        self.status = status


@dataclass
class SqpState:
    """Primal iterate plus equality and inequality multipliers."""

    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    iteration: int = 0

    def copy(self) -> "SqpState":
        return SqpState(self.w.copy(), self.lam.copy(), self.mu.copy(),
                        self.iteration)


@dataclass
class SqpConfig:
    hessian_mode: HessianMode = HessianMode.GAUSS_NEWTON
    tol_constraint: float = 1e-6
    tol_cost: float = 1e-6
    max_iterations: int = 100
    step_scale: float = 1.0
    qp_solver: qp.AdmmSolver = field(default_factory=qp.AdmmSolver)

    def __post_init__(self):
        if self.tol_constraint <= 0.0 or self.tol_cost <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass
class IterationLog:
    """Per-iteration convergence record (the data behind the study plots)."""

    step_norm: list[float] = field(default_factory=list)
    constraint_violation: list[float] = field(default_factory=list)
    stationarity: list[float] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)

    def append(self, step, viol, stat, cost):
        self.step_norm.append(float(step))
        self.constraint_violation.append(float(viol))
        self.stationarity.append(float(stat))
        self.cost.append(float(cost))

    def __len__(self) -> int:
        return len(self.step_norm)

    def rows(self):
        for i in range(len(self)):
            yield (i + 1, self.step_norm[i], self.constraint_violation[i],
                   self.stationarity[i], self.cost[i])

    csv_header = ("iter", "step_norm", "constraint_violation",
                  "stationarity", "cost")


def cold_state(prob: HorizonProblem) -> SqpState:
    """All decision variables and multipliers at zero."""
    return SqpState(
        w=np.zeros(prob.layout.dim),
        lam=np.zeros(prob.n_eq),
        mu=np.zeros(prob.n_ineq),
    )


def constraint_violation(prob: HorizonProblem, p: NlpParameters,
                         w: np.ndarray) -> float:
    """l1 norm of equality residuals plus positive parts of inequalities."""
    g = prob.eval_eq(w, p)
    h = prob.eval_ineq(w, p)
    return float(np.sum(np.abs(g)) + np.sum(np.maximum(h, 0.0)))


def stationarity(prob: HorizonProblem, p: NlpParameters,
                 state: SqpState) -> float:
    """l1 norm of the Lagrangian gradient at the iterate."""
    data = prob.linearize(state.w, p)
    grad = (data.q + data.A[: prob.n_eq].T @ state.lam
            + data.A[prob.n_eq:].T @ state.mu)
    return float(np.sum(np.abs(grad)))


def _qp_step(prob: HorizonProblem, p: NlpParameters, state: SqpState,
             cfg: SqpConfig) -> tuple[np.ndarray, qp.QpSolution]:
    data = prob.linearize(state.w, p, cfg.hessian_mode, mu=state.mu)
    warm = qp.WarmStart(primal=np.zeros(prob.layout.dim),
                        dual=np.concatenate((state.lam, state.mu)))
    sol = cfg.qp_solver.solve(data, warm)
    return data, sol


def _apply(state: SqpState, prob: HorizonProblem, sol: qp.QpSolution,
           scale: float) -> SqpState:
    dw = sol.primal
    return SqpState(
        w=state.w + scale * dw,
        lam=sol.dual[: prob.n_eq].copy(),
        mu=np.maximum(sol.dual[prob.n_eq:], 0.0),
        iteration=state.iteration + 1,
    )


def sqp_solve(prob: HorizonProblem, p: NlpParameters, init: SqpState,
              cfg: SqpConfig | None = None
              ) -> tuple[SqpState, IterationLog, SqpStatus]:
    """Iterate to convergence on one problem instance.

    Converged means the l1 constraint violation is below tol_constraint and
    the cost changed by less than tol_cost since the previous iterate.
    Raises :class:`QpFailure` if a subproblem does not solve.
    """
    cfg = cfg or SqpConfig()
    state = init.copy()
    log = IterationLog()
    cost_prev = prob.eval_cost(state.w, p)
    for it in range(cfg.max_iterations):
        _, sol = _qp_step(prob, p, state, cfg)
        if sol.status is not qp.Status.SOLVED:
            raise QpFailure(it, sol.status)
        state = _apply(state, prob, sol, cfg.step_scale)
        viol = constraint_violation(prob, p, state.w)
        cost = prob.eval_cost(state.w, p)
        stat = stationarity(prob, p, state)
        log.append(np.linalg.norm(sol.primal), viol, stat, cost)
        if viol <= cfg.tol_constraint and abs(cost - cost_prev) <= cfg.tol_cost:
            return state, log, SqpStatus.CONVERGED
        cost_prev = cost
    return state, log, SqpStatus.MAX_ITER


def rti_controller_step(prob: HorizonProblem, p: NlpParameters,
                        state: SqpState, cfg: SqpConfig | None = None
                        ) -> tuple[Input, SqpState, dict]:
    """One linearize + QP + full-step update; returns the first input.

    The first input is clamped to the bounds as a final safety net.  The
    returned state carries the updated primal and multipliers for
    warm-starting the next call.  Raises :class:`QpFailure` on a bad QP;
    the caller is expected to fall back to the previous input and reset
    its warm start to the shifted previous solution.
    """
    cfg = cfg or SqpConfig()
    _, sol = _qp_step(prob, p, state, cfg)
    if sol.status is not qp.Status.SOLVED:
        raise QpFailure(state.iteration, sol.status)
    new_state = _apply(state, prob, sol, cfg.step_scale)
    u0 = float(new_state.w[prob.layout.u_index(0)])
    u0 = min(max(u0, prob.u_bounds[0]), prob.u_bounds[1])
    diagnostics = {
        "qp_iterations": sol.iterations,
        "qp_polished": sol.polished,
        "step_norm": float(np.linalg.norm(sol.primal)),
        "slack0": (float(new_state.w[prob.layout.s_index(0)])
                   if prob.layout.n_slack else 0.0),
    }
    return Input(u0), new_state, diagnostics


def shift_warm_start(state: SqpState, prob: HorizonProblem) -> SqpState:
    """Advance the solution one node, duplicating the terminal content."""
    lay = prob.layout
    w = state.w.copy()
    xs = prob.states(state.w)
    for k in range(prob.N):
        w[lay.x_slice(k)] = xs[k + 1]
    u = prob.inputs(state.w)
    for k in range(prob.N - 1):
        w[lay.u_index(k)] = u[k + 1]

    # slacks shift within their constraint group, keyed by node
    slack_of_node = {("%s@%d" % (c, k)): j
                     for j, (c, k) in enumerate(prob.soft)}
    s = prob.slacks(state.w)
    for j, (ctype, k) in enumerate(prob.soft):
        nxt = slack_of_node.get("%s@%d" % (ctype, k + 1))
        if nxt is not None:
            w[lay.s_index(j)] = s[nxt]

    lam = state.lam.copy()
    for i, tag in enumerate(prob.eq_rows):
        if tag[0] == "dyn" and tag[1] < prob.N - 1:
            lam[i] = state.lam[i + 4]

    mu = state.mu.copy()
    index_of_row = {row: i for i, row in enumerate(prob.ineq_rows)}
    for i, row in enumerate(prob.ineq_rows):
        if row[0] == "h":
            _, ctype, k, j = row
            nxt = slack_of_node.get("%s@%d" % (ctype, k + 1))
            if nxt is not None:
                mu[i] = state.mu[index_of_row[("h", ctype,
                                               prob.soft[nxt][1], nxt)]]
        elif row[0] == "s_nonneg":
            j = row[1]
            ctype, k = prob.soft[j]
            nxt = slack_of_node.get("%s@%d" % (ctype, k + 1))
            if nxt is not None:
                mu[i] = state.mu[index_of_row[("s_nonneg", nxt)]]
        elif row[0] in ("u_hi", "u_lo") and row[1] < prob.N - 1:
            mu[i] = state.mu[index_of_row[(row[0], row[1] + 1)]]
    return SqpState(w, lam, mu, state.iteration)


def write_iteration_log(log: IterationLog, path) -> None:
    """CSV export of the convergence record."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IterationLog.csv_header)
        for row in log.rows():
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
