"""Closed-loop simulation harness and the benchmark experiments.

Every controller runs at the model sampling period with zero-order-hold
inputs.  The truth integrator defaults to the same forward-Euler step the
controllers plan with; RK4 truth quantifies the model-plant mismatch.

Experiments:
    stabilize    regulate from a tilted start to the unforced equilibrium
    reverse      drive from the equilibrium to a forced pitch target
    convergence  full SQP iteration study on one cold-started instance
    tracking     follow a piecewise-constant velocity command
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import clf as clf_mod
from . import model, nlp, sqp
from .clf import ClfData, FixedPoint, PiecewiseConstant, ReferenceSignal
from .model import DiscretizationConfig, Input, Integrator, SegwayParams, State
from .nlp import FormulationKind, HessianMode, NlpParameters
from .qp import AdmmSolver


class EmptyTrajectory(ValueError):
    pass


class ControllerFailure(RuntimeError):
    """The controller could not produce usable inputs; the run stopped."""


@dataclass
class SimConfig:
    """Shared knobs for model, CLF synthesis, solver, and timing."""

    params: SegwayParams = field(default_factory=SegwayParams)
    clf_gains: tuple[float, float] = (25.0, 25.5)
    clf_q: np.ndarray = field(default_factory=lambda: np.eye(2))
    dt: float = 0.01
    duration: float = 2.0
    u_bounds: tuple[float, float] = (-20.0, 20.0)
    slack_linear: float = 1e4
    slack_quadratic: float = 1e4
    qp_eps_abs: float = 1e-8
    qp_eps_rel: float = 1e-8
    qp_max_iter: int = 20000
    truth: Integrator = Integrator.FORWARD_EULER
    tracking_gain: float = 0.3
    tracking_profile: PiecewiseConstant = field(
        default_factory=lambda: PiecewiseConstant((0.5, 2.5), (0.0, 1.0, 0.0)))
    tracking_duration: float = 4.0

    def clf_data(self) -> ClfData:
        return clf_mod.synthesize_clf(self.clf_gains, self.clf_q)

    def qp_solver(self) -> AdmmSolver:
        return AdmmSolver(eps_abs=self.qp_eps_abs, eps_rel=self.qp_eps_rel,
                          max_iter=self.qp_max_iter)

    def sqp_config(self, mode: HessianMode) -> sqp.SqpConfig:
        return sqp.SqpConfig(hessian_mode=mode, qp_solver=self.qp_solver())


def default_hessian_mode(kind: FormulationKind) -> HessianMode:
    if kind.name in ("lls-n", "lls-all"):
        return HessianMode.GAUSS_NEWTON_PLUS_LLS
    return HessianMode.GAUSS_NEWTON


@dataclass
class Trajectory:
    """Time-indexed closed-loop record.

    ``states`` and ``times`` carry one extra terminal row; the per-step
    arrays (inputs, constraint values, solver stats) have one entry per
    control period.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    clf_values: np.ndarray
    h_clf_values: np.ndarray
    slack0: np.ndarray
    qp_iterations: np.ndarray
    wall_times: np.ndarray
    failed: bool = False

    @property
    def final_state(self) -> State:
        return State.from_array(self.states[-1])

    def steps(self) -> int:
        return self.inputs.size


@dataclass
class ExperimentResult:
    trajectory: Trajectory
    avg_input_norm: float
    converged: bool
    steady_state_error: np.ndarray
    metadata: dict


def avg_input_norm(traj: Trajectory) -> float:
    """Mean absolute input over the control steps."""
    if traj.inputs.size == 0:
        raise EmptyTrajectory("no control steps recorded")
    return float(np.mean(np.abs(traj.inputs)))


def closed_loop(kind: FormulationKind, N: int, x0: State,
                ref: ReferenceSignal, config: SimConfig,
                duration: float | None = None,
                truth: Integrator | None = None,
                hessian_mode: HessianMode | None = None) -> Trajectory:
    """Run one controller in closed loop from x0.

    The pointwise clf-qp formulation re-solves its two-variable QP each
    step; every horizon formulation performs one warm-started SQP
    iteration per step, shifted forward between samples.
    """
    duration = config.duration if duration is None else duration
    truth = config.truth if truth is None else truth
    if duration <= 0.0 or config.dt <= 0.0:
        raise ValueError("duration and control period must be positive")
    steps = int(round(duration / config.dt))
    clfd = config.clf_data()
    truth_cfg = DiscretizationConfig(config.dt, truth)

    times = np.empty(steps + 1)
    states = np.empty((steps + 1, 4))
    inputs = np.empty(steps)
    v_vals = np.empty(steps + 1)
    h_vals = np.empty(steps)
    slack0 = np.empty(steps)
    qp_iters = np.zeros(steps, dtype=int)
    walls = np.empty(steps)

    pointwise = kind.is_pointwise
    if pointwise:
        solver = config.qp_solver()
        prob = None
        state = None
        mode = None
    else:
        mode = hessian_mode or default_hessian_mode(kind)
        prob = nlp.build(kind, N, config.dt, clfd, config.params, ref,
                         u_bounds=config.u_bounds,
                         slack_linear=config.slack_linear,
                         slack_quadratic=config.slack_quadratic)
        state = sqp.cold_state(prob)
        sqp_cfg = config.sqp_config(mode)

    x = x0
    failed = False
    consecutive_failures = 0
    u_prev = Input(0.0)
    done = 0
    for j in range(steps):
        t = j * config.dt
        times[j] = t
        states[j] = x.to_array()
        v_vals[j] = clf_mod.lyapunov_value(clfd, clf_mod.error_state(x, t, ref))

        tic = time.perf_counter()
        if pointwise:
            try:
                u, s0 = nlp.clf_qp_pointwise(
                    clfd, x, t, ref, config.params,
                    slack_weights=(config.slack_linear,
                                   config.slack_quadratic),
                    u_bounds=config.u_bounds, solver=solver)
                qp_iters[j] = 0
                consecutive_failures = 0
            except nlp.SolverFailure:
                u, s0 = u_prev, math.nan
                consecutive_failures += 1
        else:
            if j > 0:
                state = sqp.shift_warm_start(state, prob)
            p = NlpParameters(x_hat=x, t0=t)
            try:
                u, state, diag = sqp.rti_controller_step(prob, p, state,
                                                         sqp_cfg)
                qp_iters[j] = diag["qp_iterations"]
                s0 = diag["slack0"]
                consecutive_failures = 0
            except sqp.QpFailure:
                u, s0 = u_prev, math.nan
                consecutive_failures += 1
        walls[j] = time.perf_counter() - tic

        inputs[j] = u.current
        h_vals[j] = clf_mod.h_clf(clfd, x, t, u, ref, config.params)
        slack0[j] = s0
        u_prev = u
        x = model.discrete_step(x, u, truth_cfg, config.params)
        done = j + 1
        if (consecutive_failures >= 2
                or not np.all(np.isfinite(x.to_array()))
                or np.max(np.abs(x.to_array())) > 1e3):
            failed = True
            break

    times[done] = done * config.dt
    states[done] = x.to_array()
    v_vals[done] = clf_mod.lyapunov_value(
        clfd, clf_mod.error_state(x, done * config.dt, ref))
    end = done + 1
    return Trajectory(
        times=times[:end], states=states[:end], inputs=inputs[:done],
        clf_values=v_vals[:end], h_clf_values=h_vals[:done],
        slack0=slack0[:done], qp_iterations=qp_iters[:done],
        wall_times=walls[:done], failed=failed,
    )


def _result(traj: Trajectory, target: np.ndarray, tol: float,
            metadata: dict) -> ExperimentResult:
    """Judge convergence on the regulated pitch coordinates.

    The pitch-error controllers never act on the wheel position, and the
    forward velocity is unregulated in fixed-point mode, so the position
    coordinates drift by construction; a run counts as stabilized when the
    pitch error pair has settled.
    """
    err = traj.final_state.to_array() - target
    pitch_err = math.hypot(err[1], err[3])
    converged = (not traj.failed) and pitch_err <= tol
    return ExperimentResult(
        trajectory=traj,
        avg_input_norm=avg_input_norm(traj),
        converged=converged,
        steady_state_error=err,
        metadata=metadata,
    )


STABILIZE_START = State(0.0, math.pi / 8.0, 0.0, 0.0)
STABILIZE_FAIL_TOL = 0.1


def experiment_stabilize(formulations: list[FormulationKind],
                         horizons: list[int], config: SimConfig
                         ) -> list[ExperimentResult]:
    """Stabilization matrix: tilted start to the unforced equilibrium."""
    x_e = model.equilibrium(config.params)
    ref = FixedPoint(x_e)
    results = []
    for kind in formulations:
        for N in horizons:
            traj = closed_loop(kind, N, STABILIZE_START, ref, config)
            results.append(_result(
                traj, x_e.to_array(), STABILIZE_FAIL_TOL,
                {"experiment": "stabilize", "formulation": kind.label(),
                 "N": N}))
    return results


REVERSE_TARGET = State(0.0, math.pi / 8.0, 0.0, 0.0)
REVERSE_PITCH_TOL = 0.02


def experiment_reverse(formulations: list[FormulationKind], N: int,
                       config: SimConfig) -> list[ExperimentResult]:
    """Forced-equilibrium task: drive the pitch from theta_e to pi/8.

    Holding the target pitch requires sustained torque, so only the pitch
    coordinates settle; convergence and the steady-state error are judged
    on the pitch angle.
    """
    x_e = model.equilibrium(config.params)
    ref = FixedPoint(REVERSE_TARGET)
    results = []
    for kind in formulations:
        traj = closed_loop(kind, N, x_e, ref, config)
        pitch_err = traj.final_state.theta - REVERSE_TARGET.theta
        err = traj.final_state.to_array() - REVERSE_TARGET.to_array()
        converged = (not traj.failed) and abs(pitch_err) <= REVERSE_PITCH_TOL
        results.append(ExperimentResult(
            trajectory=traj,
            avg_input_norm=avg_input_norm(traj),
            converged=converged,
            steady_state_error=err,
            metadata={"experiment": "reverse", "formulation": kind.label(),
                      "N": N, "peak_pitch": float(np.max(traj.states[:, 1])),
                      "pitch_error": float(pitch_err)},
        ))
    return results


CONVERGENCE_STATE = State(0.0, math.pi / 8.0, 0.0, 0.0)


def convergence_variants() -> list[tuple[str, FormulationKind, HessianMode]]:
    gn = HessianMode.GAUSS_NEWTON
    lls = HessianMode.GAUSS_NEWTON_PLUS_LLS
    return [
        ("clf-0", nlp.CLF_0, gn),
        ("clf-all", nlp.CLF_ALL, gn),
        ("lls-n", nlp.LLS_N, lls),
        ("lls-all", nlp.LLS_ALL, lls),
        ("lls-n-gn", nlp.LLS_N, gn),
        ("lls-all-gn", nlp.LLS_ALL, gn),
        ("nmpc-10", nlp.nmpc_beta(10.0), gn),
    ]


def experiment_convergence(
        config: SimConfig,
        variants: list[tuple[str, FormulationKind, HessianMode]] | None = None,
        N: int = 30,
) -> dict[str, tuple[sqp.IterationLog, sqp.SqpStatus]]:
    """Cold-started full-SQP study at the forced target state.

    Measured state and target coincide, all variables and multipliers start
    at zero, and each formulation iterates until both tolerances hold or
    the iteration cap is reached (a recorded, valid outcome).
    """
    variants = variants if variants is not None else convergence_variants()
    ref = FixedPoint(CONVERGENCE_STATE)
    p = NlpParameters(x_hat=CONVERGENCE_STATE, t0=0.0)
    out = {}
    for label, kind, mode in variants:
        prob = nlp.build(kind, N, config.dt, config.clf_data(), config.params,
                         ref, u_bounds=config.u_bounds,
                         slack_linear=config.slack_linear,
                         slack_quadratic=config.slack_quadratic)
        _, log, status = sqp.sqp_solve(prob, p, sqp.cold_state(prob),
                                       config.sqp_config(mode))
        out[label] = (log, status)
    return out


def experiment_tracking(formulations: list[FormulationKind], N: int,
                        config: SimConfig) -> list[ExperimentResult]:
    """Velocity-command tracking through the pitch reference."""
    ref = clf_mod.velocity_tracking(config.params, config.tracking_profile,
                                    config.tracking_gain)
    x0 = model.equilibrium(config.params)
    results = []
    for kind in formulations:
        traj = closed_loop(kind, N, x0, ref, config,
                           duration=config.tracking_duration)
        theta_d = (ref.theta_e
                   - ref.gain * (traj.states[:, 2]
                                 - ref.r_dot_desired.value(traj.times)))
        pitch_err = traj.states[:, 1] - theta_d
        converged = (not traj.failed) and bool(
            np.max(np.abs(pitch_err)) < math.pi / 4.0)
        results.append(ExperimentResult(
            trajectory=traj,
            avg_input_norm=avg_input_norm(traj),
            converged=converged,
            steady_state_error=np.array([0.0, pitch_err[-1], 0.0, 0.0]),
            metadata={"experiment": "tracking",
                      "formulation": kind.label(), "N": N,
                      "rms_pitch_error": float(np.sqrt(np.mean(pitch_err ** 2))),
                      "peak_pitch_error": float(np.max(np.abs(pitch_err))),
                      "peak_input": float(np.max(np.abs(traj.inputs)))},
        ))
    return results


TRAJECTORY_COLUMNS = ("t", "r", "theta", "r_dot", "theta_dot", "u", "V",
                      "h_clf", "s0", "qp_iters", "wall_time")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per control step plus a terminal state-only row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for j in range(traj.steps()):
            writer.writerow(
                [repr(float(traj.times[j]))]
                + [repr(float(v)) for v in traj.states[j]]
                + [repr(float(traj.inputs[j])),
                   repr(float(traj.clf_values[j])),
                   repr(float(traj.h_clf_values[j])),
                   repr(float(traj.slack0[j])),
                   int(traj.qp_iterations[j]),
                   repr(float(traj.wall_times[j]))])
        j = traj.steps()
        writer.writerow(
            [repr(float(traj.times[j]))]
            + [repr(float(v)) for v in traj.states[j]]
            + ["", repr(float(traj.clf_values[j])), "", "", "", ""])


RESULT_COLUMNS = ("experiment", "formulation", "N", "avg_input_norm",
                  "converged", "err_r", "err_theta", "err_r_dot",
                  "err_theta_dot", "failed")


def write_results_csv(results: list[ExperimentResult], path) -> None:
    """Deterministic metric summary, one row per run (no wall times)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for res in results:
            writer.writerow([
                res.metadata.get("experiment", ""),
                res.metadata.get("formulation", ""),
                res.metadata.get("N", ""),
                repr(float(res.avg_input_norm)),
                int(res.converged),
                *(repr(float(v)) for v in res.steady_state_error),
                int(res.trajectory.failed),
            ])
