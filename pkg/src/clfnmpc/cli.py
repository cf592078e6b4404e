"""Command-line entry point: experiment selection, config, CSV export.

Configuration is a single INI-style text file with one section per module;
every key has a default and unknown keys are rejected by name.  All plot
data leaves as CSV; rendering is left to external tooling.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import sys
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import model, nlp, sim, sqp
from .clf import PiecewiseConstant
from .model import Integrator, SegwayParams
from .nlp import FormulationKind, HessianMode, InvalidConfig


class ConfigError(ValueError):
    pass


EXPERIMENTS = ("stabilize", "reverse", "convergence", "tracking", "single")

_DEFAULT_FORMULATIONS = ("clf-qp", "clf-0", "clf-all", "lls-n", "lls-all",
                         "nmpc-0.1", "nmpc-1", "nmpc-10")
_DEFAULT_HORIZONS = (1, 10, 20, 30, 40, 50)


@dataclass
class RunConfig:
    """Validated run description; see configs/segway_default.cfg."""

    experiment: str = "stabilize"
    formulations: tuple[str, ...] = _DEFAULT_FORMULATIONS
    horizons: tuple[int, ...] = _DEFAULT_HORIZONS
    seed: int = 0
    out_dir: str = "results"

    params: SegwayParams = field(default_factory=SegwayParams)

    k_p: float = 25.0
    k_d: float = 25.5
    q11: float = 1.0
    q12: float = 0.0
    q22: float = 1.0

    u_lo: float = -20.0
    u_hi: float = 20.0
    slack_linear: float = 1e4
    slack_quadratic: float = 1e4

    qp_eps_abs: float = 1e-8
    qp_eps_rel: float = 1e-8
    qp_max_iter: int = 20000

    hessian_mode: str = "default"
    tol_constraint: float = 1e-6
    tol_cost: float = 1e-6
    max_iterations: int = 100

    dt: float = 0.01
    duration: float = 2.0
    truth: str = "euler"
    tracking_gain: float = 0.3
    tracking_breaks: tuple[float, ...] = (0.5, 2.5)
    tracking_values: tuple[float, ...] = (0.0, 1.0, 0.0)
    tracking_duration: float = 4.0

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.truth not in ("euler", "rk4"):
            raise ConfigError(f"unknown truth integrator {self.truth!r}")
        if self.hessian_mode not in ("default", "gauss-newton",
                                     "gauss-newton-plus-lls"):
            raise ConfigError(f"unknown hessian_mode {self.hessian_mode!r}")
        if not self.formulations:
            raise ConfigError("at least one formulation is required")
        if not self.horizons or any(n < 1 for n in self.horizons):
            raise ConfigError("horizons must be positive integers")
        for name in self.formulations:
            try:
                parse_variant(name)
            except InvalidConfig as err:
                raise ConfigError(str(err)) from err

    def sim_config(self) -> sim.SimConfig:
        return sim.SimConfig(
            params=self.params,
            clf_gains=(self.k_p, self.k_d),
            clf_q=np.array([[self.q11, self.q12], [self.q12, self.q22]]),
            dt=self.dt,
            duration=self.duration,
            u_bounds=(self.u_lo, self.u_hi),
            slack_linear=self.slack_linear,
            slack_quadratic=self.slack_quadratic,
            qp_eps_abs=self.qp_eps_abs,
            qp_eps_rel=self.qp_eps_rel,
            qp_max_iter=self.qp_max_iter,
            truth=Integrator(self.truth),
            tracking_gain=self.tracking_gain,
            tracking_profile=PiecewiseConstant(self.tracking_breaks,
                                               self.tracking_values),
            tracking_duration=self.tracking_duration,
        )

    def hessian_override(self) -> HessianMode | None:
        if self.hessian_mode == "default":
            return None
        return HessianMode(self.hessian_mode)


def parse_variant(name: str) -> tuple[str, FormulationKind, HessianMode | None]:
    """Formulation string, with an optional -gn suffix forcing plain GN."""
    name = name.strip().lower()
    if name.endswith("-gn"):
        kind = nlp.parse_formulation(name[:-3])
        return name, kind, HessianMode.GAUSS_NEWTON
    return name, nlp.parse_formulation(name), None


_FLOAT_LIST = ("tracking_breaks", "tracking_values")
_INT_LIST = ("horizons",)
_STR_LIST = ("formulations",)
_INTS = ("seed", "qp_max_iter", "max_iterations")
_STRS = ("experiment", "out_dir", "hessian_mode", "truth")

_SCHEMA: dict[str, tuple[str, ...]] = {
    "run": ("experiment", "formulations", "horizons", "seed", "out_dir"),
    "model": tuple(f.name for f in dc_fields(SegwayParams)),
    "clf": ("k_p", "k_d", "q11", "q12", "q22"),
    "nlp": ("u_lo", "u_hi", "slack_linear", "slack_quadratic"),
    "qp": ("qp_eps_abs", "qp_eps_rel", "qp_max_iter"),
    "sqp": ("hessian_mode", "tol_constraint", "tol_cost", "max_iterations"),
    "sim": ("dt", "duration", "truth", "tracking_gain", "tracking_breaks",
            "tracking_values", "tracking_duration"),
}


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; hashing this pins the run configuration."""
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key in keys:
            if section == "model":
                value = getattr(cfg.params, key)
            else:
                value = getattr(cfg, key)
            out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    """Parse and validate a config file; unknown keys are named."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err

    cfg = RunConfig()
    model_kwargs = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]")
            try:
                if section == "model":
                    model_kwargs[key] = float(raw)
                elif key in _STR_LIST:
                    setattr(cfg, key, tuple(
                        v.strip() for v in raw.split(",") if v.strip()))
                elif key in _INT_LIST:
                    setattr(cfg, key, tuple(
                        int(v) for v in raw.split(",") if v.strip()))
                elif key in _FLOAT_LIST:
                    setattr(cfg, key, tuple(
                        float(v) for v in raw.split(",") if v.strip()))
                elif key in _INTS:
                    setattr(cfg, key, int(raw))
                elif key in _STRS:
                    setattr(cfg, key, raw.strip())
                else:
                    setattr(cfg, key, float(raw))
            except ValueError as err:
                raise ConfigError(
                    f"bad value for {key!r} in [{section}]: {raw!r}") from err
    if model_kwargs:
        try:
            cfg.params = SegwayParams(**{**{
                f.name: getattr(SegwayParams(), f.name)
                for f in dc_fields(SegwayParams)}, **model_kwargs})
        except ValueError as err:
            raise ConfigError(str(err)) from err
    cfg.validate()
    return cfg


def emit_summary_table(results: list[sim.ExperimentResult]
                       ) -> tuple[str, list[list[str]]]:
    """Formulations as rows, horizons as columns, dashes for failures."""
    horizons = sorted({r.metadata["N"] for r in results})
    names = []
    for r in results:
        if r.metadata["formulation"] not in names:
            names.append(r.metadata["formulation"])
    cell = {}
    for r in results:
        key = (r.metadata["formulation"], r.metadata["N"])
        cell[key] = f"{r.avg_input_norm:.3f}" if r.converged else "-"

    rows = [["formulation"] + [f"N={n}" for n in horizons]]
    for name in names:
        rows.append([name] + [cell.get((name, n), "") for n in horizons])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    text = "\n".join(
        "  ".join(val.ljust(widths[i]) for i, val in enumerate(row)).rstrip()
        for row in rows)
    return text + "\n", rows


def _traj_name(result: sim.ExperimentResult) -> str:
    meta = result.metadata
    return (f"traj_{meta['experiment']}_{meta['formulation']}"
            f"_N{meta['N']}.csv")


def _validate_csvs(paths: list[Path]) -> None:
    for path in paths:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or len(rows) < 1:
            raise RuntimeError(f"empty CSV {path}")
        width = len(rows[0])
        if any(len(row) != width for row in rows[1:]):
            raise RuntimeError(f"ragged CSV {path}")


def _attach_hash(results: list[sim.ExperimentResult], digest: str) -> None:
    for r in results:
        r.metadata["config_hash"] = digest
        r.metadata["seed"] = None


def run(argv=None) -> int:
    """Entry point; returns 0 on success, 1 on config error, 2 on failure."""
    ap = argparse.ArgumentParser(
        prog="clfnmpc",
        description="Stability-constrained NMPC experiments on a Segway model")
    ap.add_argument("--experiment", choices=EXPERIMENTS)
    ap.add_argument("--formulation", action="append",
                    help="repeatable; e.g. clf-0, lls-all, nmpc-10, lls-n-gn")
    ap.add_argument("--horizon", action="append", type=int)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--dump-config", action="store_true")
    args = ap.parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.experiment:
            cfg.experiment = args.experiment
        if args.formulation:
            cfg.formulations = tuple(args.formulation)
        if args.horizon:
            cfg.horizons = tuple(args.horizon)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = str(args.out)
        cfg.validate()
    except (ConfigError, InvalidConfig) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1

    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return 0

    try:
        return _dispatch(cfg)
    except (sim.ControllerFailure, sqp.QpFailure, nlp.SolverFailure) as err:
        print(f"controller failure: {err}", file=sys.stderr)
        return 2


def _dispatch(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    sim_cfg = cfg.sim_config()
    written: list[Path] = []

    (out_dir / "config_used.cfg").write_text(dump_config(cfg))

    if cfg.experiment == "convergence":
        variants = []
        for name in cfg.formulations:
            label, kind, forced = parse_variant(name)
            if kind.is_pointwise:
                continue
            mode = (forced or cfg.hessian_override()
                    or sim.default_hessian_mode(kind))
            variants.append((label, kind, mode))
        logs = sim.experiment_convergence(sim_cfg, variants,
                                          N=cfg.horizons[0])
        status_rows = [["formulation", "status", "iterations",
                        "config_hash"]]
        for label, (log, status) in logs.items():
            path = out_dir / f"convergence_{label}.csv"
            sqp.write_iteration_log(log, path)
            written.append(path)
            status_rows.append([label, status.value, str(len(log)), digest])
        status_path = out_dir / "convergence_status.csv"
        with open(status_path, "w", newline="") as fh:
            csv.writer(fh).writerows(status_rows)
        written.append(status_path)
        for row in status_rows[1:]:
            print(f"{row[0]:<12} {row[1]:<10} iterations={row[2]}")
        _validate_csvs(written)
        return 0

    kinds = []
    for name in cfg.formulations:
        label, kind, forced = parse_variant(name)
        if forced is not None:
            raise ConfigError(
                f"{label!r} is only valid for the convergence experiment")
        kinds.append(kind)

    if cfg.experiment == "stabilize":
        results = sim.experiment_stabilize(kinds, list(cfg.horizons), sim_cfg)
    elif cfg.experiment == "reverse":
        results = sim.experiment_reverse(kinds, cfg.horizons[0], sim_cfg)
    elif cfg.experiment == "tracking":
        results = sim.experiment_tracking(kinds, cfg.horizons[0], sim_cfg)
    else:  # single
        results = sim.experiment_stabilize(kinds[:1], [cfg.horizons[0]],
                                           sim_cfg)
    _attach_hash(results, digest)

    summary_path = out_dir / "summary.csv"
    sim.write_results_csv(results, summary_path)
    written.append(summary_path)
    for res in results:
        path = out_dir / _traj_name(res)
        sim.write_trajectory_csv(res.trajectory, path)
        written.append(path)

    text, rows = emit_summary_table(results)
    (out_dir / "summary_table.txt").write_text(text)
    with open(out_dir / "summary_table.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    written.append(out_dir / "summary_table.csv")
    print(text, end="")

    _validate_csvs(written)
    if any(r.trajectory.failed for r in results):
        print("warning: at least one run terminated early", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
