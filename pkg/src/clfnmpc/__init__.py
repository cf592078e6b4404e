"""Stability-constrained nonlinear MPC laboratory on a planar Segway."""

from . import clf, diff, model, nlp, qp, sim, sqp
from .clf import ClfData, FixedPoint, PiecewiseConstant, VelocityTracking
from .model import DiscretizationConfig, Input, Integrator, SegwayParams, State
from .nlp import (CLF_0, CLF_ALL, CLF_QP, LLS_ALL, LLS_N, FormulationKind,
                  HessianMode, NlpParameters, build, clf_qp_pointwise,
                  nmpc_beta)
from .sim import SimConfig, Trajectory, closed_loop

__all__ = [
    "clf", "diff", "model", "nlp", "qp", "sim", "sqp",
    "ClfData", "FixedPoint", "PiecewiseConstant", "VelocityTracking",
    "DiscretizationConfig", "Input", "Integrator", "SegwayParams", "State",
    "CLF_0", "CLF_ALL", "CLF_QP", "LLS_ALL", "LLS_N", "FormulationKind",
    "HessianMode", "NlpParameters", "build", "clf_qp_pointwise", "nmpc_beta",
    "SimConfig", "Trajectory", "closed_loop",
]

__version__ = "0.1.0"
