"""Lagrangian-structured model learning and energy-based swing-up control."""

from .plants import (ACTUATED, PENDULUM, AnalyticModel, CartpoleParams,
                     FurutaParams, JointState, plant_energy,
                     plant_forward_dynamics, step, wrap_angle)
from .terms import LagrangianTerms
from .model import LagrangianModel, eval_terms, forward_dynamics, init_model, inverse_dynamics
from .trajectory import Trajectory, add_torque_noise, finite_difference_accelerations

__all__ = [
    "ACTUATED", "PENDULUM", "AnalyticModel", "CartpoleParams", "FurutaParams",
    "JointState", "LagrangianModel", "LagrangianTerms", "Trajectory",
    "add_torque_noise", "eval_terms", "finite_difference_accelerations",
    "forward_dynamics", "init_model", "inverse_dynamics", "plant_energy",
    "plant_forward_dynamics", "step", "wrap_angle",
]
