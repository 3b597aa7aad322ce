"""Energy-based swing-up, PD balancing and the supervisory mode switch.

The energy law regulates the pendulum energy
``E_p = kinetic_factor * qd_p H_pp qd_p + V(q)`` toward the upright-rest
value ``E*`` by pushing the actuated joint in phase with the pendulum
swing, plus a proportional term that keeps the actuated joint near its
setpoint.  It is parameterized over any model that can produce
LagrangianTerms, which is what lets the analytic, identified and learned
families drive the identical controller.

Sign bookkeeping: with the package convention (pendulum angle 0 hanging,
pi upright) the pendulum power balance is
``Edot_p = -(coupling) * u * qd_p * cos(q_p)`` up to positive factors, so
``u = k_E (E_p - E*) sign(qd_p cos q_p)`` pumps energy in while E_p < E*
and out while above, for positive k_E.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from .plants import (ACTUATED, PENDULUM, JointState, PlantParams,
                     plant_forward_dynamics, wrap_angle)
from .terms import LagrangianTerms


class ModelInterface(Protocol):
    """Any model family: maps a joint state to its Euler-Lagrange quantities."""

    def terms(self, q, qd) -> LagrangianTerms: ...


class ControlMode(Enum):
    SWING_UP = "swingup"
    BALANCE = "balance"


@dataclass
class EnergyControllerConfig:
    k_energy: float                 # gain on the pendulum-energy error
    k_p_act: float                  # proportional gain on the actuated joint
    e_star: float                   # desired pendulum energy, J
    q_star_act: float = 0.0         # actuated-joint setpoint
    deadband: float = 0.02          # rad/s below which the sign term is zeroed
    k_d_aug: float = 0.0            # derivative augmentation on the actuated joint
    kinetic_factor: float = 0.125   # printed value; 0.5 recovers the true kinetic energy

    def __post_init__(self):
        if self.k_energy <= 0:
            raise ValueError("k_energy must be positive")
        if self.deadband < 0:
            raise ValueError("deadband must be non-negative")


@dataclass
class BalanceConfig:
    """Full-state PD about the upright equilibrium with switching hysteresis."""

    gains: np.ndarray = field(default_factory=lambda: np.zeros(4))
    # error vector order: [q_act - setpoint, wrap(q_pend - pi), qd_act, qd_pend]
    q_star_act: float = 0.0
    switch_in_angle: float = 0.15   # rad from upright
    switch_in_vel: float = 2.0      # rad/s
    switch_out_angle: float = 0.35  # rad from upright, strictly > switch_in_angle

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        if not self.switch_out_angle > self.switch_in_angle:
            raise ValueError("switch-out window must strictly contain switch-in window")


def pendulum_energy(model: ModelInterface, q, qd,
                    kinetic_factor: float = 0.125) -> float:
    """Pendulum energy from the model's mass matrix and potential."""
    t = model.terms(q, qd)
    qd_p = float(np.asarray(qd, dtype=float)[PENDULUM])
    return kinetic_factor * qd_p * t.H[PENDULUM, PENDULUM] * qd_p + t.V


def desired_energy(model: ModelInterface, q_star_act: float = 0.0) -> float:
    """Pendulum energy at upright rest as this model sees it (V at the top)."""
    q = np.array([q_star_act, np.pi])
    return pendulum_energy(model, q, np.zeros(2))


def energy_control(model: ModelInterface, q, qd, cfg: EnergyControllerConfig) -> float:
    """Swing-up torque on the actuated joint."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    e_p = pendulum_energy(model, q, qd, cfg.kinetic_factor)
    qd_p = qd[PENDULUM]
    phase = qd_p * math.cos(q[PENDULUM])
    sign = 0.0 if (abs(qd_p) <= cfg.deadband or phase == 0.0) else math.copysign(1.0, phase)
    u = cfg.k_energy * (e_p - cfg.e_star) * sign
    u += cfg.k_p_act * (cfg.q_star_act - q[ACTUATED])
    u -= cfg.k_d_aug * qd[ACTUATED]
    return float(u)


def balance_pd(q, qd, cfg: BalanceConfig) -> float:
    """Full-state PD torque about the upright equilibrium; zero at the setpoint."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    err = np.array([q[ACTUATED] - cfg.q_star_act,
                    float(wrap_angle(q[PENDULUM] - np.pi)),
                    qd[ACTUATED], qd[PENDULUM]])
    return float(-cfg.gains @ err)


def supervisor(model: ModelInterface, q, qd, mode: ControlMode,
               energy_cfg: EnergyControllerConfig,
               balance_cfg: BalanceConfig) -> tuple[float, ControlMode]:
    """One 500 Hz control step: update the mode, then apply the active law.

    SwingUp -> Balance when the pendulum is inside the switch-in window
    (angle and velocity); Balance -> SwingUp only after leaving the strictly
    larger switch-out window, which prevents mode chatter.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    dist = abs(float(wrap_angle(q[PENDULUM] - np.pi)))
    if mode is ControlMode.SWING_UP:
        if dist < balance_cfg.switch_in_angle and abs(qd[PENDULUM]) < balance_cfg.switch_in_vel:
            mode = ControlMode.BALANCE
    else:
        if dist > balance_cfg.switch_out_angle:
            mode = ControlMode.SWING_UP
    if mode is ControlMode.BALANCE:
        u = balance_pd(q, qd, balance_cfg)
    else:
        u = energy_control(model, q, qd, energy_cfg)
    return u, mode


def closed_loop_matrix(params: PlantParams, cfg: BalanceConfig,
                       h: float = 1e-6) -> np.ndarray:
    """Linearization of the balance loop about upright (Coulomb friction zeroed,
    it is not differentiable at rest).  State order: [q_act, q_pend, qd_act, qd_pend].
    """
    if hasattr(params, "static_friction"):
        from dataclasses import replace
        p = replace(params, static_friction=0.0)
    else:
        p = params

    def field_at(x):
        q = np.array([x[0], x[1]])
        qd = np.array([x[2], x[3]])
        u = balance_pd(q, qd, cfg)
        qdd = plant_forward_dynamics(p, JointState(q=q, qd=qd), np.array([u, 0.0]))
        return np.array([qd[0], qd[1], qdd[0], qdd[1]])

    x0 = np.array([cfg.q_star_act, np.pi, 0.0, 0.0])
    A = np.zeros((4, 4))
    for k in range(4):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += h
        xm[k] -= h
        A[:, k] = (field_at(xp) - field_at(xm)) / (2 * h)
    return A


def is_balance_stable(params: PlantParams, cfg: BalanceConfig) -> bool:
    """True when the linearized balance loop is Hurwitz."""
    eig = np.linalg.eigvals(closed_loop_matrix(params, cfg))
    return bool(np.all(eig.real < 0))
