"""Analytic ground-truth plants: Cartpole and Furuta pendulum.

Angle convention (used by every module in this package): the pendulum angle
is measured from the hanging-down configuration, so hanging = 0 and
upright = pi.  The potential energy is gauged to zero at hanging rest.
Joint 0 is the actuated joint (cart position in m, or arm angle in rad),
joint 1 is the passive pendulum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .terms import LagrangianTerms, cholesky_solve, require_finite

ACTUATED = 0
PENDULUM = 1
N_DOF = 2


def wrap_angle(x):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x), 2.0 * np.pi)


def upright_distance(q_p) -> np.ndarray:
    """Absolute wrapped angular distance of the pendulum joint from upright."""
    return np.abs(wrap_angle(np.asarray(q_p) - np.pi))


@dataclass
class JointState:
    """Generalized positions/velocities (and optionally accelerations)."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray | None = None

    def __post_init__(self):
        self.q = require_finite("q", self.q)
        self.qd = require_finite("qd", self.qd)
        if self.qdd is not None:
            self.qdd = require_finite("qdd", self.qdd)


@dataclass(frozen=True)
class CartpoleParams:
    """Cart with a passive point-mass pendulum.

    The cart joint carries viscous plus Coulomb friction (the rack-and-pinion
    drive of the physical rig has significant stiction); the pendulum joint
    carries viscous friction only.
    """

    cart_mass: float = 0.5          # kg
    pend_mass: float = 0.15         # kg
    length_com: float = 0.25        # m, pivot to pendulum center of mass
    gravity: float = 9.81           # m/s^2
    viscous: tuple[float, float] = (0.5, 1e-4)   # N s/m, N m s/rad
    static_friction: float = 0.05   # N, Coulomb level on the cart joint

    kind = "cartpole"

    def __post_init__(self):
        if min(self.cart_mass, self.pend_mass, self.length_com, self.gravity) <= 0:
            raise ValueError("cartpole masses, length and gravity must be positive")
        if min(self.viscous) < 0 or self.static_friction < 0:
            raise ValueError("friction coefficients must be non-negative")


@dataclass(frozen=True)
class FurutaParams:
    """Rotary arm (horizontal plane) carrying a passive vertical pendulum.

    Viscous friction only on both joints.  The arm is software-limited; an
    episode that drives it past ``arm_limit`` is terminated as a failure.
    """

    arm_mass: float = 0.1           # kg
    arm_length: float = 0.2         # m, pivot to pendulum attachment
    arm_inertia: float = 1.533e-3   # kg m^2 about the vertical axis, motor included
    pend_mass: float = 0.05         # kg
    pend_length_com: float = 0.15   # m, pivot to pendulum center of mass
    pend_inertia: float = 3.75e-4   # kg m^2 about the pendulum center of mass
    gravity: float = 9.81
    viscous: tuple[float, float] = (2e-3, 1e-4)  # N m s/rad per joint
    arm_limit: float = 2.3          # rad

    kind = "furuta"

    def __post_init__(self):
        positives = (self.arm_mass, self.arm_length, self.arm_inertia,
                     self.pend_mass, self.pend_length_com, self.pend_inertia,
                     self.gravity)
        if min(positives) <= 0:
            raise ValueError("furuta masses, lengths and inertias must be positive")
        if min(self.viscous) < 0:
            raise ValueError("friction coefficients must be non-negative")


PlantParams = CartpoleParams | FurutaParams


def plant_friction(params: PlantParams, qd) -> np.ndarray:
    """Ground-truth friction torque of the plant, sign(0) := 0."""
    qd = np.asarray(qd, dtype=float)
    tau_f = -np.asarray(params.viscous) * qd
    if isinstance(params, CartpoleParams):
        tau_f[ACTUATED] -= params.static_friction * np.sign(qd[ACTUATED])
    return tau_f


def _cartpole_structure(p: CartpoleParams, q, qd):
    mc, mp, l, g = p.cart_mass, p.pend_mass, p.length_com, p.gravity
    th, thd = q[PENDULUM], qd[PENDULUM]
    s, c = math.sin(th), math.cos(th)
    H = np.array([[mc + mp, mp * l * c],
                  [mp * l * c, mp * l * l]])
    dH = np.zeros((N_DOF, N_DOF, N_DOF))
    dH[0, 1, PENDULUM] = dH[1, 0, PENDULUM] = -mp * l * s
    cor = np.array([-mp * l * s * thd * thd, 0.0])
    grav = np.array([0.0, mp * g * l * s])
    V = mp * g * l * (1.0 - c)
    return H, dH, cor, grav, V


def _furuta_structure(p: FurutaParams, q, qd):
    # Lumped constants of the standard rotary-pendulum model:
    #   alpha = J_arm + m_p L_a^2, beta = m_p l_p^2 + J_p, gamma = m_p L_a l_p.
    alpha = p.arm_inertia + p.pend_mass * p.arm_length**2
    beta = p.pend_mass * p.pend_length_com**2 + p.pend_inertia
    gamma = p.pend_mass * p.arm_length * p.pend_length_com
    sigma = p.pend_mass * p.pend_length_com
    th, q0d, thd = q[PENDULUM], qd[ACTUATED], qd[PENDULUM]
    s, c = math.sin(th), math.cos(th)
    H = np.array([[alpha + beta * s * s, gamma * c],
                  [gamma * c, beta]])
    dH = np.zeros((N_DOF, N_DOF, N_DOF))
    dH[0, 0, PENDULUM] = 2.0 * beta * s * c
    dH[0, 1, PENDULUM] = dH[1, 0, PENDULUM] = -gamma * s
    cor = np.array([2.0 * beta * s * c * q0d * thd - gamma * s * thd * thd,
                    -beta * s * c * q0d * q0d])
    grav = np.array([0.0, sigma * p.gravity * s])
    V = sigma * p.gravity * (1.0 - c)
    return H, dH, cor, grav, V


def _cartpole_scalars(p: CartpoleParams, q0, q1, qd0, qd1):
    mc, mp, l, g = p.cart_mass, p.pend_mass, p.length_com, p.gravity
    s, c = math.sin(q1), math.cos(q1)
    h01 = mp * l * c
    return (mc + mp, h01, mp * l * l,
            -mp * l * s * qd1 * qd1, 0.0,
            0.0, mp * g * l * s)


def _furuta_scalars(p: FurutaParams, q0, q1, qd0, qd1):
    alpha = p.arm_inertia + p.pend_mass * p.arm_length**2
    beta = p.pend_mass * p.pend_length_com**2 + p.pend_inertia
    gamma = p.pend_mass * p.arm_length * p.pend_length_com
    s, c = math.sin(q1), math.cos(q1)
    return (alpha + beta * s * s, gamma * c, beta,
            2.0 * beta * s * c * qd0 * qd1 - gamma * s * qd1 * qd1,
            -beta * s * c * qd0 * qd0,
            0.0, p.pend_mass * p.pend_length_com * p.gravity * s)


def _scalar_step_loop(params: PlantParams, q0, q1, qd0, qd1, t0, t1, h, substeps):
    """Inner semi-implicit Euler loop on Python floats (hot path of rollouts)."""
    scalars = _cartpole_scalars if isinstance(params, CartpoleParams) else _furuta_scalars
    b0, b1 = params.viscous
    coulomb = params.static_friction if isinstance(params, CartpoleParams) else 0.0
    for _ in range(substeps):
        h00, h01, h11, c0, c1, g0, g1 = scalars(params, q0, q1, qd0, qd1)
        f0 = -b0 * qd0 - (coulomb if qd0 > 0 else -coulomb if qd0 < 0 else 0.0)
        f1 = -b1 * qd1
        r0 = t0 + f0 - c0 - g0
        r1 = t1 + f1 - c1 - g1
        # 2x2 Cholesky solve on scalars
        L00 = math.sqrt(h00)
        L10 = h01 / L00
        L11 = math.sqrt(h11 - L10 * L10)
        y0 = r0 / L00
        y1 = (r1 - L10 * y0) / L11
        a1 = y1 / L11
        a0 = (y0 - L10 * a1) / L00
        qd0 += h * a0
        qd1 += h * a1
        q0 += h * qd0
        q1 += h * qd1
    return q0, q1, qd0, qd1


def plant_terms(params: PlantParams, q, qd) -> LagrangianTerms:
    """Exact Euler-Lagrange quantities of the plant, friction included."""
    q = require_finite("q", q)
    qd = require_finite("qd", qd)
    if isinstance(params, CartpoleParams):
        H, dH, cor, grav, V = _cartpole_structure(params, q, qd)
    else:
        H, dH, cor, grav, V = _furuta_structure(params, q, qd)
    T = 0.5 * float(qd @ H @ qd)
    return LagrangianTerms(H=H, dH_dq=dH, c=cor, g=grav,
                           tau_f=plant_friction(params, qd), T=T, V=V)


def plant_forward_dynamics(params: PlantParams, state: JointState, tau) -> np.ndarray:
    """Acceleration solving the plant's exact equations of motion."""
    tau = require_finite("tau", tau)
    t = plant_terms(params, state.q, state.qd)
    return cholesky_solve(t.H, tau + t.tau_f - t.c - t.g)


def step(params: PlantParams, state: JointState, tau, dt: float,
         substeps: int = 20) -> JointState:
    """Semi-implicit Euler update: velocity first, then position with it.

    ``dt`` is the control period; the plant is integrated with ``substeps``
    internal semi-implicit Euler steps of ``dt / substeps`` each.  At the
    raw 500 Hz control rate a single step drifts a few percent of the total
    energy over seconds on these configuration-dependent mass matrices;
    substepping keeps the unforced frictionless drift within 1% while the
    per-substep scheme stays the same (pass ``substeps=1`` for the textbook
    single update).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    tau = require_finite("tau", tau)
    q0, q1, qd0, qd1 = _scalar_step_loop(
        params, float(state.q[0]), float(state.q[1]),
        float(state.qd[0]), float(state.qd[1]),
        float(tau[0]), float(tau[1]), dt / substeps, substeps)
    return JointState(q=np.array([q0, q1]), qd=np.array([qd0, qd1]))


def plant_energy(params: PlantParams, state: JointState) -> tuple[float, float]:
    """Exact (kinetic, potential) energy; potential is zero at hanging rest."""
    t = plant_terms(params, state.q, state.qd)
    return t.T, t.V


def hanging_state(perturbation: float = 0.0) -> JointState:
    """Rest state with the pendulum hanging, optionally tilted by ``perturbation`` rad."""
    q = np.zeros(N_DOF)
    q[PENDULUM] = perturbation
    return JointState(q=q, qd=np.zeros(N_DOF))


def upright_state() -> JointState:
    q = np.zeros(N_DOF)
    q[PENDULUM] = np.pi
    return JointState(q=q, qd=np.zeros(N_DOF))


@dataclass
class AnalyticModel:
    """Ground-truth model family: plant equations exposed through the model interface."""

    params: PlantParams

    def terms(self, q, qd) -> LagrangianTerms:
        return plant_terms(self.params, q, qd)


def frictionless(params: PlantParams) -> PlantParams:
    """Copy of the plant constants with every friction coefficient zeroed."""
    if isinstance(params, CartpoleParams):
        return CartpoleParams(cart_mass=params.cart_mass, pend_mass=params.pend_mass,
                              length_com=params.length_com, gravity=params.gravity,
                              viscous=(0.0, 0.0), static_friction=0.0)
    return FurutaParams(arm_mass=params.arm_mass, arm_length=params.arm_length,
                        arm_inertia=params.arm_inertia, pend_mass=params.pend_mass,
                        pend_length_com=params.pend_length_com,
                        pend_inertia=params.pend_inertia, gravity=params.gravity,
                        viscous=(0.0, 0.0), arm_limit=params.arm_limit)
