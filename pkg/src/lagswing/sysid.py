"""Classical linear-regression system identification baseline.

Both plants admit the standard linear-in-parameters form
``tau_M = A(q, qd, qdd) pi`` with viscous friction appended, where the
regressor rows are derived offline from the closed-form equations of
motion.  The fit is an SVD pseudo-inverse with a truncation cutoff so that
rank pathologies on poorly excited data are observable in the diagnostics
instead of producing silent garbage.  No physical-plausibility projection
is applied: the estimator is allowed to land on parameters a physical
system could never have, which is exactly the failure mode the swing-up
comparison probes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .plants import ACTUATED, PENDULUM, CartpoleParams, FurutaParams, PlantParams
from .terms import LagrangianTerms
from .trajectory import Trajectory

SVD_CUTOFF = 1e-8

# Parameter vectors (viscous-extended):
#   cartpole: [m_c + m_p, m_p l, m_p l^2, b_cart, b_pend]
#   furuta:   [alpha, beta, gamma, sigma, b_arm, b_pend]
CARTPOLE_PARAM_NAMES = ("total_mass", "mass_length", "mass_length_sq",
                        "viscous_cart", "viscous_pend")
FURUTA_PARAM_NAMES = ("arm_lump", "pend_lump", "coupling_lump",
                      "mass_length", "viscous_arm", "viscous_pend")


def true_parameter_vector(params: PlantParams) -> np.ndarray:
    """Ground-truth linear parameters of the plant (viscous part only)."""
    if isinstance(params, CartpoleParams):
        mp, l = params.pend_mass, params.length_com
        return np.array([params.cart_mass + mp, mp * l, mp * l * l,
                         params.viscous[0], params.viscous[1]])
    alpha = params.arm_inertia + params.pend_mass * params.arm_length**2
    beta = params.pend_mass * params.pend_length_com**2 + params.pend_inertia
    gamma = params.pend_mass * params.arm_length * params.pend_length_com
    sigma = params.pend_mass * params.pend_length_com
    return np.array([alpha, beta, gamma, sigma, params.viscous[0], params.viscous[1]])


def regressor_row(plant_kind: str, q, qd, qdd, gravity: float = 9.81) -> np.ndarray:
    """(2, p) regressor block of one sample: tau = block @ pi."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    qdd = np.asarray(qdd, dtype=float)
    s, c = math.sin(q[PENDULUM]), math.cos(q[PENDULUM])
    if plant_kind == "cartpole":
        return np.array([
            [qdd[0], c * qdd[1] - s * qd[1] ** 2, 0.0, qd[0], 0.0],
            [0.0, c * qdd[0] + gravity * s, qdd[1], 0.0, qd[1]],
        ])
    if plant_kind == "furuta":
        return np.array([
            [qdd[0], s * s * qdd[0] + 2 * s * c * qd[0] * qd[1],
             c * qdd[1] - s * qd[1] ** 2, 0.0, qd[0], 0.0],
            [0.0, qdd[1] - s * c * qd[0] ** 2, c * qdd[0], gravity * s, 0.0, qd[1]],
        ])
    raise ValueError(f"unknown plant kind: {plant_kind!r}")


def regressor_matrix(plant_kind: str, q, qd, qdd, gravity: float = 9.81) -> np.ndarray:
    """Stacked (2N, p) regressor of a whole dataset (vectorized)."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    qdd = np.asarray(qdd, dtype=float)
    N = q.shape[0]
    s, c = np.sin(q[:, PENDULUM]), np.cos(q[:, PENDULUM])
    z = np.zeros(N)
    if plant_kind == "cartpole":
        rows0 = np.stack([qdd[:, 0], c * qdd[:, 1] - s * qd[:, 1] ** 2, z, qd[:, 0], z], axis=1)
        rows1 = np.stack([z, c * qdd[:, 0] + gravity * s, qdd[:, 1], z, qd[:, 1]], axis=1)
    elif plant_kind == "furuta":
        rows0 = np.stack([qdd[:, 0], s * s * qdd[:, 0] + 2 * s * c * qd[:, 0] * qd[:, 1],
                          c * qdd[:, 1] - s * qd[:, 1] ** 2, z, qd[:, 0], z], axis=1)
        rows1 = np.stack([z, qdd[:, 1] - s * c * qd[:, 0] ** 2, c * qdd[:, 0],
                          gravity * s, z, qd[:, 1]], axis=1)
    else:
        raise ValueError(f"unknown plant kind: {plant_kind!r}")
    out = np.empty((2 * N, rows0.shape[1]))
    out[0::2] = rows0
    out[1::2] = rows1
    return out


@dataclass
class RegressorDiagnostics:
    condition_number: float
    effective_rank: int
    truncated: int
    confidence: np.ndarray     # diagonal of the pseudo-inverse Gram, per parameter
    residual_rms: float

    def as_dict(self) -> dict:
        return {"condition_number": self.condition_number,
                "effective_rank": self.effective_rank,
                "truncated": self.truncated,
                "confidence": [float(v) for v in self.confidence],
                "residual_rms": self.residual_rms}


@dataclass
class SysIdParams:
    plant_kind: str
    pi: np.ndarray
    gravity: float
    param_names: tuple[str, ...]

    def named(self) -> dict:
        return {n: float(v) for n, v in zip(self.param_names, self.pi)}


def fit(traj: Trajectory, gravity: float = 9.81) -> tuple[SysIdParams, RegressorDiagnostics]:
    """Least-squares fit via truncated-SVD pseudo-inverse.

    Singular values below ``SVD_CUTOFF`` times the largest are truncated and
    the truncation count reported, which makes low-excitation rank
    pathologies visible.
    """
    if len(traj) == 0:
        raise ValueError("empty dataset")
    if traj.qdd is None:
        raise ValueError("system identification requires accelerations")
    A = regressor_matrix(traj.plant_kind, traj.q, traj.qd, traj.qdd, gravity)
    b = traj.tau.reshape(-1)
    U, sv, Vt = np.linalg.svd(A, full_matrices=False)
    keep = sv > SVD_CUTOFF * sv[0]
    inv_sv = np.where(keep, 1.0 / np.where(keep, sv, 1.0), 0.0)
    pi = Vt.T @ (inv_sv * (U.T @ b))
    residual = A @ pi - b
    names = CARTPOLE_PARAM_NAMES if traj.plant_kind == "cartpole" else FURUTA_PARAM_NAMES
    diag = RegressorDiagnostics(
        condition_number=float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf,
        effective_rank=int(keep.sum()),
        truncated=int((~keep).sum()),
        confidence=np.einsum("pk,k->p", Vt.T**2, inv_sv**2),
        residual_rms=float(np.sqrt(np.mean(residual**2))),
    )
    return SysIdParams(plant_kind=traj.plant_kind, pi=pi.copy(), gravity=gravity,
                       param_names=names), diag


def sysid_terms(params: SysIdParams, q, qd) -> LagrangianTerms:
    """Euler-Lagrange quantities reconstructed from the fitted parameters.

    Uses the same closed-form structure as the plant with the fitted vector;
    the potential is re-gauged to zero at hanging.  A non-positive-definite
    reconstructed mass matrix signals an implausible fit and is reported via
    ``RuntimeError`` rather than silently repaired.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    s, c = math.sin(q[PENDULUM]), math.cos(q[PENDULUM])
    n = 2
    dH = np.zeros((n, n, n))
    if params.plant_kind == "cartpole":
        m_tot, ml, ml2, b0, b1 = params.pi
        H = np.array([[m_tot, ml * c], [ml * c, ml2]])
        dH[0, 1, PENDULUM] = dH[1, 0, PENDULUM] = -ml * s
        cor = np.array([-ml * s * qd[1] ** 2, 0.0])
        grav = np.array([0.0, ml * params.gravity * s])
        V = ml * params.gravity * (1.0 - c)
    else:
        alpha, beta, gamma, sigma, b0, b1 = params.pi
        H = np.array([[alpha + beta * s * s, gamma * c], [gamma * c, beta]])
        dH[0, 0, PENDULUM] = 2.0 * beta * s * c
        dH[0, 1, PENDULUM] = dH[1, 0, PENDULUM] = -gamma * s
        cor = np.array([2.0 * beta * s * c * qd[0] * qd[1] - gamma * s * qd[1] ** 2,
                        -beta * s * c * qd[0] ** 2])
        grav = np.array([0.0, sigma * params.gravity * s])
        V = sigma * params.gravity * (1.0 - c)
    if H[0, 0] <= 0 or np.linalg.det(H) <= 0:
        raise RuntimeError(
            f"fitted parameters give a non-SPD mass matrix at q={q}: {params.named()}")
    tau_f = np.array([-b0 * qd[0], -b1 * qd[1]])
    T = 0.5 * float(qd @ H @ qd)
    return LagrangianTerms(H=H, dH_dq=dH, c=cor, g=grav, tau_f=tau_f, T=T, V=V)


@dataclass
class SysIdModel:
    """Identified model family exposed through the common model interface."""

    params: SysIdParams

    def terms(self, q, qd) -> LagrangianTerms:
        return sysid_terms(self.params, q, qd)


def save_sysid(params: SysIdParams, diag: RegressorDiagnostics, path: str | Path) -> None:
    payload = {"plant_kind": params.plant_kind, "gravity": params.gravity,
               "parameters": params.named(), "pi": [float(v) for v in params.pi],
               "param_names": list(params.param_names),
               "diagnostics": diag.as_dict()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_sysid(path: str | Path) -> SysIdParams:
    payload = json.loads(Path(path).read_text())
    return SysIdParams(plant_kind=payload["plant_kind"],
                       pi=np.asarray(payload["pi"], dtype=float),
                       gravity=payload["gravity"],
                       param_names=tuple(payload["param_names"]))
