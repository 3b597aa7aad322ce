"""Euler-Lagrange quantities shared by every model family.

Every model in this package (analytic plant, least-squares identified,
learned network) reduces to the same set of quantities at a given joint
state: mass matrix, its configuration gradient, Coriolis/centrifugal and
gravity forces, friction torque and the two energies.  The controller and
the evaluation harness only ever consume this container, which is what
makes the model families interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LagrangianTerms:
    """All Euler-Lagrange quantities of one model at one joint state (SI units).

    Attributes:
        H: (n, n) symmetric positive definite mass matrix.
        dH_dq: (n, n, n) stack of configuration gradients, ``dH_dq[:, :, k]``
            is the derivative of H with respect to joint k.
        c: (n,) Coriolis/centrifugal force, ``Hdot qd - 0.5 * d(qd' H qd)/dq``.
        g: (n,) gravity force, the gradient of the potential energy.
        tau_f: (n,) friction torque (opposes motion, zero at rest).
        T: kinetic energy in J, ``0.5 * qd' H qd``.
        V: potential energy in J, zero at the hanging rest configuration.
    """

    H: np.ndarray
    dH_dq: np.ndarray
    c: np.ndarray
    g: np.ndarray
    tau_f: np.ndarray
    T: float
    V: float


def require_finite(name: str, value) -> np.ndarray:
    """Validate that an array-like is fully finite, returning it as float64."""
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries: {arr!r}")
    return arr


def cholesky_solve(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``H x = b`` for symmetric positive definite H via its Cholesky factor.

    Supports batching: H may be (..., n, n) with b (..., n).  The factorization
    failing means the positive-definiteness invariant is broken upstream, so the
    ``LinAlgError`` is converted into an internal fault rather than a user error.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - invariant breach
        raise RuntimeError(f"mass matrix lost positive definiteness: {exc}") from exc
    n = H.shape[-1]
    # Forward then backward substitution, vectorized over any batch dims.
    y = np.zeros_like(b)
    for i in range(n):
        acc = b[..., i]
        for j in range(i):
            acc = acc - L[..., i, j] * y[..., j]
        y[..., i] = acc / L[..., i, i]
    x = np.zeros_like(b)
    for i in reversed(range(n)):
        acc = y[..., i]
        for j in range(i + 1, n):
            acc = acc - L[..., j, i] * x[..., j]
        x[..., i] = acc / L[..., i, i]
    return x


def inverse_dynamics_from_terms(terms: LagrangianTerms, qdd: np.ndarray) -> np.ndarray:
    """Motor torque that explains the given acceleration under this model.

    Friction acts as an applied generalized force alongside the motor torque,
    so it is subtracted from the structural torque balance.
    """
    qdd = np.asarray(qdd, dtype=float)
    return terms.H @ qdd + terms.c + terms.g - terms.tau_f


def forward_dynamics_from_terms(terms: LagrangianTerms, tau: np.ndarray) -> np.ndarray:
    """Acceleration produced by the given motor torque under this model."""
    tau = np.asarray(tau, dtype=float)
    return cholesky_solve(terms.H, tau + terms.tau_f - terms.c - terms.g)


def energy_rate_from_terms(terms: LagrangianTerms, qd: np.ndarray, qdd: np.ndarray) -> float:
    """Model-side total energy rate ``qd' H qdd + 0.5 qd' Hdot qd + qd' g``."""
    qd = np.asarray(qd, dtype=float)
    qdd = np.asarray(qdd, dtype=float)
    Hdot = np.einsum("ijk,k->ij", terms.dH_dq, qd)
    return float(qd @ terms.H @ qdd + 0.5 * qd @ Hdot @ qd + qd @ terms.g)
