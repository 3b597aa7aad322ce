"""Structured Lagrangian network with exact, hand-propagated derivatives.

A small softplus network (shared trunk, two heads) maps the joint
configuration to (a) the lower-triangular factor of the mass matrix and
(b) the scalar potential energy.  The mass matrix is assembled as
``H = Lhat Lhat' + eps I`` which keeps it symmetric positive definite with
eigenvalues bounded below by ``eps``.  Learnable Stribeck/viscous friction
coefficients complete the model.

Because the controller evaluates the model inside a 500 Hz loop and the
trainer needs derivatives of the input-Jacobians with respect to the
weights, nothing here relies on an autodiff framework: input-Jacobians are
propagated forward through the layers (the input is only n-dimensional, so
forward accumulation is exact and cheap) and the training module implements
the matching reverse pass by hand.  ``_net_forward`` caches every
intermediate needed by ``_net_backward``.

Diagonal factor entries pass through a shifted softplus
``f(x) = softplus(x + DIAG_SHIFT)``: strictly positive, and the shift is
chosen far enough left that zero head weights give ``f(0) ~ 2e-9``, i.e.
``H = eps I`` to machine accuracy, which makes the degenerate-parameter
behaviour easy to reason about.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .terms import LagrangianTerms, cholesky_solve, require_finite

DIAG_SHIFT = -20.0
ANGLE_CONVENTION = "pendulum angle 0 at hanging, pi at upright; V(hanging rest) = 0"

# Friction coefficient columns: static level, Stribeck level, Stribeck
# width (rad^2/s^2) and viscous coefficient; one row per joint.
F_STATIC, F_STRIBECK, F_WIDTH, F_VISCOUS = 0, 1, 2, 3

WEIGHT_KEYS = ("W1", "b1", "W2", "b2", "WL", "bL", "wV", "bV")
REGULARIZED_KEYS = ("W1", "W2", "WL", "wV")


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def softplus_inv(y):
    """Raw value whose softplus equals ``y`` (y > 0)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus_inv needs strictly positive targets")
    return y + np.log(-np.expm1(-y))


@dataclass
class LagrangianModel:
    """Immutable-by-convention parameter set of the learned model.

    ``weights`` holds the trunk and head parameters, ``friction_raw`` the
    pre-softplus friction coefficients (one row per joint).  Training never
    mutates a model in place; it produces successive copies, so a frozen
    snapshot can be evaluated concurrently from the control loop.
    """

    weights: dict[str, np.ndarray]
    friction_raw: np.ndarray
    eps: float = 1e-4
    wrap_mask: np.ndarray = field(default_factory=lambda: np.array([False, True]))

    @property
    def n_dof(self) -> int:
        return self.weights["W1"].shape[1]

    @property
    def friction(self) -> np.ndarray:
        """Effective (non-negative) friction coefficients, (n, 4)."""
        return softplus(self.friction_raw)

    def copy(self) -> "LagrangianModel":
        return LagrangianModel(
            weights={k: v.copy() for k, v in self.weights.items()},
            friction_raw=self.friction_raw.copy(),
            eps=self.eps, wrap_mask=self.wrap_mask.copy())

    def terms(self, q, qd) -> LagrangianTerms:
        return eval_terms(self, q, qd)


def init_model(n_dof: int = 2, hidden: int = 64, seed: int = 0,
               diag_init=(0.1, 0.1), friction_init: float | np.ndarray = 1e-2,
               head_scale: float = 0.05, eps: float = 1e-4,
               wrap_mask=None) -> LagrangianModel:
    """Fresh model with benign initialization.

    ``diag_init`` sets the initial diagonal of the triangular factor per
    joint (a coarse magnitude estimate of sqrt(H_ii) keeps early forward
    dynamics sane); ``friction_init`` sets the starting effective friction
    coefficients.
    """
    rng = np.random.default_rng(seed)
    m = n_dof * (n_dof + 1) // 2
    rows, cols = np.tril_indices(n_dof)
    w = {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(n_dof), size=(hidden, n_dof)),
        "b1": rng.normal(0.0, 0.2, size=hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
        "b2": np.zeros(hidden),
        "WL": rng.normal(0.0, head_scale / np.sqrt(hidden), size=(m, hidden)),
        "bL": np.zeros(m),
        "wV": rng.normal(0.0, head_scale / np.sqrt(hidden), size=hidden),
        "bV": np.zeros(()),
    }
    diag_init = np.broadcast_to(np.asarray(diag_init, dtype=float), (n_dof,))
    w["bL"][rows == cols] = softplus_inv(diag_init) - DIAG_SHIFT
    friction_init = np.broadcast_to(np.asarray(friction_init, dtype=float), (n_dof, 4)).copy()
    if wrap_mask is None:
        wrap_mask = np.arange(n_dof) == n_dof - 1
    return LagrangianModel(weights=w, friction_raw=softplus_inv(friction_init),
                           eps=eps, wrap_mask=np.asarray(wrap_mask, dtype=bool))


def wrap_inputs(model: LagrangianModel, Q: np.ndarray) -> np.ndarray:
    """Map periodic joints into (-pi, pi]; the network only ever sees this range."""
    Q = np.array(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[None]
    wrapped = np.pi - np.mod(np.pi - Q[:, model.wrap_mask], 2.0 * np.pi)
    Q[:, model.wrap_mask] = wrapped
    return Q


_TRIL_CACHE: dict[int, tuple] = {}


def _tril(n: int) -> tuple:
    if n not in _TRIL_CACHE:
        rows, cols = np.tril_indices(n)
        _TRIL_CACHE[n] = (rows, cols, rows == cols)
    return _TRIL_CACHE[n]


def _net_forward(model: LagrangianModel, Q_raw: np.ndarray) -> dict:
    """Batched forward pass with input-Jacobians of every head output.

    Returns a cache of all intermediates; shapes are (B, ...) with the final
    axis of every Jacobian indexing the input coordinate.
    """
    w = model.weights
    n = model.n_dof
    Q = wrap_inputs(model, Q_raw)
    Z1 = Q @ w["W1"].T + w["b1"]
    S1 = sigmoid(Z1)
    A1 = softplus(Z1)
    J1 = S1[:, :, None] * w["W1"][None, :, :]
    Z2 = A1 @ w["W2"].T + w["b2"]
    S2 = sigmoid(Z2)
    A2 = softplus(Z2)
    JZ2 = np.matmul(w["W2"], J1)
    J2 = S2[:, :, None] * JZ2
    LR = A2 @ w["WL"].T + w["bL"]
    JLR = np.matmul(w["WL"], J2)
    V = A2 @ w["wV"] + w["bV"]
    GV = np.matmul(w["wV"], J2)

    rows, cols, diag = _tril(n)
    B = Q.shape[0]
    fp = sigmoid(LR[:, diag] + DIAG_SHIFT)
    Lhat = np.zeros((B, n, n))
    Lhat[:, rows[diag], cols[diag]] = softplus(LR[:, diag] + DIAG_SHIFT)
    Lhat[:, rows[~diag], cols[~diag]] = LR[:, ~diag]
    JL = np.zeros((B, n, n, n))
    JL[:, rows[diag], cols[diag], :] = fp[:, :, None] * JLR[:, diag, :]
    JL[:, rows[~diag], cols[~diag], :] = JLR[:, ~diag, :]
    H = Lhat @ Lhat.swapaxes(1, 2) + model.eps * np.eye(n)
    dH = np.einsum("bick,bjc->bijk", JL, Lhat) + np.einsum("bic,bjck->bijk", Lhat, JL)
    return {"Q": Q, "Z1": Z1, "S1": S1, "A1": A1, "J1": J1, "S2": S2, "A2": A2,
            "JZ2": JZ2, "J2": J2, "LR": LR, "JLR": JLR, "V": V, "GV": GV,
            "fp": fp, "Lhat": Lhat, "JL": JL, "H": H, "dH": dH,
            "rows": rows, "cols": cols, "diag": diag}


def _net_backward(model: LagrangianModel, cache: dict,
                  H_bar=None, dH_bar=None, GV_bar=None, V_bar=None) -> dict:
    """Reverse pass: adjoints of (H, dH/dq, dV/dq, V) down to the weights.

    This is the mirror image of ``_net_forward`` including the derivative
    paths through the input-Jacobians, i.e. the mixed second derivatives
    that make the training objective expensive to differentiate naively.
    """
    w = model.weights
    B, n = cache["Q"].shape
    rows, cols, diag = cache["rows"], cache["cols"], cache["diag"]
    Lhat, JL, JLR, LR, fp = cache["Lhat"], cache["JL"], cache["JLR"], cache["LR"], cache["fp"]
    m = rows.size

    Lhat_bar = np.zeros_like(Lhat)
    JL_bar = np.zeros_like(JL)
    if H_bar is not None:
        Hb_sym = H_bar + H_bar.swapaxes(1, 2)
        Lhat_bar += np.einsum("bij,bjc->bic", Hb_sym, Lhat)
    if dH_bar is not None:
        dHb_sym = dH_bar + dH_bar.swapaxes(1, 2)
        JL_bar += np.einsum("bijk,bjc->bick", dHb_sym, Lhat)
        Lhat_bar += np.einsum("bpjk,bjck->bpc", dHb_sym, JL)

    LR_bar = np.zeros((B, m))
    JLR_bar = np.zeros((B, m, n))
    fpp = fp * (1.0 - fp)
    LR_bar[:, diag] = Lhat_bar[:, rows[diag], cols[diag]] * fp
    LR_bar[:, ~diag] = Lhat_bar[:, rows[~diag], cols[~diag]]
    JL_diag_bar = JL_bar[:, rows[diag], cols[diag], :]
    JLR_bar[:, diag, :] = fp[:, :, None] * JL_diag_bar
    LR_bar[:, diag] += np.einsum("bmk,bmk->bm", JL_diag_bar, JLR[:, diag, :]) * fpp
    JLR_bar[:, ~diag, :] = JL_bar[:, rows[~diag], cols[~diag], :]

    A2, J2, S2, JZ2 = cache["A2"], cache["J2"], cache["S2"], cache["JZ2"]
    A1, J1, S1, Q = cache["A1"], cache["J1"], cache["S1"], cache["Q"]

    def _pair_gemm(A, B_):  # sum_bk A[b,o,k] B_[b,i,k] -> (o, i)
        return np.tensordot(A, B_, axes=([0, 2], [0, 2]))

    grads = {k: np.zeros_like(w[k]) for k in WEIGHT_KEYS}
    grads["WL"] += LR_bar.T @ A2
    grads["bL"] += LR_bar.sum(axis=0)
    A2_bar = LR_bar @ w["WL"]
    grads["WL"] += _pair_gemm(JLR_bar, J2)
    J2_bar = np.matmul(w["WL"].T, JLR_bar)
    if V_bar is not None:
        grads["wV"] += V_bar @ A2
        grads["bV"] += V_bar.sum()
        A2_bar += V_bar[:, None] * w["wV"]
    if GV_bar is not None:
        grads["wV"] += (J2 * GV_bar[:, None, :]).sum(axis=(0, 2))
        J2_bar += w["wV"][None, :, None] * GV_bar[:, None, :]

    S2_bar = (J2_bar * JZ2).sum(axis=-1)
    JZ2_bar = S2[:, :, None] * J2_bar
    Z2_bar = A2_bar * S2 + S2_bar * S2 * (1.0 - S2)
    grads["W2"] += _pair_gemm(JZ2_bar, J1)
    J1_bar = np.matmul(w["W2"].T, JZ2_bar)
    grads["W2"] += Z2_bar.T @ A1
    grads["b2"] += Z2_bar.sum(axis=0)
    A1_bar = Z2_bar @ w["W2"]

    S1_bar = (J1_bar * w["W1"]).sum(axis=-1)
    grads["W1"] += (S1[:, :, None] * J1_bar).sum(axis=0)
    Z1_bar = A1_bar * S1 + S1_bar * S1 * (1.0 - S1)
    grads["W1"] += Z1_bar.T @ Q
    grads["b1"] += Z1_bar.sum(axis=0)
    return grads


def friction_torque(phi: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Stribeck + viscous friction torque, sign(0) := 0.

    ``phi`` is (n, 4): static level, Stribeck level, Stribeck width, viscous
    coefficient per joint.  Works on (n,) or batched (B, n) velocities.
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(phi[:, F_WIDTH] <= 0):
        raise ValueError("Stribeck width must be strictly positive")
    qd = np.asarray(qd, dtype=float)
    sgn = np.sign(qd)
    decay = np.exp(-qd**2 / phi[:, F_WIDTH])
    return -(phi[:, F_STATIC] + phi[:, F_STRIBECK] * decay) * sgn - phi[:, F_VISCOUS] * qd


def _friction_backward(model: LagrangianModel, Qd: np.ndarray,
                       tauf_bar: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the raw friction parameters."""
    phi = model.friction
    sgn = np.sign(Qd)
    decay = np.exp(-Qd**2 / phi[:, F_WIDTH])
    d_phi = np.zeros_like(phi)
    d_phi[:, F_STATIC] = np.einsum("bi,bi->i", tauf_bar, -sgn)
    d_phi[:, F_STRIBECK] = np.einsum("bi,bi->i", tauf_bar, -decay * sgn)
    d_phi[:, F_WIDTH] = np.einsum(
        "bi,bi->i", tauf_bar,
        -phi[:, F_STRIBECK] * decay * (Qd**2 / phi[:, F_WIDTH] ** 2) * sgn)
    d_phi[:, F_VISCOUS] = np.einsum("bi,bi->i", tauf_bar, -Qd)
    return d_phi * sigmoid(model.friction_raw)


def _assemble_quantities(cache: dict, Qd: np.ndarray) -> dict:
    """Velocity-dependent Euler-Lagrange quantities from a forward cache."""
    H, dH, GV, V = cache["H"], cache["dH"], cache["GV"], cache["V"]
    Hdot = np.einsum("bijk,bk->bij", dH, Qd)
    qdHqd = np.einsum("bi,bijk,bj->bk", Qd, dH, Qd)
    c = np.einsum("bij,bj->bi", Hdot, Qd) - 0.5 * qdHqd
    T = 0.5 * np.einsum("bi,bij,bj->b", Qd, H, Qd)
    return {"H": H, "dH": dH, "Hdot": Hdot, "c": c, "g": GV, "T": T, "V": V}


def batch_terms(model: LagrangianModel, Q: np.ndarray, Qd: np.ndarray) -> dict:
    """Forward-only batched evaluation of every Euler-Lagrange quantity."""
    cache = _net_forward(model, Q)
    quant = _assemble_quantities(cache, Qd)
    quant["tau_f"] = friction_torque(model.friction, Qd)
    return quant


def batch_dynamics(model: LagrangianModel, Q, Qd, Qdd, Tau,
                   chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Predicted (motor torque, acceleration) over a whole dataset, chunked."""
    outs_tau, outs_qdd = [], []
    for lo in range(0, Q.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        t = batch_terms(model, Q[sl], Qd[sl])
        rhs = t["c"] + t["g"] - t["tau_f"]
        outs_tau.append(np.einsum("bij,bj->bi", t["H"], Qdd[sl]) + rhs)
        outs_qdd.append(cholesky_solve(t["H"], Tau[sl] - rhs))
    return np.concatenate(outs_tau), np.concatenate(outs_qdd)


def eval_terms(model: LagrangianModel, q, qd) -> LagrangianTerms:
    """All Euler-Lagrange quantities of the learned model at one state."""
    q = require_finite("q", q)
    qd = require_finite("qd", qd)
    t = batch_terms(model, q[None], qd[None])
    return LagrangianTerms(H=t["H"][0], dH_dq=t["dH"][0], c=t["c"][0],
                           g=t["g"][0], tau_f=t["tau_f"][0],
                           T=float(t["T"][0]), V=float(t["V"][0]))


def inverse_dynamics(model: LagrangianModel, q, qd, qdd) -> np.ndarray:
    """Motor torque explaining (q, qd, qdd): ``H qdd + c + g - tau_f``."""
    qdd = require_finite("qdd", qdd)
    t = eval_terms(model, q, qd)
    return t.H @ qdd + t.c + t.g - t.tau_f


def forward_dynamics(model: LagrangianModel, q, qd, tau) -> np.ndarray:
    """Acceleration under motor torque tau, solved via the Cholesky factor of H."""
    tau = require_finite("tau", tau)
    t = eval_terms(model, q, qd)
    return cholesky_solve(t.H, tau + t.tau_f - t.c - t.g)


def energy_rate(model: LagrangianModel, q, qd, qdd, tau_m) -> tuple[float, float]:
    """Model energy rate and mechanical power input.

    Returns ``(Edot_model, power_in)`` where the first is
    ``qd' H qdd + 0.5 qd' Hdot qd + qd' dV/dq`` and the second
    ``qd' (tau_m + tau_f)``.  The two agree exactly when ``qdd`` comes from
    the model's own forward dynamics; on measured data their difference is
    the energy-conservation residual the trainer penalizes.
    """
    qd = require_finite("qd", qd)
    t = eval_terms(model, q, qd)
    Hdot = np.einsum("ijk,k->ij", t.dH_dq, qd)
    edot = float(qd @ t.H @ np.asarray(qdd, dtype=float) + 0.5 * qd @ Hdot @ qd + qd @ t.g)
    power_in = float(qd @ (np.asarray(tau_m, dtype=float) + t.tau_f))
    return edot, power_in


def save_model(model: LagrangianModel, path: str | Path) -> None:
    """Checkpoint to a self-describing npz container; weights round-trip bit-exact."""
    descriptor = {
        "format": "lagswing-model-v1",
        "angle_convention": ANGLE_CONVENTION,
        "eps": model.eps,
        "n_dof": model.n_dof,
        "hidden": int(model.weights["W1"].shape[0]),
        "diag_shift": DIAG_SHIFT,
    }
    arrays = {f"w_{k}": v for k, v in model.weights.items()}
    arrays["friction_raw"] = model.friction_raw
    arrays["wrap_mask"] = model.wrap_mask
    arrays["descriptor"] = np.frombuffer(
        json.dumps(descriptor, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_model(path: str | Path) -> LagrangianModel:
    with np.load(path) as data:
        descriptor = json.loads(bytes(data["descriptor"]).decode())
        if descriptor.get("format") != "lagswing-model-v1":
            raise ValueError(f"not a lagswing model checkpoint: {path}")
        weights = {k: data[f"w_{k}"].copy() for k in WEIGHT_KEYS}
        return LagrangianModel(weights=weights,
                               friction_raw=data["friction_raw"].copy(),
                               eps=float(descriptor["eps"]),
                               wrap_mask=data["wrap_mask"].copy())
