"""Training objective, exact weight gradients and the mini-batch optimizer.

The objective combines inverse/forward dynamics regression with three
physics penalties evaluated on measured data: energy conservation (power
input vs. model energy rate), temporal coherence of the two energy heads
(first-order bootstrapped targets, gradients blocked through the targets)
and an energy clamp at one anchor configuration that fixes the additive
gauge of the potential.

The gradient of all of this with respect to the network weights runs
through the input-Jacobians of the heads (mixed second derivatives), which
is the numerically delicate part; ``loss_and_grads`` implements the fused
reverse pass by hand on top of ``model._net_backward`` and is validated
against central finite differences by ``gradient_check``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .model import LagrangianModel
from .terms import cholesky_solve
from .trajectory import Trajectory


@dataclass
class LossWeights:
    """Non-negative weights of the objective components plus L2 coefficient."""

    w_inv: float = 1.0
    w_fwd: float = 1.0
    w_econ: float = 0.1
    w_coh_T: float = 0.1
    w_coh_V: float = 0.1
    w_clamp: float = 1.0
    l2: float = 1e-5

    def __post_init__(self):
        vals = (self.w_inv, self.w_fwd, self.w_econ, self.w_coh_T,
                self.w_coh_V, self.w_clamp, self.l2)
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 2000
    lr: float = 1e-3
    seed: int = 0
    clamp_q: np.ndarray = field(default_factory=lambda: np.zeros(2))
    clamp_qd: np.ndarray = field(default_factory=lambda: np.zeros(2))
    coherence_dt: float | None = None   # defaults to the trajectory sample period
    subsample: int = 1                  # stride over the recorded stream
    val_fraction: float = 0.1
    patience: int = 60                  # epochs without validation improvement
    hidden: int = 64
    diag_init: tuple[float, float] = (0.1, 0.1)
    friction_init: float | np.ndarray = 1e-2
    head_scale: float = 0.05
    eps: float = 1e-4


@dataclass
class TrainBatch:
    """Column arrays of training samples plus the successor state of each."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    q_next: np.ndarray
    qd_next: np.ndarray
    pair_ok: np.ndarray
    dt: float

    def __len__(self):
        return self.q.shape[0]

    def select(self, idx) -> "TrainBatch":
        return TrainBatch(self.q[idx], self.qd[idx], self.qdd[idx], self.tau[idx],
                          self.q_next[idx], self.qd_next[idx], self.pair_ok[idx],
                          self.dt)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)        # dict per epoch
    best_epoch: int = -1
    best_val: float = np.inf
    grad_check_rel_err: float = np.nan
    stopped_reason: str = ""

    def to_csv(self, path) -> None:
        cols = ["epoch", "inv", "fwd", "econ", "coh_T", "coh_V", "clamp", "reg",
                "total", "val_loss", "val_nmse_inv", "val_nmse_fwd"]
        lines = [",".join(cols)]
        for row in self.epochs:
            lines.append(",".join(repr(float(row[c])) if c != "epoch" else str(row[c])
                                  for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val": self.best_val,
                "grad_check_rel_err": self.grad_check_rel_err,
                "epochs_run": len(self.epochs), "stopped_reason": self.stopped_reason}


def build_training_arrays(trajs: list[Trajectory], subsample: int = 1) -> TrainBatch:
    """Flatten trajectories into sample/successor arrays for the optimizer.

    Pairs never cross a segment boundary, and pairs whose pendulum angle
    jumps across the wrap seam are flagged invalid for the coherence term
    (the Taylor target is meaningless across the seam).
    """
    cols = {k: [] for k in ("q", "qd", "qdd", "tau", "q_next", "qd_next", "pair_ok")}
    dt = trajs[0].dt
    for tr in trajs:
        if tr.qdd is None:
            raise ValueError("training requires accelerations; run the pipeline first")
        if tr.dt != dt:
            raise ValueError("all training trajectories must share one sample period")
        for lo, hi in tr.segment_bounds():
            idx = np.arange(lo, hi - 1, subsample)
            cols["q"].append(tr.q[idx])
            cols["qd"].append(tr.qd[idx])
            cols["qdd"].append(tr.qdd[idx])
            cols["tau"].append(tr.tau[idx])
            cols["q_next"].append(tr.q[idx + 1])
            cols["qd_next"].append(tr.qd[idx + 1])
            dpend = np.abs(np.pi - np.mod(np.pi - (tr.q[idx + 1, -1] - tr.q[idx, -1]), 2 * np.pi))
            cols["pair_ok"].append(dpend < 1.0)
    arrays = {k: np.concatenate(v) for k, v in cols.items()}
    return TrainBatch(dt=dt, **arrays)


def coherence_targets(model: LagrangianModel, batch: TrainBatch,
                      dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Bootstrapped first-order targets for the two energy heads.

    ``T_target = T(t) + (qd' H qdd + 0.5 qd' Hdot qd) dt`` and
    ``V_target = V(t) + qd' dV/dq dt``, built from the current parameters at
    the earlier sample.  Callers treat these as constants: no gradient is
    ever propagated through them.
    """
    t = mdl.batch_terms(model, batch.q, batch.qd)
    tdot = (np.einsum("bi,bij,bj->b", batch.qd, t["H"], batch.qdd)
            + 0.5 * np.einsum("bi,bij,bj->b", batch.qd, t["Hdot"], batch.qd))
    vdot = np.einsum("bi,bi->b", batch.qd, t["g"])
    return t["T"] + tdot * dt, t["V"] + vdot * dt


def _raw_components(model: LagrangianModel, batch: TrainBatch, cfg: TrainConfig,
                    frozen_targets=None) -> tuple[dict, dict]:
    """Forward pass of every unweighted loss component; returns (components, state)."""
    B = len(batch)
    cache = mdl._net_forward(model, batch.q)
    quant = mdl._assemble_quantities(cache, batch.qd)
    tau_f = mdl.friction_torque(model.friction, batch.qd)
    H, c, g = quant["H"], quant["c"], quant["g"]

    tau_hat = np.einsum("bij,bj->bi", H, batch.qdd) + c + g - tau_f
    rhs = batch.tau + tau_f - c - g
    qdd_hat = cholesky_solve(H, rhs)
    edot = (np.einsum("bi,bij,bj->b", batch.qd, H, batch.qdd)
            + 0.5 * np.einsum("bi,bij,bj->b", batch.qd, quant["Hdot"], batch.qd)
            + np.einsum("bi,bi->b", batch.qd, g))
    power_in = np.einsum("bi,bi->b", batch.qd, batch.tau + tau_f)

    dt = cfg.coherence_dt if cfg.coherence_dt is not None else batch.dt
    if frozen_targets is None:
        # Same math as coherence_targets, reusing the forward pass above.
        tdot = (np.einsum("bi,bij,bj->b", batch.qd, H, batch.qdd)
                + 0.5 * np.einsum("bi,bij,bj->b", batch.qd, quant["Hdot"], batch.qd))
        vdot = np.einsum("bi,bi->b", batch.qd, g)
        frozen_targets = (quant["T"] + tdot * dt, quant["V"] + vdot * dt)
    target_T, target_V = frozen_targets
    cache_next = mdl._net_forward(model, batch.q_next)
    T_next = 0.5 * np.einsum("bi,bij,bj->b", batch.qd_next, cache_next["H"], batch.qd_next)
    V_next = cache_next["V"]
    mask = batch.pair_ok.astype(float)
    cnt = max(mask.sum(), 1.0)
    rT = (T_next - target_T) * mask
    rV = (V_next - target_V) * mask

    cache_cl = mdl._net_forward(model, np.asarray(cfg.clamp_q, dtype=float)[None])
    qd_cl = np.asarray(cfg.clamp_qd, dtype=float)
    r_cl = float(0.5 * qd_cl @ cache_cl["H"][0] @ qd_cl + cache_cl["V"][0])

    omega = sum(float(np.sum(model.weights[k] ** 2)) for k in mdl.REGULARIZED_KEYS)
    comps = {
        "inv": float(np.sum((tau_hat - batch.tau) ** 2) / B),
        "fwd": float(np.sum((qdd_hat - batch.qdd) ** 2) / B),
        "econ": float(np.sum((power_in - edot) ** 2) / B),
        "coh_T": float(np.sum(rT**2) / cnt),
        "coh_V": float(np.sum(rV**2) / cnt),
        "clamp": r_cl**2,
        "omega": omega,
    }
    state = {"cache": cache, "quant": quant, "tau_f": tau_f, "tau_hat": tau_hat,
             "qdd_hat": qdd_hat, "edot": edot, "power_in": power_in,
             "cache_next": cache_next, "rT": rT, "rV": rV, "cnt": cnt,
             "cache_cl": cache_cl, "qd_cl": qd_cl, "r_cl": r_cl, "mask": mask}
    return comps, state


def _weighted(comps: dict, w: LossWeights) -> dict:
    out = {
        "inv": w.w_inv * comps["inv"],
        "fwd": w.w_fwd * comps["fwd"],
        "econ": w.w_econ * comps["econ"],
        "coh_T": w.w_coh_T * comps["coh_T"],
        "coh_V": w.w_coh_V * comps["coh_V"],
        "clamp": w.w_clamp * comps["clamp"],
        "reg": w.l2 * comps["omega"],
    }
    out["total"] = sum(out.values())
    return out


def inverse_forward_loss(model, batch: TrainBatch, weights: LossWeights) -> float:
    """Weighted inverse + forward regression error, mean over the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    comps, _ = _raw_components(model, batch, TrainConfig())
    return weights.w_inv * comps["inv"] + weights.w_fwd * comps["fwd"]


def energy_conservation_loss(model, batch: TrainBatch) -> float:
    """Mean squared residual between mechanical power input and model energy rate."""
    comps, _ = _raw_components(model, batch, TrainConfig())
    return comps["econ"]


def coherence_loss(model, batch: TrainBatch, dt: float) -> float:
    """Energy-coherence penalty against bootstrapped (gradient-blocked) targets."""
    comps, _ = _raw_components(model, batch, TrainConfig(coherence_dt=dt))
    return comps["coh_T"] + comps["coh_V"]


def clamp_loss(model, anchor_q, anchor_qd=None) -> float:
    """Squared deviation of the total energy at the anchor configuration from zero."""
    anchor_q = np.asarray(anchor_q, dtype=float)
    anchor_qd = np.zeros_like(anchor_q) if anchor_qd is None else np.asarray(anchor_qd, float)
    t = model.terms(anchor_q, anchor_qd)
    return float((t.T + t.V) ** 2)


def total_loss(model, batch: TrainBatch, weights: LossWeights,
               cfg: TrainConfig) -> tuple[float, dict]:
    comps, _ = _raw_components(model, batch, cfg)
    wcomp = _weighted(comps, weights)
    return wcomp["total"], wcomp


def loss_and_grads(model: LagrangianModel, batch: TrainBatch, weights: LossWeights,
                   cfg: TrainConfig, frozen_targets=None,
                   detach_coherence_eval: bool = False) -> tuple[dict, dict]:
    """Weighted loss components and exact gradients for all parameters.

    ``detach_coherence_eval`` zeroes the only gradient path of the coherence
    term (a probe used by tests to demonstrate that no gradient flows through
    the bootstrapped targets).
    """
    comps, st = _raw_components(model, batch, cfg, frozen_targets)
    wcomp = _weighted(comps, weights)
    B = len(batch)
    qd, qdd = batch.qd, batch.qdd
    quant = st["quant"]
    H = quant["H"]

    tau_hat_bar = (2.0 * weights.w_inv / B) * (st["tau_hat"] - batch.tau)
    qdd_hat_bar = (2.0 * weights.w_fwd / B) * (st["qdd_hat"] - qdd)
    pin_bar = (2.0 * weights.w_econ / B) * (st["power_in"] - st["edot"])
    edot_bar = -pin_bar

    # tau_hat = H qdd + c + g - tau_f
    H_bar = np.einsum("bi,bj->bij", tau_hat_bar, qdd)
    c_bar = tau_hat_bar.copy()
    g_bar = tau_hat_bar.copy()
    tauf_bar = -tau_hat_bar
    # qdd_hat = H^{-1} (tau + tau_f - c - g)
    u = cholesky_solve(H, qdd_hat_bar)
    H_bar -= np.einsum("bi,bj->bij", u, st["qdd_hat"])
    tauf_bar += u
    c_bar -= u
    g_bar -= u
    # edot = qd' H qdd + 0.5 qd' Hdot qd + qd' g ; power_in = qd'(tau + tau_f)
    H_bar += np.einsum("b,bi,bj->bij", edot_bar, qd, qdd)
    Hdot_bar = 0.5 * np.einsum("b,bi,bj->bij", edot_bar, qd, qd)
    g_bar += edot_bar[:, None] * qd
    tauf_bar += pin_bar[:, None] * qd
    # c_k = (Hdot qd)_k - 0.5 qd' dH_k qd
    Hdot_bar += np.einsum("bk,bj->bkj", c_bar, qd)
    dH_bar = -0.5 * np.einsum("bk,bi,bj->bijk", c_bar, qd, qd)
    # Hdot_ij = sum_k dH_ijk qd_k
    dH_bar += np.einsum("bij,bk->bijk", Hdot_bar, qd)

    grads = mdl._net_backward(model, st["cache"], H_bar=H_bar, dH_bar=dH_bar,
                              GV_bar=g_bar, V_bar=None)
    grads["friction_raw"] = mdl._friction_backward(model, qd, tauf_bar)

    if not detach_coherence_eval and (weights.w_coh_T > 0 or weights.w_coh_V > 0):
        Tn_bar = (2.0 * weights.w_coh_T / st["cnt"]) * st["rT"]
        Vn_bar = (2.0 * weights.w_coh_V / st["cnt"]) * st["rV"]
        Hn_bar = 0.5 * np.einsum("b,bi,bj->bij", Tn_bar, batch.qd_next, batch.qd_next)
        g2 = mdl._net_backward(model, st["cache_next"], H_bar=Hn_bar, V_bar=Vn_bar)
        for k in g2:
            grads[k] += g2[k]

    if weights.w_clamp > 0:
        qd_cl = st["qd_cl"]
        Vc_bar = np.array([2.0 * weights.w_clamp * st["r_cl"]])
        Hc_bar = (weights.w_clamp * st["r_cl"] * np.outer(qd_cl, qd_cl))[None]
        g3 = mdl._net_backward(model, st["cache_cl"], H_bar=Hc_bar, V_bar=Vc_bar)
        for k in g3:
            grads[k] += g3[k]

    for k in mdl.REGULARIZED_KEYS:
        grads[k] += 2.0 * weights.l2 * model.weights[k]
    return wcomp, grads


PARAM_KEYS = mdl.WEIGHT_KEYS + ("friction_raw",)


def _param_arrays(model: LagrangianModel) -> dict:
    arrays = dict(model.weights)
    arrays["friction_raw"] = model.friction_raw
    return arrays


def flatten_params(model: LagrangianModel) -> np.ndarray:
    arrays = _param_arrays(model)
    return np.concatenate([arrays[k].ravel() for k in PARAM_KEYS])


def set_flat_params(model: LagrangianModel, flat: np.ndarray) -> None:
    arrays = _param_arrays(model)
    off = 0
    for k in PARAM_KEYS:
        a = arrays[k]
        a[...] = flat[off:off + a.size].reshape(a.shape)
        off += a.size


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k]).ravel() for k in PARAM_KEYS])


def gradient_check(model: LagrangianModel, batch: TrainBatch, weights: LossWeights,
                   cfg: TrainConfig, coords=None, h: float = 1e-6,
                   seed: int = 0) -> dict:
    """Compare the fused analytic gradient with central finite differences.

    The coherence targets are frozen at the base parameters (they are
    constants of the optimized objective), so the finite-difference oracle
    measures the same function the analytic gradient differentiates.
    """
    dt = cfg.coherence_dt if cfg.coherence_dt is not None else batch.dt
    frozen = coherence_targets(model, batch, dt)
    _, grads = loss_and_grads(model, batch, weights, cfg, frozen_targets=frozen)
    g_an = flatten_grads(grads)
    base = flatten_params(model)
    if coords is None:
        coords = np.arange(base.size)
    else:
        rng = np.random.default_rng(seed)
        coords = rng.choice(base.size, size=min(coords, base.size), replace=False)
    work = model.copy()

    def loss_at(flat):
        set_flat_params(work, flat)
        comps, _ = _raw_components(work, batch, cfg, frozen_targets=frozen)
        return _weighted(comps, weights)["total"]

    g_fd = np.zeros(coords.size)
    for j, i in enumerate(coords):
        pert = base.copy()
        pert[i] = base[i] + h
        up = loss_at(pert)
        pert[i] = base[i] - h
        down = loss_at(pert)
        g_fd[j] = (up - down) / (2.0 * h)
    g_sel = g_an[coords]
    diff = np.abs(g_sel - g_fd)
    floor = 1e-6 * max(np.abs(g_fd).max(), 1.0)
    per_coord = diff / np.maximum(np.maximum(np.abs(g_sel), np.abs(g_fd)), floor)
    return {
        "max_rel_err": float(per_coord.max()),
        "l2_rel_err": float(np.linalg.norm(g_sel - g_fd) / max(np.linalg.norm(g_fd), 1e-300)),
        "n_coords": int(coords.size),
    }


class Adam:
    """Standard Adam over the parameter dict; deterministic given the call order."""

    def __init__(self, model: LagrangianModel, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        arrays = _param_arrays(model)
        self.m = {k: np.zeros_like(arrays[k]) for k in PARAM_KEYS}
        self.v = {k: np.zeros_like(arrays[k]) for k in PARAM_KEYS}

    def update(self, model: LagrangianModel, grads: dict) -> None:
        self.t += 1
        bias1 = 1.0 - self.b1**self.t
        bias2 = 1.0 - self.b2**self.t
        arrays = _param_arrays(model)
        for k in PARAM_KEYS:
            g = np.asarray(grads[k])
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)
            arrays[k][...] -= step


def _validation_metrics(model, val: TrainBatch, weights, cfg) -> dict:
    comps, st = _raw_components(model, val, cfg)
    wcomp = _weighted(comps, weights)
    delta = 1e-8
    nmse_inv = np.sum((st["tau_hat"] - val.tau) ** 2, axis=0) / np.sum((val.tau + delta) ** 2, axis=0)
    nmse_fwd = np.sum((st["qdd_hat"] - val.qdd) ** 2, axis=0) / np.sum((val.qdd + delta) ** 2, axis=0)
    return {"val_loss": wcomp["total"] - wcomp["reg"],
            "val_nmse_inv": float(nmse_inv.mean()),
            "val_nmse_fwd": float(nmse_fwd.mean())}


def train(trajs: list[Trajectory], cfg: TrainConfig, weights: LossWeights,
          model0: LagrangianModel | None = None) -> tuple[LagrangianModel, TrainReport]:
    """Mini-batch Adam over the dataset; returns the best-on-validation snapshot.

    Deterministic for a fixed config and seed.  A non-finite loss aborts the
    run and returns the last finite snapshot.
    """
    data = build_training_arrays(trajs, subsample=cfg.subsample)
    n_val = max(1, int(round(cfg.val_fraction * len(data))))
    train_idx = np.arange(0, len(data) - n_val)
    val = data.select(np.arange(len(data) - n_val, len(data)))
    if train_idx.size == 0:
        raise ValueError("dataset too small for the requested validation fraction")

    model = model0.copy() if model0 is not None else mdl.init_model(
        n_dof=data.q.shape[1], hidden=cfg.hidden, seed=cfg.seed,
        diag_init=cfg.diag_init, friction_init=cfg.friction_init,
        head_scale=cfg.head_scale, eps=cfg.eps)
    report = TrainReport()
    check = gradient_check(model, data.select(train_idx[:16]), weights, cfg,
                           coords=48, h=1e-6, seed=cfg.seed)
    report.grad_check_rel_err = check["max_rel_err"]

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, lr=cfg.lr)
    best = model.copy()
    since_best = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        sums = {k: 0.0 for k in ("inv", "fwd", "econ", "coh_T", "coh_V",
                                 "clamp", "reg", "total")}
        n_batches = 0
        diverged = False
        for lo in range(0, order.size, cfg.batch_size):
            batch = data.select(order[lo:lo + cfg.batch_size])
            wcomp, grads = loss_and_grads(model, batch, weights, cfg)
            if not np.isfinite(wcomp["total"]):
                diverged = True
                break
            opt.update(model, grads)
            for k in sums:
                sums[k] += wcomp[k]
            n_batches += 1
        if diverged:
            report.stopped_reason = f"non-finite loss at epoch {epoch}"
            break
        row = {k: v / max(n_batches, 1) for k, v in sums.items()}
        row["epoch"] = epoch
        row.update(_validation_metrics(model, val, weights, cfg))
        report.epochs.append(row)
        if row["val_loss"] < report.best_val:
            report.best_val = row["val_loss"]
            report.best_epoch = epoch
            best = model.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                report.stopped_reason = f"early stop at epoch {epoch}"
                break
    if not report.stopped_reason:
        report.stopped_reason = "epoch budget exhausted"
    return best, report


def save_report(report: TrainReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    report.to_csv(out_dir / "train_report.csv")
    (out_dir / "train_summary.json").write_text(
        json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
