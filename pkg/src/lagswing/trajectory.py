"""Trajectory containers, CSV persistence and the sensor-emulation pipeline."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plants import ACTUATED, N_DOF, JointState
from .terms import require_finite

CSV_HEADER = "t,q0,q1,qd0,qd1,qdd0,qdd1,tau0,tau1"


@dataclass
class Sample:
    """One training tuple: full joint state (with acceleration) plus motor torque."""

    state: JointState
    tau: np.ndarray

    def __post_init__(self):
        if self.state.qdd is None:
            raise ValueError("a Sample requires the acceleration to be filled")
        self.tau = require_finite("tau", self.tau)


@dataclass
class Trajectory:
    """Uniformly sampled (state, torque) recording of one plant.

    The torque column of every passive joint is exactly zero.  ``segments``
    lists the start index of each contiguous rollout segment; finite
    differences and training pairs never cross a segment boundary.
    """

    dt: float
    plant_kind: str
    q: np.ndarray                  # (N, n)
    qd: np.ndarray                 # (N, n)
    tau: np.ndarray                # (N, n)
    qdd: np.ndarray | None = None  # (N, n) once the pipeline has run
    actuated: np.ndarray = field(default_factory=lambda: np.array([True, False]))
    segments: list[int] = field(default_factory=lambda: [0])
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.q = require_finite("q", self.q)
        self.qd = require_finite("qd", self.qd)
        self.tau = require_finite("tau", self.tau)
        if self.qdd is not None:
            self.qdd = require_finite("qdd", self.qdd)
        passive = ~np.asarray(self.actuated)
        if np.any(self.tau[:, passive] != 0.0):
            raise ValueError("passive joint torque channel must be exactly zero")
        if self.segments[0] != 0 or list(self.segments) != sorted(set(self.segments)):
            raise ValueError("segments must be sorted unique indices starting at 0")

    def __len__(self) -> int:
        return self.q.shape[0]

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def sample(self, i: int) -> Sample:
        qdd = None if self.qdd is None else self.qdd[i]
        return Sample(state=JointState(self.q[i], self.qd[i], qdd), tau=self.tau[i])

    def segment_bounds(self) -> list[tuple[int, int]]:
        starts = list(self.segments) + [len(self)]
        return [(starts[k], starts[k + 1]) for k in range(len(self.segments))]


def add_torque_noise(traj: Trajectory, sigma: float, seed: int) -> Trajectory:
    """Add Gaussian noise to the recorded torque of the actuated joints only."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    tau = traj.tau.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        act = np.flatnonzero(traj.actuated)
        tau[:, act] += rng.normal(0.0, sigma, size=(len(traj), act.size))
    meta = dict(traj.meta, noise_sigma=sigma, noise_seed=seed)
    return Trajectory(dt=traj.dt, plant_kind=traj.plant_kind, q=traj.q.copy(),
                      qd=traj.qd.copy(), tau=tau,
                      qdd=None if traj.qdd is None else traj.qdd.copy(),
                      actuated=traj.actuated.copy(), segments=list(traj.segments),
                      meta=meta)


def lowpass_single_pole(x: np.ndarray, cutoff_hz: float, dt: float) -> np.ndarray:
    """Zero-initialized first-order IIR low-pass, pole at exp(-2 pi f_c dt).

    y[k] = a y[k-1] + (1 - a) x[k] with y[-1] = 0.
    """
    a = math.exp(-2.0 * math.pi * cutoff_hz * dt)
    y = np.zeros_like(x)
    prev = np.zeros(x.shape[1:])
    for k in range(x.shape[0]):
        prev = a * prev + (1.0 - a) * x[k]
        y[k] = prev
    return y


def lowpass_gain(cutoff_hz: float, signal_hz: float, dt: float) -> float:
    """Closed-form magnitude response of the single-pole filter at ``signal_hz``."""
    a = math.exp(-2.0 * math.pi * cutoff_hz * dt)
    w = 2.0 * math.pi * signal_hz * dt
    return (1.0 - a) / math.sqrt(1.0 - 2.0 * a * math.cos(w) + a * a)


def finite_difference_accelerations(traj: Trajectory, filter_cutoff: float) -> Trajectory:
    """Fill qdd by central differences of qd, then low-pass filter it.

    Differences are taken per rollout segment (one-sided at segment edges) so
    that resets never leak into the derivative estimate.
    """
    qdd = np.zeros_like(traj.qd)
    for lo, hi in traj.segment_bounds():
        if hi - lo < 3:
            raise ValueError("finite differences need at least 3 samples per segment")
        qd = traj.qd[lo:hi]
        seg = np.empty_like(qd)
        seg[1:-1] = (qd[2:] - qd[:-2]) / (2.0 * traj.dt)
        seg[0] = (qd[1] - qd[0]) / traj.dt
        seg[-1] = (qd[-1] - qd[-2]) / traj.dt
        qdd[lo:hi] = lowpass_single_pole(seg, filter_cutoff, traj.dt)
    meta = dict(traj.meta, filter_cutoff=filter_cutoff)
    return Trajectory(dt=traj.dt, plant_kind=traj.plant_kind, q=traj.q.copy(),
                      qd=traj.qd.copy(), tau=traj.tau.copy(), qdd=qdd,
                      actuated=traj.actuated.copy(), segments=list(traj.segments),
                      meta=meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_csv(traj: Trajectory, path: str | Path, extra_columns: dict | None = None) -> None:
    """Write the trajectory as CSV plus a JSON metadata sidecar.

    Floats are written with ``repr`` so a round trip reproduces them exactly.
    ``extra_columns`` maps column name -> (N,) array appended after the spec
    columns (used for closed-loop logs that carry the controller mode).
    """
    path = Path(path)
    extra = extra_columns or {}
    header = CSV_HEADER + ("," + ",".join(extra) if extra else "")
    lines = [header]
    t = traj.t
    for i in range(len(traj)):
        row = [_fmt(t[i])]
        row += [_fmt(v) for v in traj.q[i]]
        row += [_fmt(v) for v in traj.qd[i]]
        if traj.qdd is None:
            row += [""] * N_DOF
        else:
            row += [_fmt(v) for v in traj.qdd[i]]
        row += [_fmt(v) for v in traj.tau[i]]
        for col in extra.values():
            v = col[i]
            row.append(str(v) if isinstance(v, (str, int)) else _fmt(v))
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "plant_kind": traj.plant_kind,
        "dt": traj.dt,
        "actuated": [bool(a) for a in traj.actuated],
        "segments": list(traj.segments),
    }
    sidecar.update(traj.meta)
    path.with_suffix(".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_csv(path: str | Path) -> Trajectory:
    path = Path(path)
    rows = path.read_text().strip().split("\n")
    names = rows[0].split(",")
    if names[: 1 + 4 * N_DOF] != CSV_HEADER.split(","):
        raise ValueError(f"unexpected trajectory header in {path}")
    data = [r.split(",") for r in rows[1:]]
    n = len(data)
    q = np.empty((n, N_DOF))
    qd = np.empty((n, N_DOF))
    qdd = np.empty((n, N_DOF))
    tau = np.empty((n, N_DOF))
    has_qdd = data[0][5] != ""
    for i, r in enumerate(data):
        q[i] = [float(r[1]), float(r[2])]
        qd[i] = [float(r[3]), float(r[4])]
        if has_qdd:
            qdd[i] = [float(r[5]), float(r[6])]
        tau[i] = [float(r[7]), float(r[8])]
    sidecar_path = path.with_suffix(".meta.json")
    sidecar = json.loads(sidecar_path.read_text())
    meta = {k: v for k, v in sidecar.items()
            if k not in ("plant_kind", "dt", "actuated", "segments")}
    return Trajectory(dt=sidecar["dt"], plant_kind=sidecar["plant_kind"],
                      q=q, qd=qd, tau=tau, qdd=qdd if has_qdd else None,
                      actuated=np.asarray(sidecar["actuated"], dtype=bool),
                      segments=[int(s) for s in sidecar["segments"]], meta=meta)


def concatenate(trajs: list[Trajectory]) -> Trajectory:
    """Join rollout segments into one trajectory with segment markers."""
    first = trajs[0]
    segments, offset = [], 0
    for tr in trajs:
        if tr.dt != first.dt or tr.plant_kind != first.plant_kind:
            raise ValueError("cannot concatenate trajectories with differing dt or plant")
        segments += [s + offset for s in tr.segments]
        offset += len(tr)
    qdd = None
    if all(tr.qdd is not None for tr in trajs):
        qdd = np.concatenate([tr.qdd for tr in trajs])
    return Trajectory(dt=first.dt, plant_kind=first.plant_kind,
                      q=np.concatenate([tr.q for tr in trajs]),
                      qd=np.concatenate([tr.qd for tr in trajs]),
                      tau=np.concatenate([tr.tau for tr in trajs]), qdd=qdd,
                      actuated=first.actuated.copy(), segments=segments,
                      meta=dict(first.meta))
