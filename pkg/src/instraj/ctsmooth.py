"""Iterative coordinated-turn (CT) smoothing of measured instance trajectories.

State per timestep: pose ``T_t`` (world-from-canonical), speed ``v_t`` and
curvature ``kappa_t``; plus one rotation shared by all timesteps that turns
the canonical axes into the motion model's x-forward convention
(``align(T) = T @ (R_shared, 0)``).

Factors, all whitened:

* measurement: ``log(M_t^-1 T_t)``, Huber on the 6-vector norm
* motion: ``log(ct_predict(align(T_t), v_t, kappa_t, dt)^-1 align(T_t+1))``
* random walks on speed and curvature
* roll/pitch of ``align(T_t)``, and a zero-mean curvature prior

Jacobians are central differences on the manifold, evaluated for every
factor of a kind at once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .config import SmoothParams
from .geometry import (
    Pose,
    check_gimbal,
    roll_pitch_from_matrix,
    rot_z_matrix,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)
from .lm import levenberg_marquardt
from .register import MeasuredTrajectory

log = logging.getLogger(__name__)

KAPPA_EPS = 1e-8
JACOBIAN_STEP = 1e-6


class AllMeasurementsRejected(RuntimeError):
    """Outlier pruning removed every measurement of an instance."""


# ---------------------------------------------------------------- motion model


def ct_increment(v, kappa, dt):
    """Local CT step: returns (theta, dx, dy), batched; continuous at kappa = 0."""
    v = np.asarray(v, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    dt = np.asarray(dt, dtype=float)
    theta = kappa * v * dt
    small = np.abs(kappa) < KAPPA_EPS
    ks = np.where(small, 1.0, kappa)
    dx = np.where(small, v * dt, np.sin(theta) / ks)
    dy = np.where(small, kappa * v * v * dt * dt / 2.0, 2.0 * np.sin(theta / 2.0) ** 2 / ks)
    return theta, dx, dy


def _predict(R, t, v, kappa, dt):
    theta, dx, dy = ct_increment(v, kappa, dt)
    step = np.stack([dx, dy, np.zeros_like(dx)], axis=-1)
    return R @ rot_z_matrix(theta), t + np.einsum("...ij,...j->...i", R, step)


def ct_predict(T: Pose, v: float, kappa: float, dt: float) -> Pose:
    """Advance ``T`` by one coordinated-turn step in its local frame."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    R, t = _predict(T.rotation, T.translation, v, kappa, dt)
    return Pose(R, t)


# ---------------------------------------------------------------- residuals (batched)


def _whiten_pose(xi, params: SmoothParams):
    out = np.array(xi, dtype=float)
    out[..., :3] /= params.rotation_sigma
    out[..., 3:] /= params.translation_sigma
    return out


def _measurement(R, t, MR, Mt, params):
    MRt = np.swapaxes(MR, -1, -2)
    Re = MRt @ R
    te = np.einsum("...ij,...j->...i", MRt, t - Mt)
    return _whiten_pose(se3_log(Re, te), params)


def _motion(R0, t0, v, k, R1, t1, Rs, dt, params):
    PR, Pt = _predict(R0 @ Rs, t0, v, k, dt)
    PRt = np.swapaxes(PR, -1, -2)
    Re = PRt @ (R1 @ Rs)
    te = np.einsum("...ij,...j->...i", PRt, t1 - Pt)
    return _whiten_pose(se3_log(Re, te), params)


def _walk(x0, x1, dt, rate):
    return ((x1 - x0) / np.sqrt(rate * dt))[..., None]


def _attitude(R, Rs, params):
    roll, pitch = roll_pitch_from_matrix(R @ Rs)
    return np.stack([roll, pitch], axis=-1) / params.roll_pitch_sigma


def _curvature(k, params):
    return (np.asarray(k, dtype=float) / params.curvature_sigma)[..., None]


def huber(s, k: float):
    """Huber penalty of a residual norm: quadratic up to ``k``, linear beyond."""
    s = np.abs(np.asarray(s, dtype=float))
    return np.where(s <= k, 0.5 * s * s, k * (s - 0.5 * k))


def residual_measurement(pose: Pose, measurement: Pose, params: SmoothParams = SmoothParams()) -> np.ndarray:
    return _measurement(pose.rotation, pose.translation, measurement.rotation, measurement.translation, params)


def residual_motion(
    pose0: Pose,
    speed: float,
    curvature: float,
    pose1: Pose,
    shared_rotation: np.ndarray,
    dt: float,
    params: SmoothParams = SmoothParams(),
) -> np.ndarray:
    return _motion(
        pose0.rotation, pose0.translation, speed, curvature,
        pose1.rotation, pose1.translation, np.asarray(shared_rotation, dtype=float), dt, params,
    )


def residual_random_walk(x0: float, x1: float, dt: float, process: str, params: SmoothParams = SmoothParams()) -> float:
    if dt <= 0:
        raise ValueError("dt must be positive")
    rates = {"speed": params.speed_walk, "curvature": params.curvature_walk}
    if process not in rates:
        raise ValueError(f"process must be 'speed' or 'curvature', got {process!r}")
    return float(_walk(x0, x1, dt, rates[process])[0])


def residual_attitude_prior(pose: Pose, shared_rotation: np.ndarray, params: SmoothParams = SmoothParams()) -> np.ndarray:
    R = pose.rotation @ np.asarray(shared_rotation, dtype=float)
    check_gimbal(R)
    return _attitude(pose.rotation, np.asarray(shared_rotation, dtype=float), params)


def residual_curvature_prior(kappa: float, params: SmoothParams = SmoothParams()) -> float:
    return float(_curvature(kappa, params)[0])


# ---------------------------------------------------------------- state and graph


@dataclass(eq=False)
class SmootherState:
    rotations: np.ndarray  # (N, 3, 3)
    translations: np.ndarray  # (N, 3)
    speeds: np.ndarray  # (N,)
    curvatures: np.ndarray  # (N,)
    shared_rotation: np.ndarray  # (3, 3)

    def __len__(self) -> int:
        return len(self.speeds)

    @property
    def dim(self) -> int:
        return 8 * len(self) + 3

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def copy(self) -> SmootherState:
        return SmootherState(
            self.rotations.copy(), self.translations.copy(), self.speeds.copy(),
            self.curvatures.copy(), self.shared_rotation.copy(),
        )

    def retract(self, delta: np.ndarray) -> SmootherState:
        n = len(self)
        xi = delta[: 6 * n].reshape(n, 6)
        ER, et = se3_exp(xi)
        return SmootherState(
            self.rotations @ ER,
            self.translations + np.einsum("nij,nj->ni", self.rotations, et),
            self.speeds + delta[6 * n : 7 * n],
            self.curvatures + delta[7 * n : 8 * n],
            self.shared_rotation @ so3_exp(delta[8 * n :]),
        )


@dataclass(frozen=True)
class _Slot:
    kind: str  # "pose" | "speed" | "curvature" | "shared"
    index: np.ndarray | None = None


@dataclass
class _FactorKind:
    name: str
    slots: tuple[_Slot, ...]
    fn: object
    huber: float | None = None


_POSE_STEPS = {}


def _pose_steps(h: float):
    if h not in _POSE_STEPS:
        basis = np.vstack([np.eye(6) * h, -np.eye(6) * h])
        _POSE_STEPS[h] = se3_exp(basis)
    return _POSE_STEPS[h]


@dataclass(eq=False)
class FactorGraph:
    """Factor graph of one instance over a time grid."""

    times: np.ndarray
    measured_index: np.ndarray  # grid index of every measurement
    measurements: list[Pose]
    params: SmoothParams = field(default_factory=SmoothParams)
    active: np.ndarray | None = None  # mask over measurements

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.measured_index = np.asarray(self.measured_index, dtype=np.int64)
        if self.active is None:
            self.active = np.ones(len(self.measurements), dtype=bool)
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if np.any((self.measured_index < 0) | (self.measured_index >= len(self.times))):
            raise ValueError("measurement outside the time grid")
        self._MR = np.array([m.rotation for m in self.measurements]).reshape(-1, 3, 3)
        self._Mt = np.array([m.translation for m in self.measurements]).reshape(-1, 3)

    @property
    def n(self) -> int:
        return len(self.times)

    def kinds(self) -> list[_FactorKind]:
        p = self.params
        n = self.n
        dt = np.diff(self.times)
        i0, i1 = np.arange(n - 1), np.arange(1, n)
        act = np.flatnonzero(self.active)
        MR, Mt = self._MR[act], self._Mt[act]
        out = [
            _FactorKind(
                "measurement",
                (_Slot("pose", self.measured_index[act]),),
                lambda R, t: _measurement(R, t, MR, Mt, p),
                huber=p.huber_threshold,
            ),
            _FactorKind(
                "motion",
                (_Slot("pose", i0), _Slot("speed", i0), _Slot("curvature", i0), _Slot("pose", i1), _Slot("shared")),
                lambda R0, t0, v, k, R1, t1, Rs: _motion(R0, t0, v, k, R1, t1, Rs, dt, p),
            ),
            _FactorKind(
                "speed_walk",
                (_Slot("speed", i0), _Slot("speed", i1)),
                lambda a, b: _walk(a, b, dt, p.speed_walk),
            ),
            _FactorKind(
                "curvature_walk",
                (_Slot("curvature", i0), _Slot("curvature", i1)),
                lambda a, b: _walk(a, b, dt, p.curvature_walk),
            ),
            _FactorKind(
                "attitude",
                (_Slot("pose", np.arange(n)), _Slot("shared")),
                lambda R, t, Rs: _attitude(R, Rs, p),
            ),
            _FactorKind("curvature_prior", (_Slot("curvature", np.arange(n)),), lambda k: _curvature(k, p)),
        ]
        return [k for k in out if k.slots[0].index is None or len(k.slots[0].index)]

    # -- evaluation

    @staticmethod
    def _args(state: SmootherState, slots):
        args = []
        for s in slots:
            if s.kind == "pose":
                args.append([state.rotations[s.index], state.translations[s.index]])
            elif s.kind == "speed":
                args.append([state.speeds[s.index]])
            elif s.kind == "curvature":
                args.append([state.curvatures[s.index]])
            else:
                args.append([state.shared_rotation])
        return args

    @staticmethod
    def _flat(args):
        return [a for group in args for a in group]

    def residuals(self, state: SmootherState, kinds=None) -> dict[str, np.ndarray]:
        out = {}
        for fk in self.kinds():
            if kinds is not None and fk.name not in kinds:
                continue
            out[fk.name] = fk.fn(*self._flat(self._args(state, fk.slots)))
        return out

    def cost(self, state: SmootherState, kinds=None) -> float:
        total = 0.0
        for fk in self.kinds():
            if kinds is not None and fk.name not in kinds:
                continue
            r = fk.fn(*self._flat(self._args(state, fk.slots)))
            s = np.linalg.norm(r, axis=-1)
            total += float(np.sum(huber(s, fk.huber) if fk.huber else 0.5 * s * s))
        return total

    def measurement_errors(self, state: SmootherState) -> np.ndarray:
        """Unrobustified whitened error norm for every measurement (active or not)."""
        MR, Mt = self._MR, self._Mt
        idx = self.measured_index
        r = _measurement(state.rotations[idx], state.translations[idx], MR, Mt, self.params)
        return np.linalg.norm(r, axis=-1)

    def _columns(self, slot: _Slot, j: int) -> np.ndarray | int:
        n = self.n
        if slot.kind == "pose":
            return 6 * slot.index + j
        if slot.kind == "speed":
            return 6 * n + slot.index
        if slot.kind == "curvature":
            return 7 * n + slot.index
        return 8 * n + j

    def linearize(self, state: SmootherState, kinds=None, h: float = JACOBIAN_STEP):
        """Whitened, Huber-reweighted Jacobian (sparse) and residual vector."""
        ER, et = _pose_steps(h)
        Es = so3_exp(np.vstack([np.eye(3) * h, -np.eye(3) * h]))
        rows, cols, vals, res = [], [], [], []
        row0 = 0
        for fk in self.kinds():
            if kinds is not None and fk.name not in kinds:
                continue
            args = self._args(state, fk.slots)
            r = fk.fn(*self._flat(args))
            F, m = r.shape
            w = np.ones(F)
            if fk.huber:
                s = np.linalg.norm(r, axis=-1)
                w = np.where(s <= fk.huber, 1.0, fk.huber / np.maximum(s, 1e-300))
            sw = np.sqrt(w)[:, None]
            res.append((r * sw).ravel())
            row_idx = row0 + np.arange(F * m).reshape(F, m)
            for si, slot in enumerate(fk.slots):
                dims = {"pose": 6, "shared": 3}.get(slot.kind, 1)
                for j in range(dims):
                    plus, minus = [list(a) for a in args], [list(a) for a in args]
                    if slot.kind == "pose":
                        R, t = args[si]
                        plus[si] = [R @ ER[j], t + R @ et[j]]
                        minus[si] = [R @ ER[j + 6], t + R @ et[j + 6]]
                    elif slot.kind == "shared":
                        Rs = args[si][0]
                        plus[si] = [Rs @ Es[j]]
                        minus[si] = [Rs @ Es[j + 3]]
                    else:
                        x = args[si][0]
                        plus[si] = [x + h]
                        minus[si] = [x - h]
                    d = (fk.fn(*self._flat(plus)) - fk.fn(*self._flat(minus))) / (2 * h)
                    d = d * sw
                    c = self._columns(slot, j)
                    c = np.broadcast_to(np.asarray(c)[..., None] if np.ndim(c) else c, (F, m))
                    rows.append(row_idx.ravel())
                    cols.append(np.asarray(c).ravel())
                    vals.append(d.ravel())
            row0 += F * m
        nrows = row0
        if rows:
            J = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(nrows, state.dim),
            ).tocsr()
            r = np.concatenate(res)
        else:
            J = sp.csr_matrix((0, state.dim))
            r = np.zeros(0)
        return J, r

    def gradient(self, state: SmootherState, kinds=None) -> np.ndarray:
        J, r = self.linearize(state, kinds)
        return J.T @ r

    def restrict(self, active: np.ndarray) -> FactorGraph:
        return replace(self, active=np.asarray(active, dtype=bool))


class _Problem:
    def __init__(self, graph: FactorGraph):
        self.graph = graph

    def cost(self, x):
        return self.graph.cost(x)

    def linearize(self, x):
        return self.graph.linearize(x)

    def retract(self, x, delta):
        return x.retract(delta)


def optimize(graph: FactorGraph, init: SmootherState, max_iters: int = 10):
    """Levenberg-Marquardt on the graph; returns ``(state, total_cost)``."""
    state, cost, info = levenberg_marquardt(_Problem(graph), init, max_iters=max_iters)
    log.debug("LM: %d iterations, %d accepted, cost %.6g", info.iterations, info.accepted, cost)
    return state, cost


# ---------------------------------------------------------------- smoothing driver


@dataclass(eq=False)
class SmoothedTrajectory:
    instance_id: int
    times: np.ndarray
    state: SmootherState
    measured: set[float]
    rejected: set[float]
    is_static: bool
    cost: float
    label: str = ""

    def poses(self) -> list[Pose]:
        return self.state.poses()

    @property
    def positions(self) -> np.ndarray:
        return self.state.translations


def classify_static(poses, threshold: float = 1.0) -> bool:
    """True iff every pair of measured positions is closer than ``threshold``."""
    if isinstance(poses, MeasuredTrajectory):
        poses = list(poses.poses.values())
    elif isinstance(poses, dict):
        poses = list(poses.values())
    pts = np.array([p.translation for p in poses]).reshape(-1, 3)
    if len(pts) < 2:
        return True
    from scipy.spatial.distance import pdist

    return bool(np.max(pdist(pts)) < threshold)


def grid_indices(times: np.ndarray, stamps) -> np.ndarray:
    """Nearest grid index for each timestamp; raises if a stamp is off the grid."""
    times = np.asarray(times, dtype=float)
    stamps = np.asarray(list(stamps), dtype=float)
    idx = np.clip(np.searchsorted(times, stamps), 0, len(times) - 1)
    prev = np.clip(idx - 1, 0, len(times) - 1)
    idx = np.where(np.abs(times[prev] - stamps) < np.abs(times[idx] - stamps), prev, idx)
    spacing = np.min(np.diff(times)) if len(times) > 1 else 1.0
    if np.any(np.abs(times[idx] - stamps) > 0.25 * spacing):
        raise ValueError("measurement timestamp does not lie on the time grid")
    return idx


def initial_state(times: np.ndarray, measured_index: np.ndarray, measurements: list[Pose]) -> SmootherState:
    """Measured poses, interpolated gaps, finite-difference speeds, zero curvature.

    The shared rotation is the yaw that points the first pose's local x-axis
    at the first measured position at least 1 m away (or the last one).
    """
    n = len(times)
    order = np.argsort(measured_index, kind="stable")
    mi = np.asarray(measured_index)[order]
    meas = [measurements[i] for i in order]
    R = np.empty((n, 3, 3))
    t = np.empty((n, 3))
    for i in range(n):
        k = np.searchsorted(mi, i)
        if k < len(mi) and mi[k] == i:
            R[i], t[i] = meas[k].rotation, meas[k].translation
        elif k == 0:
            R[i], t[i] = meas[0].rotation, meas[0].translation
        elif k == len(mi):
            R[i], t[i] = meas[-1].rotation, meas[-1].translation
        else:
            a, b = meas[k - 1], meas[k]
            ta, tb = times[mi[k - 1]], times[mi[k]]
            f = (times[i] - ta) / (tb - ta)
            R[i] = a.rotation @ so3_exp(f * so3_log(a.rotation.T @ b.rotation))
            t[i] = (1 - f) * a.translation + f * b.translation
    dt = np.diff(times)
    v = np.zeros(n)
    if n > 1:
        v[:-1] = np.linalg.norm(np.diff(t, axis=0), axis=1) / dt
        v[-1] = v[-2]

    p0 = meas[0].translation
    far = [m.translation for m in meas[1:] if np.linalg.norm(m.translation - p0) >= 1.0]
    target = far[0] if far else meas[-1].translation
    d_local = meas[0].rotation.T @ (target - p0)
    yaw = float(np.arctan2(d_local[1], d_local[0])) if np.linalg.norm(d_local[:2]) > 0 else 0.0
    return SmootherState(R, t, v, np.zeros(n), rot_z_matrix(yaw))


def static_state(times: np.ndarray, measurements: list[Pose]) -> SmootherState:
    n = len(times)
    mean_t = np.mean([m.translation for m in measurements], axis=0)
    from .geometry import project_to_so3

    mean_R = project_to_so3(np.sum([m.rotation for m in measurements], axis=0))
    return SmootherState(
        np.repeat(mean_R[None], n, axis=0), np.repeat(mean_t[None], n, axis=0),
        np.zeros(n), np.zeros(n), np.eye(3),
    )


def smooth(
    measured: MeasuredTrajectory,
    times=None,
    params: SmoothParams = SmoothParams(),
) -> SmoothedTrajectory:
    """Two-pass robust CT smoothing of one instance.

    ``times`` is the time grid (defaults to the measured timestamps). Pass one
    runs ``params.first_pass_iters`` LM iterations on the full graph;
    measurements whose whitened error exceeds ``params.outlier_threshold``
    are dropped and the pruned graph is optimized for up to
    ``params.max_iters`` iterations.
    """
    stamps = sorted(measured.poses)
    if not stamps:
        raise ValueError("no measurements")
    times = np.asarray(stamps if times is None else times, dtype=float)
    meas = [measured.poses[s] for s in stamps]
    idx = grid_indices(times, stamps)

    if classify_static(meas, params.static_displacement):
        state = static_state(times, meas)
        return SmoothedTrajectory(measured.instance_id, times, state, set(stamps), set(), True, 0.0, measured.label)

    graph = FactorGraph(times, idx, meas, params)
    init = initial_state(times, idx, meas)
    state, _ = optimize(graph, init, params.first_pass_iters)

    errors = graph.measurement_errors(state)
    keep = errors <= params.outlier_threshold
    rejected = {stamps[i] for i in np.flatnonzero(~keep)}
    if not keep.any():
        raise AllMeasurementsRejected(f"instance {measured.instance_id}: all {len(stamps)} measurements rejected")
    if rejected:
        log.info("instance %s: rejected %d of %d measurements", measured.instance_id, len(rejected), len(stamps))

    pruned = graph.restrict(keep)
    state, cost = optimize(pruned, state, params.max_iters)
    return SmoothedTrajectory(measured.instance_id, times, state, set(stamps), rejected, False, cost, measured.label)
