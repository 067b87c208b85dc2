"""SE(3)/SO(3) primitives.

Rotations are 3x3 orthonormal matrices. Tangent vectors are ordered
``(rotation[3], translation[3])``. Batched helpers operate on arrays with a
leading batch axis and are what the smoother uses internally; :class:`Pose`
is the value type the rest of the package passes around.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REORTHONORMALIZE_EVERY = 100
_SMALL_ANGLE = 1e-4


class DegenerateConfiguration(ValueError):
    """Point correspondences do not pin down a rigid transform."""


class NearPiRotation(ValueError):
    """Rotation is too close to the cut locus of the logarithm."""


class GimbalLock(ValueError):
    """Pitch is at +-pi/2, roll is undefined."""


def skew(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix for vectors of shape (..., 3)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _exp_coeffs(theta):
    """Return sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero."""
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(ts) / ts)
    # 1 - cos = 2 sin^2(t/2) avoids cancellation
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * np.sin(ts / 2) ** 2 / ts**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (ts - np.sin(ts)) / ts**3)
    return a, b, c


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched over leading axes."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    K = skew(w)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R (batched). Accurate up to and including angles near pi."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    w = 0.5 * np.stack(
        [R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=-1
    )
    s = np.linalg.norm(w, axis=-1)
    c = np.clip(0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0), -1.0, 1.0)
    theta = np.arctan2(s, c)
    out = np.empty((R.shape[0], 3))

    near_pi = c < -0.9
    regular = ~near_pi
    if regular.any():
        th = theta[regular]
        ss = s[regular]
        small = th < _SMALL_ANGLE
        scale = np.where(small, 1.0 + th * th / 6.0, th / np.where(small, 1.0, ss))
        out[regular] = w[regular] * scale[:, None]
    for i in np.flatnonzero(near_pi):
        # axis from the symmetric part, sign from the skew part
        B = 0.5 * (R[i] + R[i].T) - c[i] * np.eye(3)
        k = int(np.argmax(np.diag(B)))
        axis = B[k] / np.sqrt(B[k, k] * (1.0 - c[i]))
        if axis @ w[i] < 0:
            axis = -axis
        out[i] = axis * theta[i]
    return out[0] if single else out


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map; returns (R, t) batched over leading axes."""
    xi = np.asarray(xi, dtype=float)
    w, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _exp_coeffs(theta)
    K = skew(w)
    K2 = K @ K
    R = np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2
    V = np.eye(3) + b[..., None, None] * K + c[..., None, None] * K2
    t = np.einsum("...ij,...j->...i", V, rho)
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Logarithm of (R, t); returns (..., 6) tangent vectors."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    w = so3_log(R)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    small = theta < _SMALL_ANGLE
    th2 = np.where(small, 1.0, theta * theta)
    coef = np.where(
        small, 1.0 / 12.0 + theta * theta / 720.0, (1.0 - a / (2.0 * np.where(small, 1.0, b))) / th2
    )
    K = skew(w)
    Vinv = np.eye(3) - 0.5 * K + coef[..., None, None] * (K @ K)
    rho = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([w, rho], axis=-1)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.ones(3)
    D[2] = np.sign(np.linalg.det(U @ Vt))
    return (U * D) @ Vt


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z_matrix(theta):
    """Yaw rotation matrix; accepts scalars or arrays of angles."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(theta.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # compositions since the last re-orthonormalization
    depth: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> Pose:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: Pose) -> Pose:
        """``self @ other``: apply ``other`` first, then ``self``."""
        R = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        depth = max(self.depth, other.depth) + 1
        if depth >= REORTHONORMALIZE_EVERY:
            R = project_to_so3(R)
            depth = 0
        return Pose(R, t, depth)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.depth)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        yaw = np.arctan2(self.rotation[1, 0], self.rotation[0, 0])
        return f"Pose(t={np.round(self.translation, 4).tolist()}, yaw={yaw:.4f})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def rot_z(theta: float) -> Pose:
    """Pure yaw rotation about +z."""
    return Pose(rot_z_matrix(float(theta)), np.zeros(3))


def exp(tangent) -> Pose:
    """Pose from a 6-vector ``(rotation, translation)`` tangent."""
    R, t = se3_exp(np.asarray(tangent, dtype=float).reshape(6))
    return Pose(R, t)


def log(p: Pose) -> np.ndarray:
    """Tangent 6-vector of a pose; refuses rotations within 1e-6 of pi."""
    angle = np.arccos(np.clip(0.5 * (np.trace(p.rotation) - 1.0), -1.0, 1.0))
    if angle >= np.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {angle!r} is at the cut locus")
    return se3_log(p.rotation, p.translation)


def roll_pitch_from_matrix(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ZYX roll and pitch (batched) with no gimbal check."""
    R = np.asarray(R, dtype=float)
    pitch = -np.arcsin(np.clip(R[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return roll, pitch


def check_gimbal(R: np.ndarray) -> None:
    pitch = np.arcsin(np.clip(np.abs(np.asarray(R)[..., 2, 0]), 0.0, 1.0))
    if np.any(pitch >= np.pi / 2 - 1e-6):
        raise GimbalLock("pitch within 1e-6 of +-pi/2")


def roll_pitch(p: Pose) -> tuple[float, float]:
    """Roll and pitch of ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    check_gimbal(p.rotation)
    roll, pitch = roll_pitch_from_matrix(p.rotation)
    return float(roll), float(pitch)


def _umeyama_batch(src: np.ndarray, dst: np.ndarray, tol: float = 1e-9):
    """Rigid Umeyama on (B, K, 3) correspondence batches.

    Returns (R, t, ok) where ``ok`` marks non-collinear samples.
    """
    mu_s = src.mean(axis=1)
    mu_d = dst.mean(axis=1)
    sc = src - mu_s[:, None]
    dc = dst - mu_d[:, None]
    # collinearity: second singular value of the centered source
    sv = np.linalg.svd(sc, compute_uv=False)
    ok = sv[:, 1] > tol * np.maximum(1.0, sv[:, 0])
    H = np.einsum("bki,bkj->bij", dc, sc) / src.shape[1]
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    d[d == 0] = 1.0
    S = np.ones(H.shape[:-1])
    S[:, 2] = d
    R = (U * S[:, None, :]) @ Vt
    t = mu_d - np.einsum("bij,bj->bi", R, mu_s)
    return R, t, ok


def umeyama(src, dst) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (scale fixed to 1)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateConfiguration("need at least three correspondences")
    # sorting makes the sums independent of correspondence order
    order = np.lexsort(np.concatenate([src, dst], axis=1).T[::-1])
    R, t, ok = _umeyama_batch(src[order][None], dst[order][None])
    if not ok[0]:
        raise DegenerateConfiguration("source points are collinear")
    return Pose(R[0], t[0])
