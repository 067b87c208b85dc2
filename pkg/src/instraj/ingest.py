"""Lifting 2D instance masks to 3D instance points, and DBSCAN filtering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Pose

NOISE = -1
BACKGROUND_ID = 0


class AllNoise(ValueError):
    """Every point of an observation was labeled noise by DBSCAN."""


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    extrinsic: Pose  # sensor-from-world
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=float).reshape(3, 3)
        object.__setattr__(self, "intrinsics", K)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, world_points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return integer pixel coordinates (N, 2) as (col, row) and camera depths (N,)."""
        pc = self.extrinsic.apply(np.asarray(world_points, dtype=float).reshape(-1, 3))
        z = pc[:, 2]
        safe = np.where(z > 0, z, 1.0)
        uv = (pc @ self.intrinsics.T)[:, :2] / safe[:, None]
        return np.floor(uv).astype(np.int64), z


@dataclass(frozen=True, eq=False)
class InstanceMask:
    instance_id: int
    label: str
    bitmap: np.ndarray  # (height, width) bool
    time: float

    def __post_init__(self):
        if self.instance_id <= 0:
            raise ValueError("instance id 0 is reserved for the static background")
        object.__setattr__(self, "bitmap", np.asarray(self.bitmap, dtype=bool))


@dataclass(frozen=True, eq=False)
class LidarFrame:
    points: np.ndarray  # (N, 3) world frame
    timestamp: float
    descriptors: np.ndarray  # (N, D), unit rows
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        desc = normalize_descriptors(np.asarray(self.descriptors, dtype=float).reshape(len(pts), -1))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))


@dataclass(eq=False)
class InstanceObservation:
    instance_id: int
    timestamp: float
    points: np.ndarray
    descriptors: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=float).reshape(len(self.points), -1)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> InstanceObservation:
        return InstanceObservation(
            self.instance_id, self.timestamp, self.points[idx], self.descriptors[idx], self.label
        )


def normalize_descriptors(desc: np.ndarray) -> np.ndarray:
    if desc.size == 0:
        return desc
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    # rows already at unit length are left bit-identical so reloading is lossless
    unit = (norms == 0) | (np.abs(norms - 1.0) <= 4 * np.finfo(float).eps)
    return desc / np.where(unit, 1.0, norms)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def erode_mask(mask: InstanceMask, radius: int = 3) -> InstanceMask:
    """Binary erosion by a discrete disk; pixels beyond the border count as unset."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return mask
    eroded = ndimage.binary_erosion(mask.bitmap, structure=disk(radius), border_value=0)
    return InstanceMask(mask.instance_id, mask.label, eroded, mask.time)


def lift_instance_points(
    frame: LidarFrame,
    masks: list[InstanceMask],
    cam: CameraModel,
    max_range: float = 80.0,
    erosion_radius: int = 3,
) -> list[InstanceObservation]:
    """Assign lidar points to instances whose eroded mask they project into.

    Range is measured from the lidar origin. Overlapping masks each receive
    the point. Instances without any points are omitted.
    """
    if not masks:
        return []
    pix, depth = cam.project(frame.points)
    rng = np.linalg.norm(frame.points - frame.origin, axis=1)
    valid = (
        (depth > 0)
        & (rng <= max_range)
        & (pix[:, 0] >= 0)
        & (pix[:, 0] < cam.width)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] < cam.height)
    )
    idx = np.flatnonzero(valid)
    cols, rows = pix[idx, 0], pix[idx, 1]
    out = []
    for mask in sorted(masks, key=lambda m: m.instance_id):
        bitmap = erode_mask(mask, erosion_radius).bitmap
        if bitmap.shape != (cam.height, cam.width):
            raise ValueError(
                f"mask {mask.instance_id} has shape {bitmap.shape}, "
                f"camera expects {(cam.height, cam.width)}"
            )
        hit = idx[bitmap[rows, cols]]
        if len(hit):
            out.append(
                InstanceObservation(
                    mask.instance_id,
                    frame.timestamp,
                    frame.points[hit],
                    frame.descriptors[hit],
                    mask.label,
                )
            )
    return out


def dbscan(points, eps: float = 0.5, min_pts: int = 10) -> np.ndarray:
    """DBSCAN labels (-1 for noise).

    Neighbor counts include the point itself and use ``dist <= eps``.
    Clusters are numbered by their lowest-index core point; a border point
    reachable from several clusters takes the lowest label.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)
    np.add.at(counts, pairs[:, 0], 1)
    np.add.at(counts, pairs[:, 1], 1)
    core = counts >= min_pts
    if not core.any():
        return labels

    cc = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    graph = coo_matrix((np.ones(len(cc)), (cc[:, 0], cc[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    # renumber components by first core index
    first = {}
    for i in core_idx:
        first.setdefault(comp[i], len(first))
    labels[core_idx] = [first[comp[i]] for i in core_idx]

    # border points: lowest adjacent cluster label
    for a, b in ((0, 1), (1, 0)):
        sel = core[pairs[:, a]] & ~core[pairs[:, b]]
        border, lab = pairs[sel, b], labels[pairs[sel, a]]
        best = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(best, border, lab)
        hit = best < np.iinfo(np.int64).max
        upd = hit & ((labels == NOISE) | (best < labels)) & ~core
        labels[upd] = best[upd]
    return labels


def keep_largest_cluster(
    obs: InstanceObservation, eps: float = 0.5, min_pts: int = 10
) -> InstanceObservation:
    """Keep only the most populous DBSCAN cluster (ties go to the lowest label)."""
    labels = dbscan(obs.points, eps, min_pts)
    valid = labels[labels != NOISE]
    if valid.size == 0:
        raise AllNoise(f"instance {obs.instance_id} at t={obs.timestamp}: all points are noise")
    sizes = np.bincount(valid)
    return obs.subset(labels == int(np.argmax(sizes)))
