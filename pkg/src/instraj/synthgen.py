"""Deterministic synthetic scenarios: CT ground truth, box-surface lidar, masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from skimage.draw import polygon as fill_polygon

from .config import ConfigError
from .ctsmooth import ct_predict
from .geometry import Pose, rot_z, so3_exp
from .ingest import CameraModel, InstanceMask, InstanceObservation, LidarFrame, disk, normalize_descriptors
from .register import MeasuredTrajectory

LIDAR_ORIGIN = (0.0, 0.0, 2.0)


@dataclass(frozen=True)
class ObjectConfig:
    size: tuple[float, float, float] = (4.0, 2.0, 1.5)
    density: float = 20.0  # surface points per square meter
    speed: float | tuple[float, ...] = 10.0  # m/s, constant or per frame
    curvature: float | tuple[float, ...] = 0.0  # 1/m, constant or per frame
    spawn: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, yaw
    label: str = "car"


@dataclass(frozen=True)
class NoiseConfig:
    point_sigma: float = 0.0
    dropout: float = 0.0
    outlier_frame: float = 0.0
    outlier_offset: float = 5.0
    descriptor_sigma: float = 0.0
    # smallest fraction of the full turn kept by the occlusion sector; 1 disables occlusion
    min_visible: float = 1.0


@dataclass(frozen=True)
class CameraConfig:
    width: int = 1024
    height: int = 1024
    focal: float = 400.0
    height_above_ground: float = 40.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    frames: int = 50
    dt: float = 0.1
    objects: tuple[ObjectConfig, ...] = (ObjectConfig(),)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    descriptor_dim: int = 32
    clutter_points: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("frames", "must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt", "must be > 0")
        if self.descriptor_dim < 2:
            raise ConfigError("descriptor_dim", "must be >= 2")
        if self.clutter_points < 0:
            raise ConfigError("clutter_points", "must be >= 0")
        n = self.noise
        for name in ("dropout", "outlier_frame", "min_visible"):
            value = getattr(n, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"noise.{name}", f"probability must be in [0, 1], got {value}")
        for name in ("point_sigma", "descriptor_sigma", "outlier_offset"):
            if getattr(n, name) < 0:
                raise ConfigError(f"noise.{name}", "must be >= 0")
        for i, obj in enumerate(self.objects):
            if obj.density <= 0:
                raise ConfigError(f"objects[{i}].density", "must be > 0")
            if any(s <= 0 for s in obj.size):
                raise ConfigError(f"objects[{i}].size", "dimensions must be > 0")
            for name in ("speed", "curvature"):
                prof = getattr(obj, name)
                if not np.isscalar(prof) and len(prof) not in (self.frames, self.frames - 1):
                    raise ConfigError(f"objects[{i}].{name}", "profile length must equal frames")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ScenarioConfig:
        d = dict(d)
        known = {"seed", "frames", "dt", "objects", "noise", "descriptor_dim", "clutter_points", "camera"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown scenario field")
        try:
            objects = tuple(
                ObjectConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
                for o in d.pop("objects", [{}])
            )
            noise = NoiseConfig(**d.pop("noise", {}))
            camera = CameraConfig(**d.pop("camera", {}))
        except TypeError as exc:
            raise ConfigError("objects/noise/camera", str(exc)) from exc
        return cls(objects=objects, noise=noise, camera=camera, **d)


@dataclass(eq=False)
class ObjectTruth:
    instance_id: int
    label: str
    poses: list[Pose]
    speeds: np.ndarray
    curvatures: np.ndarray
    points: np.ndarray  # canonical, object frame
    descriptors: np.ndarray


@dataclass(eq=False)
class GroundTruth:
    times: np.ndarray
    objects: list[ObjectTruth]


@dataclass(eq=False)
class Scenario:
    config: ScenarioConfig
    truth: GroundTruth
    # frame index -> observations of visible (not dropped) objects
    observations: list[list[InstanceObservation]]
    dropped: set[tuple[int, int]]  # (frame, instance id)
    outliers: set[tuple[int, int]]


def _profile(value, n: int) -> np.ndarray:
    if np.isscalar(value):
        return np.full(n, float(value))
    arr = np.asarray(value, dtype=float)
    return np.concatenate([arr, arr[-1:]]) if len(arr) == n - 1 else arr


def integrate_ct(start: Pose, speeds, curvatures, dt: float, frames: int) -> list[Pose]:
    """Roll the CT model forward; the step from frame k uses ``speeds[k]``/``curvatures[k]``."""
    poses = [start]
    for k in range(frames - 1):
        poses.append(ct_predict(poses[-1], float(speeds[k]), float(curvatures[k]), dt))
    return poses


def sample_box_surface(size, density: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the surface of a box centered at the origin."""
    lx, ly, lz = size
    faces = [
        (0, lx / 2, (1, 2), ly * lz), (0, -lx / 2, (1, 2), ly * lz),
        (1, ly / 2, (0, 2), lx * lz), (1, -ly / 2, (0, 2), lx * lz),
        (2, lz / 2, (0, 1), lx * ly), (2, -lz / 2, (0, 1), lx * ly),
    ]
    half = np.asarray(size) / 2
    out = []
    for axis, value, free, area in faces:
        n = max(1, int(round(area * density)))
        p = np.empty((n, 3))
        p[:, axis] = value
        for f in free:
            p[:, f] = rng.uniform(-half[f], half[f], n)
        out.append(p)
    return np.vstack(out)


def random_descriptors(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return normalize_descriptors(rng.normal(size=(n, dim)))


def _visible_sector(points: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0:
        return np.ones(len(points), dtype=bool)
    start = rng.uniform(-np.pi, np.pi)
    phi = np.mod(np.arctan2(points[:, 1], points[:, 0]) - start, 2 * np.pi)
    return phi <= 2 * np.pi * fraction


def generate(config: ScenarioConfig) -> Scenario:
    """Build ground truth and corrupted per-frame observations; deterministic in ``config.seed``."""
    n = config.frames
    times = np.arange(n) * config.dt
    noise = config.noise
    seeds = np.random.SeedSequence(config.seed).spawn(len(config.objects))
    objects = []
    observations: list[list[InstanceObservation]] = [[] for _ in range(n)]
    dropped, outliers = set(), set()
    for i, (oc, ss) in enumerate(zip(config.objects, seeds)):
        rng = np.random.default_rng(ss)
        iid = i + 1
        speeds = _profile(oc.speed, n)
        curv = _profile(oc.curvature, n)
        x, y, yaw = oc.spawn
        start = Pose(rot_z(yaw).rotation, [x, y, oc.size[2] / 2])
        poses = integrate_ct(start, speeds, curv, config.dt, n)
        pts = sample_box_surface(oc.size, oc.density, rng)
        desc = random_descriptors(len(pts), config.descriptor_dim, rng)
        objects.append(ObjectTruth(iid, oc.label, poses, speeds, curv, pts, desc))

        for k, pose in enumerate(poses):
            # fixed number of draws per frame keeps streams aligned across noise settings
            u_drop, u_out, u_vis = rng.random(3)
            heading = rng.uniform(-np.pi, np.pi)
            frac = noise.min_visible + (1.0 - noise.min_visible) * u_vis
            keep = _visible_sector(pts, frac, rng)
            pos_noise = rng.normal(size=(len(pts), 3))
            desc_noise = rng.normal(size=desc.shape)
            if u_drop < noise.dropout:
                dropped.add((k, iid))
                continue
            world_pose = pose
            if u_out < noise.outlier_frame:
                outliers.add((k, iid))
                shift = noise.outlier_offset * np.array([np.cos(heading), np.sin(heading), 0.0])
                world_pose = Pose(pose.rotation, pose.translation + shift)
            p = world_pose.apply(pts[keep])
            d = desc[keep]
            if noise.point_sigma > 0:
                p = p + noise.point_sigma * pos_noise[keep]
            if noise.descriptor_sigma > 0:
                d = normalize_descriptors(d + noise.descriptor_sigma * desc_noise[keep])
            observations[k].append(InstanceObservation(iid, float(times[k]), p, d, oc.label))
    return Scenario(config, GroundTruth(times, objects), observations, dropped, outliers)


def noisy_measurements(
    poses: Sequence[Pose], sigma_t: float, sigma_r: float, rng: np.random.Generator, offset: Pose | None = None
) -> list[Pose]:
    """Pose measurements ``pose @ offset`` with rotation noise (right-multiplied) and position noise."""
    offset = offset or Pose()
    out = []
    for p in poses:
        m = p.compose(offset)
        R = m.rotation @ so3_exp(rng.normal(0.0, sigma_r, 3))
        out.append(Pose(R, m.translation + rng.normal(0.0, sigma_t, 3)))
    return out



def as_measured(poses: Sequence[Pose], times, instance_id: int = 1, label: str = "") -> MeasuredTrajectory:
    """Wrap pose measurements as a registration result (no canonical cloud)."""
    times = [float(t) for t in times]
    if len(times) != len(poses):
        raise ValueError("one timestamp per pose required")
    return MeasuredTrajectory(
        instance_id,
        dict(zip(times, poses)),
        dict.fromkeys(times, 1.0),
        np.zeros((0, 3)),
        np.zeros((0, 1)),
        min(times, default=0.0),
        label=label,
    )


# ---------------------------------------------------------------- sensor rendering


def make_camera(cfg: CameraConfig) -> CameraModel:
    """Nadir pinhole camera above the origin (camera z points down)."""
    K = np.array([[cfg.focal, 0.0, cfg.width / 2], [0.0, cfg.focal, cfg.height / 2], [0.0, 0.0, 1.0]])
    world_from_cam = Pose(
        np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]),
        [0.0, 0.0, cfg.height_above_ground],
    )
    return CameraModel(K, world_from_cam.inverse(), cfg.width, cfg.height)


def render_mask(points: np.ndarray, cam: CameraModel, margin: int) -> np.ndarray:
    """Convex hull of the projected points, dilated by ``margin`` pixels."""
    bitmap = np.zeros((cam.height, cam.width), dtype=bool)
    pix, depth = cam.project(points)
    pix = pix[depth > 0]
    if len(pix) == 0:
        return bitmap
    try:
        hull = ConvexHull(pix.astype(float))
        verts = pix[hull.vertices]
        rr, cc = fill_polygon(verts[:, 1], verts[:, 0], shape=bitmap.shape)
        bitmap[rr, cc] = True
    except QhullError:
        pass
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
    bitmap[pix[inside, 1], pix[inside, 0]] = True
    if margin > 0:
        bitmap = ndimage.binary_dilation(bitmap, structure=disk(margin))
    return bitmap


@dataclass(eq=False)
class SequenceFrame:
    lidar: LidarFrame
    masks: list[InstanceMask]


@dataclass(eq=False)
class Sequence:
    camera: CameraModel
    dt: float
    frames: list[SequenceFrame]

    @property
    def times(self) -> np.ndarray:
        return np.array([f.lidar.timestamp for f in self.frames])


def to_sequence(scenario: Scenario, mask_margin: int = 5) -> Sequence:
    """Lidar sweeps (objects plus static clutter) and per-object masks from a scenario."""
    cfg = scenario.config
    cam = make_camera(cfg.camera)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    m = cfg.clutter_points
    clutter = np.column_stack(
        [rng.uniform(-50, 50, m), rng.uniform(-50, 50, m), rng.uniform(4.0, 8.0, m)]
    ).reshape(-1, 3)
    clutter_desc = random_descriptors(m, cfg.descriptor_dim, rng) if m else np.zeros((0, cfg.descriptor_dim))
    frames = []
    for k, t in enumerate(scenario.truth.times):
        obs = scenario.observations[k]
        pts = [o.points for o in obs] + [clutter]
        desc = [o.descriptors for o in obs] + [clutter_desc]
        lidar = LidarFrame(np.vstack(pts), float(t), np.vstack(desc), np.array(LIDAR_ORIGIN))
        masks = [
            InstanceMask(o.instance_id, o.label, render_mask(o.points, cam, mask_margin), float(t)) for o in obs
        ]
        frames.append(SequenceFrame(lidar, masks))
    return Sequence(cam, cfg.dt, frames)
