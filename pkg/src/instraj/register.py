"""RANSAC registration of instance observations against a growing canonical point set."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import RegisterParams
from .geometry import Pose, _umeyama_batch
from .ingest import InstanceObservation

log = logging.getLogger(__name__)

_MATCH_CHUNK = 1024
_STRUCTURAL_CANDIDATES = 4
_DEGENERATE_RETRIES = 10


class NoMatches(ValueError):
    """No descriptor pair exceeds the similarity threshold."""


class RegistrationFailure(RuntimeError):
    """RANSAC did not produce an acceptable pose.

    ``reason`` is one of ``"NoMatches"``, ``"BelowFitness"`` or
    ``"DegenerateAllIterations"``.
    """

    def __init__(self, reason: str, fitness: float = 0.0):
        super().__init__(f"{reason} (fitness={fitness:.3f})")
        self.reason = reason
        self.fitness = fitness


@dataclass(eq=False)
class CanonicalInstance:
    instance_id: int
    points: np.ndarray
    descriptors: np.ndarray
    t_init: float
    init_pose: Pose
    center: np.ndarray


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Parallel arrays: source index, target index, cosine similarity."""

    src: np.ndarray
    dst: np.ndarray
    similarity: np.ndarray

    def __len__(self) -> int:
        return len(self.src)


@dataclass(eq=False)
class MeasuredTrajectory:
    instance_id: int
    poses: dict[float, Pose]
    fitness: dict[float, float]
    canonical_points: np.ndarray
    canonical_descriptors: np.ndarray
    t_init: float
    failures: dict[float, str] = field(default_factory=dict)
    label: str = ""

    @property
    def timestamps(self) -> list[float]:
        return sorted(self.poses)


def init_canonical(obs: list[InstanceObservation]) -> CanonicalInstance:
    """Anchor the canonical frame on the densest observation's bounding-box center."""
    if not obs:
        raise ValueError("at least one observation is required")
    densest = min(obs, key=lambda o: (-len(o), o.timestamp))
    lo, hi = densest.points.min(axis=0), densest.points.max(axis=0)
    center = 0.5 * (lo + hi)
    return CanonicalInstance(
        instance_id=densest.instance_id,
        points=densest.points - center,
        descriptors=densest.descriptors.copy(),
        t_init=densest.timestamp,
        init_pose=Pose(np.eye(3), center),
        center=center,
    )


def match_descriptors(src_desc: np.ndarray, dst_desc: np.ndarray, min_sim: float = 0.8) -> Correspondences:
    """Best source descriptor for each target descriptor, kept when similarity > ``min_sim``."""
    src_idx, dst_idx, sims = [], [], []
    for start in range(0, len(dst_desc), _MATCH_CHUNK):
        block = dst_desc[start : start + _MATCH_CHUNK] @ src_desc.T
        best = np.argmax(block, axis=1)
        s = block[np.arange(len(block)), best]
        keep = s > min_sim
        src_idx.append(best[keep])
        dst_idx.append(np.flatnonzero(keep) + start)
        sims.append(s[keep])
    if not src_idx or sum(len(s) for s in src_idx) == 0:
        raise NoMatches(f"no descriptor pair with similarity > {min_sim}")
    return Correspondences(np.concatenate(src_idx), np.concatenate(dst_idx), np.concatenate(sims))


def match_features(src: CanonicalInstance, dst: InstanceObservation, min_sim: float = 0.8) -> Correspondences:
    return match_descriptors(src.descriptors, dst.descriptors, min_sim)


def _structural_inliers(tree: cKDTree, dst_points: np.ndarray, R: np.ndarray, t: np.ndarray, radius: float) -> int:
    # map target into the source frame: R^T (x - t)
    local = (dst_points - t) @ R
    d, _ = tree.query(local, k=1, distance_upper_bound=radius)
    return int(np.count_nonzero(d <= radius))


def fitness(src_points, dst_points, T: Pose, radius: float = 0.1) -> float:
    """Fraction of target points within ``radius`` of a source point after mapping by ``T``."""
    src_points = np.asarray(src_points, dtype=float).reshape(-1, 3)
    dst_points = np.asarray(dst_points, dtype=float).reshape(-1, 3)
    if len(src_points) == 0 or len(dst_points) == 0:
        raise ValueError("both point sets must be non-empty")
    tree = cKDTree(src_points)
    return _structural_inliers(tree, dst_points, T.rotation, T.translation, radius) / len(dst_points)


def _subsample(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def _sample_triples(m: int, b: int, rng: np.random.Generator) -> np.ndarray:
    s = rng.integers(0, m, size=(b, 3))
    while True:
        dup = (s[:, 0] == s[:, 1]) | (s[:, 0] == s[:, 2]) | (s[:, 1] == s[:, 2])
        if not dup.any():
            return s
        s[dup] = rng.integers(0, m, size=(int(dup.sum()), 3))


def _iterations_needed(inlier_ratio: float, confidence: float) -> float:
    if confidence >= 1.0:
        return math.inf
    p = inlier_ratio**3
    if p >= 1.0:
        return 1.0
    if p <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def ransac_register(
    src: CanonicalInstance,
    dst: InstanceObservation,
    params: RegisterParams = RegisterParams(),
    seed=None,
) -> tuple[Pose, float]:
    """Estimate the canonical-to-world pose of ``dst`` by feature-matched RANSAC.

    Hypotheses come from 3-point Umeyama fits. Each batch is prescreened by
    correspondence inliers and the strongest candidates are scored by
    structural inliers (target points within ``fitness_radius`` of any source
    point). The winner is refit on its inlier correspondences.

    Raises RegistrationFailure when no hypothesis reaches the fitness threshold.
    """
    rng = np.random.default_rng(seed)
    radius = params.fitness_radius
    s_idx = _subsample(len(src.points), params.max_points, rng)
    t_idx = _subsample(len(dst.points), params.max_points, rng)
    S, Sd = src.points[s_idx], src.descriptors[s_idx]
    D, Dd = dst.points[t_idx], dst.descriptors[t_idx]

    try:
        corr = match_descriptors(Sd, Dd, params.min_similarity)
    except NoMatches:
        raise RegistrationFailure("NoMatches") from None
    if len(corr) < 3:
        raise RegistrationFailure("NoMatches")
    cs, ct = S[corr.src], D[corr.dst]
    m = len(corr)
    tree = cKDTree(S)

    # (structural inliers, -iteration index, R, t, correspondence inliers)
    best = None
    done = 0
    needed = math.inf
    while done < params.iterations and done < needed:
        b = min(params.batch_size, params.iterations - done)
        samples = _sample_triples(m, b, rng)
        R, t, ok = _umeyama_batch(cs[samples], ct[samples])
        for _ in range(_DEGENERATE_RETRIES):
            if ok.all():
                break
            bad = np.flatnonzero(~ok)
            samples[bad] = _sample_triples(m, len(bad), rng)
            R[bad], t[bad], ok[bad] = _umeyama_batch(cs[samples[bad]], ct[samples[bad]])
        valid = np.flatnonzero(ok)
        if len(valid):
            pred = np.einsum("bij,mj->bmi", R[valid], cs) + t[valid, None, :]
            cin = np.count_nonzero(np.sum((pred - ct) ** 2, axis=-1) <= radius * radius, axis=1)
            # stable sort keeps the lowest iteration index first among ties
            top = valid[np.argsort(-cin, kind="stable")[:_STRUCTURAL_CANDIDATES]]
            cin_of = dict(zip(valid.tolist(), cin.tolist()))
            for i in top:
                score = _structural_inliers(tree, D, R[i], t[i], radius)
                key = (score, -(done + int(i)))
                if best is None or key > best[:2]:
                    best = (score, -(done + int(i)), R[i], t[i], cin_of[int(i)])
        done += b
        if best is not None:
            needed = _iterations_needed(best[4] / m, params.confidence)

    if best is None:
        raise RegistrationFailure("DegenerateAllIterations")

    score, _, R, t, _ = best
    inl = np.sum((cs @ R.T + t - ct) ** 2, axis=1) <= radius * radius
    if np.count_nonzero(inl) >= 3:
        Rr, tr, okr = _umeyama_batch(cs[inl][None], ct[inl][None])
        if okr[0]:
            refit = _structural_inliers(tree, D, Rr[0], tr[0], radius)
            if refit >= score:
                score, R, t = refit, Rr[0], tr[0]

    fit = score / len(D)
    if fit <= params.fitness_threshold:
        raise RegistrationFailure("BelowFitness", fit)
    log.debug("registered instance %s t=%s fitness=%.3f after %d iterations", dst.instance_id, dst.timestamp, fit, done)
    return Pose(R, t), fit


def build_trajectory(
    obs: list[InstanceObservation],
    params: RegisterParams = RegisterParams(),
    seed: int = 0,
) -> MeasuredTrajectory:
    """Register every observation of one instance, densest first, merging as it goes."""
    canon = init_canonical(obs)
    traj = MeasuredTrajectory(
        instance_id=canon.instance_id,
        poses={canon.t_init: canon.init_pose},
        fitness={canon.t_init: 1.0},
        canonical_points=canon.points,
        canonical_descriptors=canon.descriptors,
        t_init=canon.t_init,
        label=next((o.label for o in obs if o.label), ""),
    )
    rest = sorted((o for o in obs if o.timestamp != canon.t_init), key=lambda o: (-len(o), o.timestamp))
    inv_init = canon.init_pose.inverse()
    for k, o in enumerate(rest):
        try:
            pose, fit = ransac_register(canon, o, params, seed=[seed, canon.instance_id, k])
        except RegistrationFailure as exc:
            traj.failures[o.timestamp] = exc.reason
            log.info("instance %s t=%s registration failed: %s", o.instance_id, o.timestamp, exc)
            continue
        relative = pose.compose(inv_init)
        world_from_canon = relative.compose(canon.init_pose)
        traj.poses[o.timestamp] = world_from_canon
        traj.fitness[o.timestamp] = fit
        canon.points = np.vstack([canon.points, world_from_canon.inverse().apply(o.points)])
        canon.descriptors = np.vstack([canon.descriptors, o.descriptors])
    traj.canonical_points = canon.points
    traj.canonical_descriptors = canon.descriptors
    return traj
