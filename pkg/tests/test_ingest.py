import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import brute_force_dbscan, brute_force_erosion, same_partition

from instraj.geometry import Pose
from instraj.ingest import (
    AllNoise,
    CameraModel,
    InstanceMask,
    InstanceObservation,
    LidarFrame,
    dbscan,
    erode_mask,
    keep_largest_cluster,
    lift_instance_points,
)

W, H = 64, 48


def forward_camera():
    """Camera at the origin looking along world +z, no rotation."""
    K = np.array([[50.0, 0, 32], [0, 50.0, 24], [0, 0, 1]])
    return CameraModel(K, Pose.identity(), W, H)


def mask(bitmap, iid=1, t=0.0):
    return InstanceMask(iid, "car", bitmap, t)


def frame(points, t=0.0):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return LidarFrame(pts, t, np.tile([1.0, 0, 0, 0], (len(pts), 1)))


def test_background_id_reserved():
    with pytest.raises(ValueError):
        mask(np.ones((H, W), bool), iid=0)


def test_descriptors_unit_normalized():
    f = LidarFrame(np.zeros((2, 3)), 0.0, [[3.0, 4.0], [0.0, 2.0]])
    np.testing.assert_allclose(np.linalg.norm(f.descriptors, axis=1), 1.0, atol=1e-12)


def test_erode_radius_zero_identity(rng):
    m = mask(rng.random((H, W)) > 0.3)
    np.testing.assert_array_equal(erode_mask(m, 0).bitmap, m.bitmap)


def test_erode_square_to_center():
    bm = np.zeros((11, 11), bool)
    bm[2:9, 2:9] = True
    out = erode_mask(mask(bm), 3).bitmap
    assert out.sum() == 1 and out[5, 5]


def test_erode_large_radius_annihilates():
    bm = np.zeros((20, 20), bool)
    bm[5:12, 3:9] = True
    assert not erode_mask(mask(bm), 10).bitmap.any()


@given(arrays(np.bool_, (9, 11)), st.integers(0, 4))
def test_erode_matches_brute_force(bm, r):
    out = erode_mask(mask(bm), r).bitmap
    np.testing.assert_array_equal(out, brute_force_erosion(bm, r))
    assert not (out & ~bm).any()


def test_lift_no_masks():
    assert lift_instance_points(frame([[0, 0, 5]]), [], forward_camera()) == []


def test_lift_single_point_in_mask():
    # (0.1, -0.05, 5) -> u = 50*0.02 + 32 = 33, v = 50*(-0.01) + 24 = 23.5 -> pixel (33, 23)
    bm = np.zeros((H, W), bool)
    bm[23 - 4 : 23 + 5, 33 - 4 : 33 + 5] = True
    out = lift_instance_points(frame([[0.1, -0.05, 5.0], [3.0, 3.0, 5.0]]), [mask(bm)], forward_camera())
    assert len(out) == 1
    np.testing.assert_array_equal(out[0].points, [[0.1, -0.05, 5.0]])


def test_lift_excludes_erosion_border():
    bm = np.zeros((H, W), bool)
    bm[20:27, 30:37] = True  # 7x7: only (23, 33) survives radius 3
    cam = forward_camera()
    # pixel (33, 23) and its neighbour (34, 23)
    pts = [[(33.5 - 32) / 50 * 5, (23.5 - 24) / 50 * 5, 5.0], [(34.5 - 32) / 50 * 5, (23.5 - 24) / 50 * 5, 5.0]]
    out = lift_instance_points(frame(pts), [mask(bm)], cam)
    assert len(out[0]) == 1
    np.testing.assert_allclose(out[0].points[0], pts[0])


def test_lift_range_gate():
    bm = np.ones((H, W), bool)
    out = lift_instance_points(frame([[0, 0, 79.9], [0, 0, 81.0]]), [mask(bm)], forward_camera(), erosion_radius=0)
    np.testing.assert_array_equal(out[0].points, [[0, 0, 79.9]])


def test_lift_behind_camera_excluded():
    bm = np.ones((H, W), bool)
    assert lift_instance_points(frame([[0, 0, -5.0]]), [mask(bm)], forward_camera(), erosion_radius=0) == []


def test_lift_is_conservative(rng):
    cam = forward_camera()
    bm = rng.random((H, W)) > 0.2
    pts = np.column_stack([rng.uniform(-5, 5, 500), rng.uniform(-5, 5, 500), rng.uniform(-10, 100, 500)])
    out = lift_instance_points(frame(pts), [mask(bm)], cam)
    eroded = erode_mask(mask(bm), 3).bitmap
    for o in out:
        pix, depth = cam.project(o.points)
        assert (depth > 0).all()
        assert (np.linalg.norm(o.points, axis=1) <= 80).all()
        assert eroded[pix[:, 1], pix[:, 0]].all()


def ball(center, n, r, rng):
    d = rng.normal(size=(n, 3))
    d *= (rng.uniform(0, r, n) / np.linalg.norm(d, axis=1))[:, None]
    return np.asarray(center) + d


def test_dbscan_single_ball(rng):
    labels = dbscan(ball([0, 0, 0], 12, 0.1, rng))
    assert set(labels) == {0}


def test_dbscan_two_balls(rng):
    pts = np.vstack([ball([0, 0, 0], 12, 0.1, rng), ball([10, 0, 0], 12, 0.1, rng)])
    labels = dbscan(pts)
    assert len(set(labels[:12])) == 1 and len(set(labels[12:])) == 1
    assert labels[0] != labels[12] and -1 not in labels


def test_dbscan_matches_brute_force(rng):
    for _ in range(50):
        n = rng.integers(1, 200)
        pts = rng.uniform(0, rng.uniform(1, 4), size=(n, 3))
        ours = dbscan(pts, 0.5, 10)
        ref = brute_force_dbscan(pts, 0.5, 10)
        np.testing.assert_array_equal(ours, ref)


@given(st.integers(0, 2**32 - 1))
def test_dbscan_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, size=(80, 3))
    perm = rng.permutation(len(pts))
    a = dbscan(pts, 0.5, 6)
    b = dbscan(pts[perm], 0.5, 6)
    # border points shared by two clusters may legitimately switch sides
    counts = np.bincount(
        np.concatenate([np.flatnonzero(np.linalg.norm(pts - p, axis=1) <= 0.5) for p in pts]), minlength=len(pts)
    )
    core = counts >= 6
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    b = b[inv]
    assert np.array_equal(a == -1, b == -1)
    assert same_partition(a[core], b[core])


def obs(points, t=0.0):
    pts = np.asarray(points, dtype=float)
    return InstanceObservation(1, t, pts, np.ones((len(pts), 4)) / 2)


def test_keep_largest_single_cluster(rng):
    pts = ball([0, 0, 0], 30, 0.2, rng)
    out = keep_largest_cluster(obs(pts))
    np.testing.assert_array_equal(out.points, pts)


def test_keep_largest_picks_biggest(rng):
    big = ball([0, 0, 0], 50, 0.3, rng)
    small = ball([20, 0, 0], 20, 0.3, rng)
    noise = np.array([[50.0, 0, 0], [0, 50, 0], [0, 0, 50], [-50, 0, 0], [0, -50, 0]])
    pts = np.vstack([small, noise, big])
    out = keep_largest_cluster(obs(pts))
    np.testing.assert_array_equal(out.points, big)


def test_keep_largest_all_noise(rng):
    with pytest.raises(AllNoise):
        keep_largest_cluster(obs(ball([0, 0, 0], 9, 0.1, rng)), 0.5, 10)


@given(st.integers(0, 2**32 - 1))
def test_keep_largest_never_grows(seed):
    rng = np.random.default_rng(seed)
    o = obs(rng.uniform(0, 2, size=(60, 3)))
    try:
        assert len(keep_largest_cluster(o, 0.5, 5)) <= len(o)
    except AllNoise:
        pass
