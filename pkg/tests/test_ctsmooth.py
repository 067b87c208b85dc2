import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import ct_closed_form
from scenarios import ct_truth, positions, random_state, rmse

from instraj.config import SmoothParams
from instraj.ctsmooth import (
    AllMeasurementsRejected,
    FactorGraph,
    SmootherState,
    classify_static,
    ct_increment,
    ct_predict,
    initial_state,
    optimize,
    residual_attitude_prior,
    residual_curvature_prior,
    residual_measurement,
    residual_motion,
    residual_random_walk,
    smooth,
)
from instraj.geometry import GimbalLock, Pose, compose, rot_x, rot_y, rot_z, so3_exp
from instraj.synthgen import as_measured, integrate_ct, noisy_measurements

KINDS = ["measurement", "motion", "speed_walk", "curvature_walk", "attitude", "curvature_prior"]


# ---------------------------------------------------------------- motion model


def test_zero_speed_is_identity():
    T = Pose(so3_exp([0.1, 0.2, 0.3]), [1, 2, 3])
    for kappa in (0.0, 0.3, -2.0):
        assert ct_predict(T, 0.0, kappa, 0.5).allclose(T, 0)


def test_straight_line_step():
    P = ct_predict(Pose.identity(), 10.0, 0.0, 0.1)
    np.testing.assert_allclose(P.translation, [1.0, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(P.rotation, np.eye(3))


def test_turn_step_matches_closed_form():
    theta, dx, dy = ct_increment(10.0, 0.1, 0.1)
    # mpmath, 50 digits
    assert abs(dx - 0.99833416646828152307) < 1e-15
    assert abs(dy - 0.049958347219742339044) < 1e-15
    ref = ct_closed_form(10.0, 0.1, 0.1)
    assert abs(theta - float(ref[0])) < 1e-15
    P = ct_predict(Pose.identity(), 10.0, 0.1, 0.1)
    np.testing.assert_allclose(P.rotation, rot_z(0.1).rotation, atol=1e-15)


def test_predict_requires_positive_dt():
    with pytest.raises(ValueError):
        ct_predict(Pose.identity(), 1.0, 0.0, 0.0)


@pytest.mark.parametrize("v", [1.0, 10.0, 30.0])
@pytest.mark.parametrize("dt", [0.05, 0.1, 0.5])
def test_continuity_at_zero_curvature(v, dt):
    # the gap to the straight line is the lateral offset k v^2 dt^2 / 2, linear in k
    base = ct_predict(Pose.identity(), v, 0.0, dt)
    for k in (1e-7, -1e-7, 1e-9, -1e-9, 1e-12):
        gap = ct_predict(Pose.identity(), v, k, dt).translation - base.translation
        th = k * v * dt
        np.testing.assert_allclose(gap, [-v * dt * th * th / 6, k * v * v * dt * dt / 2, 0], rtol=1e-6, atol=1e-13)


@given(st.floats(0.1, 30), st.floats(-0.2, 0.2), st.floats(0.01, 1.0))
def test_increment_matches_arbitrary_precision(v, kappa, dt):
    if abs(kappa) < 1e-8:
        kappa = 1e-3
    theta, dx, dy = ct_increment(v, kappa, dt)
    ref = [float(x) for x in ct_closed_form(v, kappa, dt)]
    np.testing.assert_allclose([theta, dx, dy], ref, rtol=1e-12, atol=1e-14)


def test_circle_geometry():
    poses = integrate_ct(Pose.identity(), [10.0] * 200, [0.05] * 200, 0.1, 200)
    r = np.linalg.norm(positions(poses) - [0, 20, 0], axis=1)
    np.testing.assert_allclose(r, 20.0, atol=1e-9)


# ---------------------------------------------------------------- residuals


def test_measurement_residual_examples():
    M = Pose(so3_exp([0.2, -0.1, 0.4]), [3, 1, -2])
    np.testing.assert_allclose(residual_measurement(M, M), np.zeros(6), atol=1e-15)
    r = residual_measurement(compose(M, Pose(np.eye(3), [0.2, 0, 0])), M)
    assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-12)
    r = residual_measurement(compose(M, rot_z(0.1)), M)
    np.testing.assert_allclose(r, [0, 0, 1.0, 0, 0, 0], atol=1e-12)


def test_motion_residual_exact_states_vanish():
    T0 = Pose(so3_exp([0, 0, 0.7]), [5, -3, 1])
    T1 = ct_predict(T0, 12.0, 0.04, 0.1)
    np.testing.assert_allclose(residual_motion(T0, 12.0, 0.04, T1, np.eye(3), 0.1), 0, atol=1e-12)


def test_motion_residual_speed_mismatch():
    T0 = Pose.identity()
    T1 = ct_predict(T0, 10.0, 0.0, 0.1)
    r = residual_motion(T0, 11.0, 0.0, T1, np.eye(3), 0.1)
    np.testing.assert_allclose(r, [0, 0, 0, -0.5, 0, 0], atol=1e-12)


def test_motion_residual_shared_rotation_absorbs_axis_swap():
    T0 = Pose(so3_exp([0, 0, 0.3]), [1, 2, 0])
    T1 = ct_predict(T0, 8.0, 0.05, 0.1)
    Q = rot_z(np.pi / 2)
    r = residual_motion(compose(T0, Q), 8.0, 0.05, compose(T1, Q), rot_z(-np.pi / 2).rotation, 0.1)
    np.testing.assert_allclose(r, 0, atol=1e-12)


def test_random_walk_examples():
    assert residual_random_walk(3.0, 3.0, 0.1, "speed") == 0.0
    # mpmath: 1/sqrt(0.05)
    assert residual_random_walk(0.0, 1.0, 0.1, "speed") == pytest.approx(4.4721359549995793928, abs=1e-12)
    assert residual_random_walk(0.0, 0.001, 0.1, "curvature") == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        residual_random_walk(0, 1, 0.0, "speed")
    with pytest.raises(ValueError):
        residual_random_walk(0, 1, 0.1, "yaw")


def test_attitude_and_curvature_priors():
    np.testing.assert_array_equal(residual_attitude_prior(rot_z(1.0), np.eye(3)), [0.0, 0.0])
    r = residual_attitude_prior(Pose(rot_x(0.4), np.zeros(3)), np.eye(3))
    np.testing.assert_allclose(r, [1.0, 0.0], atol=1e-12)
    # the prior is taken after the shared rotation
    r = residual_attitude_prior(Pose(rot_x(0.4), np.zeros(3)), rot_x(-0.4))
    np.testing.assert_allclose(r, [0.0, 0.0], atol=1e-12)
    assert residual_curvature_prior(0.02) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(GimbalLock):
        residual_attitude_prior(Pose(rot_y(np.pi / 2), np.zeros(3)), np.eye(3))


# ---------------------------------------------------------------- graph


def graph_for(state, rng, params=SmoothParams()):
    n = len(state)
    times = np.round(np.arange(n) * 0.1, 10)
    idx = np.sort(rng.choice(n, max(2, n - 3), replace=False))
    meas = [Pose(state.rotations[i] @ so3_exp(rng.normal(0, 0.15, 3)), state.translations[i] + rng.normal(0, 0.5, 3)) for i in idx]
    return FactorGraph(times, idx, meas, params)


def numeric_gradient(graph, state, kinds, h=1e-6):
    g = np.empty(state.dim)
    for i in range(state.dim):
        e = np.zeros(state.dim)
        e[i] = h
        g[i] = (graph.cost(state.retract(e), kinds) - graph.cost(state.retract(-e), kinds)) / (2 * h)
    return g


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(KINDS.index(kind))
    for _ in range(5):
        state = random_state(rng, 8)
        graph = graph_for(state, rng)
        g = graph.gradient(state, [kind])
        ref = numeric_gradient(graph, state, [kind])
        assert np.linalg.norm(g - ref) <= 1e-4 * np.linalg.norm(ref) + 1e-8


def test_graph_requires_increasing_times():
    with pytest.raises(ValueError):
        FactorGraph(np.array([0.0, 0.2, 0.1]), np.array([0]), [Pose()])


def test_graph_rejects_off_grid_measurement():
    with pytest.raises(ValueError):
        FactorGraph(np.array([0.0, 0.1]), np.array([2]), [Pose()])


def test_state_dimension():
    state = random_state(np.random.default_rng(0), 7)
    assert state.dim == 8 * 7 + 3
    J, r = graph_for(state, np.random.default_rng(1)).linearize(state)
    assert J.shape == (len(r), state.dim)


def test_optimize_at_truth_changes_nothing():
    times, poses, _ = ct_truth(0, frames=20, turning=False)
    v = np.linalg.norm(poses[1].translation - poses[0].translation) / 0.1
    state = SmootherState(
        np.array([p.rotation for p in poses]), positions(poses), np.full(20, v), np.zeros(20), np.eye(3)
    )
    graph = FactorGraph(times, np.arange(20), poses)
    assert graph.cost(state) < 1e-20
    out, cost = optimize(graph, state)
    assert cost < 1e-20
    np.testing.assert_allclose(out.translations, state.translations, atol=1e-12)


def test_optimize_never_increases_cost():
    rng = np.random.default_rng(4)
    for _ in range(5):
        state = random_state(rng, 15)
        graph = graph_for(state, rng)
        c0 = graph.cost(state)
        for it in range(1, 5):
            _, c = optimize(graph, state, it)
            assert c <= c0 + 1e-12
            c0 = c


def test_initial_state_fills_gaps():
    poses = [Pose(np.eye(3), [x, 0, 0]) for x in (0.0, 1.0, 4.0)]
    times = np.round(np.arange(6) * 0.1, 10)
    s = initial_state(times, np.array([0, 1, 4]), poses)
    np.testing.assert_allclose(s.translations[:, 0], [0, 1, 2, 3, 4, 4])
    np.testing.assert_allclose(s.speeds, [10, 10, 10, 10, 0, 0])
    np.testing.assert_array_equal(s.curvatures, 0)


def test_initial_shared_rotation_points_along_motion():
    # object local y-axis is the direction of travel
    poses = [Pose(np.eye(3), [0, y, 0]) for y in np.arange(5.0)]
    s = initial_state(np.arange(5) * 0.1, np.arange(5), poses)
    np.testing.assert_allclose(s.shared_rotation, rot_z(np.pi / 2).rotation, atol=1e-12)


# ---------------------------------------------------------------- smoothing


def test_clean_trajectory_no_rejections():
    for seed in range(6):
        times, gt, rng = ct_truth(seed)
        meas = noisy_measurements(gt, 0.02, 0.01, rng)
        s = smooth(as_measured(meas, times))
        assert not s.rejected and not s.is_static
        assert rmse(s.positions, positions(gt)) <= rmse(positions(meas), positions(gt))


def test_noisy_trajectory_improves():
    for seed in range(10):
        times, gt, rng = ct_truth(seed)
        meas = noisy_measurements(gt, 0.2, 0.1, rng)
        s = smooth(as_measured(meas, times))
        assert rmse(s.positions, positions(gt)) < rmse(positions(meas), positions(gt))


def test_single_gross_outlier_rejected():
    times, gt, rng = ct_truth(3)
    meas = noisy_measurements(gt, 0.02, 0.01, rng)
    meas[17] = Pose(meas[17].rotation, meas[17].translation + [3, -4, 0])
    s = smooth(as_measured(meas, times))
    assert s.rejected == {times[17]}
    assert np.linalg.norm(s.positions[17] - gt[17].translation) < 0.2


def test_gap_is_bridged():
    times, gt, rng = ct_truth(5)
    meas = noisy_measurements(gt, 0.05, 0.02, rng)
    keep = [k for k in range(50) if not 20 <= k < 30]
    s = smooth(as_measured([meas[k] for k in keep], times[keep]), times=times)
    assert len(s.times) == 50
    assert s.measured == set(times[keep].tolist())
    err = np.linalg.norm(s.positions - positions(gt), axis=1)
    assert err[20:30].max() < 0.5
    # inside the gap the states follow the motion model
    r = [residual_motion(s.state.pose(k), s.state.speeds[k], s.state.curvatures[k], s.state.pose(k + 1), s.state.shared_rotation, 0.1) for k in range(20, 29)]
    assert np.linalg.norm(r, axis=1).max() < 1.0


def test_smooth_idempotent():
    times, gt, rng = ct_truth(7)
    meas = noisy_measurements(gt, 0.2, 0.1, rng)
    first = smooth(as_measured(meas, times))
    second = smooth(as_measured(first.poses(), times))
    assert second.rejected == set()


@pytest.mark.parametrize("yaw", [0.7, -2.0, np.pi / 2])
def test_local_axis_equivariance(yaw):
    times, gt, rng = ct_truth(9)
    meas = noisy_measurements(gt, 0.05, 0.02, rng)
    Q = rot_z(yaw)
    a = smooth(as_measured(meas, times))
    b = smooth(as_measured([compose(m, Q) for m in meas], times))
    for pa, pb in zip(a.poses(), b.poses()):
        assert compose(pa, Q).allclose(pb, 1e-4)
    np.testing.assert_allclose(b.state.shared_rotation, Q.rotation.T @ a.state.shared_rotation, atol=1e-4)


def test_world_yaw_equivariance():
    times, gt, rng = ct_truth(11)
    meas = noisy_measurements(gt, 0.05, 0.02, rng)
    Q = Pose(rot_z(1.1).rotation, [3, -2, 0.5])
    a = smooth(as_measured(meas, times))
    b = smooth(as_measured([compose(Q, m) for m in meas], times))
    for pa, pb in zip(a.poses(), b.poses()):
        assert compose(Q, pa).allclose(pb, 1e-4)


def test_static_instance_is_constant():
    rng = np.random.default_rng(0)
    base = Pose(rot_z(0.4).rotation, [10, 5, 0])
    meas = noisy_measurements([base] * 20, 0.05, 0.01, rng)
    s = smooth(as_measured(meas, np.arange(20) * 0.1))
    assert s.is_static and not s.rejected
    assert np.ptp(s.state.translations, axis=0).max() == 0.0
    assert np.linalg.norm(s.state.translations[0] - base.translation) < 0.05
    np.testing.assert_allclose(s.state.rotations[0].T @ s.state.rotations[0], np.eye(3), atol=1e-12)


def test_all_rejected_raises():
    # two far-apart alternating clusters cannot both fit a smooth track
    times = np.arange(4) * 0.1
    meas = [Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [50, 0, 0]), Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [50, 0, 0])]
    params = SmoothParams(outlier_threshold=1e-6)
    with pytest.raises(AllMeasurementsRejected):
        smooth(as_measured(meas, times), params=params)


def test_classify_static_examples():
    assert classify_static([Pose()])
    assert classify_static([Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [0.9, 0, 0])])
    assert not classify_static([Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [1.0, 0, 0])])
    assert not classify_static([Pose(np.eye(3), [x, 0, 0]) for x in range(6)])
