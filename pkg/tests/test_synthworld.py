import math

import numpy as np
import pytest

from hbev.geometry import PointCloud, Pose2, Pose3, Trajectory, gravity_align
from hbev.gridmap import ELEVATION, RELIABILITY, TRAVERSABILITY, GridSpec, Layer, cell_centers, points_to_cells
from hbev.hindsight import FusionPolicy, compute_hindsight, select_window
from hbev.metrics import hazard_classify, mae
from hbev.postproc import fill_nearest
from hbev.synthworld import (
    SensorSpec,
    WorldSpec,
    _march,
    cast_rays,
    estimate_maps,
    make_world,
    oracle_maps,
    scan_to_world,
    simulate_scan,
    simulate_steps,
    surface_height,
    terrain_height,
    terrain_slope_bound,
)
from oracles import ray_cylinder

STILL = Trajectory([0.0, 1.0], [Pose3(), Pose3()])


def flat_world(obstacles=(), height=0.0) -> WorldSpec:
    return WorldSpec(0, 60.0, np.zeros((0, 4)), np.array(obstacles, dtype=float).reshape(-1, 5), STILL, height)


def test_world_validation():
    with pytest.raises(ValueError):
        flat_world([[0, 0, 1, 1, 1.5]])
    with pytest.raises(ValueError):
        SensorSpec(max_range=0.0)
    with pytest.raises(ValueError):
        make_world(trajectory="spiral")


def test_oracle_flat_world():
    spec = GridSpec(20, 20, 0.5)
    m = oracle_maps(flat_world(height=1.25), Pose2(0.3, (2.0, -1.0)), spec)
    assert np.all(m.layers[ELEVATION] == 1.25) and np.all(m.layers[TRAVERSABILITY] == 0.0)
    assert m.valid[ELEVATION].all() and m.valid[TRAVERSABILITY].all()


def test_oracle_obstacle_footprint():
    spec = GridSpec(20, 20, 0.5)
    world = flat_world([[1.0, -2.0, 1.3, 2.0, 1.0]])
    m = oracle_maps(world, Pose2(), spec)
    xs, ys = cell_centers(spec)
    inside = (xs[:, None] - 1.0) ** 2 + (ys[None, :] + 2.0) ** 2 <= 1.3**2
    np.testing.assert_array_equal(m.layers[TRAVERSABILITY] == 1.0, inside)
    np.testing.assert_array_equal(m.layers[ELEVATION], np.where(inside, 2.0, 0.0))


def test_oracle_bump_world_closed_form():
    world = make_world(seed=3, extent=40.0, n_obstacles=0, duration=10.0)
    spec = GridSpec(24, 24, 0.5)
    pose = Pose2(0.7, (3.0, 4.0))
    m = oracle_maps(world, pose, spec)
    xs, ys = cell_centers(spec)
    for r in range(0, 24, 5):
        for c in range(0, 24, 7):
            wx, wy = pose.apply(np.array([xs[r], ys[c]]))
            expected = world.base_height
            for cx, cy, amp, sigma in world.bumps:
                d2 = (wx - cx) ** 2 + (wy - cy) ** 2
                if d2 < (6 * sigma) ** 2:
                    expected += amp * math.exp(-d2 / (2 * sigma**2))
            assert m.layers[ELEVATION][r, c] == np.float32(expected) or abs(m.layers[ELEVATION][r, c] - expected) < 1e-6


def test_vertical_beam_hits_ground_below():
    sensor = SensorSpec()
    r = cast_rays(flat_world(), np.array([[3.0, 4.0, 2.0]]), np.array([[0.0, 0.0, -1.0]]), sensor)
    assert abs(r[0] - 2.0) < 1e-9


def test_beam_above_horizon_escapes():
    sensor = SensorSpec()
    d = np.array([[math.cos(0.05), 0.0, math.sin(0.05)]])
    assert cast_rays(flat_world(), np.array([[0.0, 0.0, 1.5]]), d, sensor)[0] == -1.0
    horizontal = np.array([[1.0, 0.0, 0.0]])
    assert cast_rays(flat_world(), np.array([[0.0, 0.0, 1.5]]), horizontal, sensor)[0] == -1.0


@pytest.mark.parametrize("angle", [0.0, 0.3, -1.1, 2.5])
def test_wall_hit_matches_ray_cylinder(angle):
    radius = 1.5
    center = (10.0 + radius) * np.array([math.cos(angle), math.sin(angle)])
    world = flat_world([[center[0], center[1], radius, 3.0, 1.0]])
    sensor = SensorSpec()
    origin = np.array([0.0, 0.0, 1.0])
    for dz in (0.0, -0.05, 0.1):
        d = np.array([math.cos(angle + 0.02), math.sin(angle + 0.02), dz])
        d /= np.linalg.norm(d)
        expected = ray_cylinder(origin, d, center, radius, 0.0, 3.0)
        got = cast_rays(world, origin[None], d[None], sensor)[0]
        assert expected is not None and abs(expected - 10.0) < 0.2
        assert abs(got - expected) <= sensor.march_step


def test_obstacle_top_hit():
    world = flat_world([[5.0, 0.0, 2.0, 1.0, 1.0]])
    d = np.array([0.6, 0.0, -0.8])
    origin = np.array([0.0, 0.0, 5.0])
    expected = ray_cylinder(origin, d, (5.0, 0.0), 2.0, 0.0, 1.0)
    got = cast_rays(world, origin[None], d[None], SensorSpec())[0]
    assert abs(got - expected) <= 0.1


def test_skipping_march_matches_plain_march():
    world = make_world(seed=1, extent=60.0, n_obstacles=6, duration=10.0)
    sensor = SensorSpec(azimuth_resolution=4.0)
    pose = world.trajectory.pose_at(3.0)
    origin = (pose @ sensor.extrinsic()).translation
    dirs = sensor.beam_directions() @ pose.rotation_matrix.T
    origins = np.ascontiguousarray(np.broadcast_to(origin, dirs.shape))
    args = (world.base_height, world.bumps, world.obstacles, sensor.march_step, sensor.min_range,
            sensor.max_range, 1e9)
    fast = _march(origins, dirs, *args, terrain_slope_bound(world))
    plain = _march(origins, dirs, *args, math.inf)
    np.testing.assert_array_equal(fast, plain)
    assert np.count_nonzero(fast > 0) > len(fast) // 2


def test_scan_hits_lie_on_surface():
    world = make_world(seed=2, extent=60.0, n_obstacles=8, duration=10.0)
    sensor = SensorSpec(azimuth_resolution=2.0, beam_divergence=0.0)
    pose = world.trajectory.pose_at(5.0)
    cloud = scan_to_world(simulate_scan(world, pose, sensor), pose, sensor)
    assert len(cloud) > 0
    x, y, zp = cloud.points.T
    z = surface_height(world, x, y)
    ground = np.abs(zp - terrain_height(world, x, y))
    on_surface = np.abs(zp - z) < 0.05
    # side hits land on the wall to within one march step of the crossing
    gap = np.hypot(x[:, None] - world.obstacles[:, 0], y[:, None] - world.obstacles[:, 1]) - world.obstacles[:, 2]
    near_wall = np.any((np.abs(gap) < sensor.march_step) & (zp[:, None] <= z[:, None] + world.obstacles[:, 3]), axis=1)
    assert np.all(on_surface | near_wall)
    assert np.mean(ground < 0.05) > 0.5


def test_occlusion_shadow_receives_no_points():
    world = flat_world([[8.0, 0.0, 1.0, 3.0, 1.0]])
    sensor = SensorSpec(azimuth_resolution=0.25, channels=32)
    cloud = scan_to_world(simulate_scan(world, Pose3(), sensor), Pose3(), sensor)
    origin = np.array(sensor.mount)
    hits_obstacle = 0
    for p in cloud.points:
        rng = np.linalg.norm(p - origin)
        d = (p - origin) / rng
        t = ray_cylinder(origin, d, (8.0, 0.0), 1.0, 0.0, 3.0)
        assert t is None or t >= rng - 0.15
        hits_obstacle += t is not None
    assert hits_obstacle > 0
    # nothing lands on the ground directly behind the obstacle
    behind = (cloud.points[:, 0] > 9.5) & (cloud.points[:, 0] < 30) & (np.abs(cloud.points[:, 1]) < 0.5)
    assert not behind.any()


def test_reliability_model():
    sensor = SensorSpec()
    assert sensor.reliability(0) == 0.0
    assert sensor.reliability(5) == pytest.approx(1 - math.exp(-1))
    r = sensor.reliability(np.arange(50))
    assert np.all(np.diff(r) > 0) and r[-1] < 1.0


def test_estimate_without_scans():
    m = estimate_maps([], Pose2(), GridSpec(8, 8, 0.5))
    for name in (ELEVATION, TRAVERSABILITY, RELIABILITY):
        assert not m.valid[name].any()
    assert np.all(m.layers[RELIABILITY] == 0)


def test_estimate_valid_set_equals_hit_cells():
    world = make_world(seed=4, extent=60.0, n_obstacles=8, duration=10.0)
    sensor = SensorSpec(azimuth_resolution=2.0)
    spec = GridSpec(80, 80, 0.25)
    pose = world.trajectory.pose_at(2.0)
    cloud = scan_to_world(simulate_scan(world, pose, sensor), pose, sensor)
    p2 = gravity_align(pose).to_pose2()
    m = estimate_maps([cloud], p2, spec, sensor)
    rows, cols, inside = points_to_cells(spec, p2.inverse().apply(cloud.points[:, :2]))
    hit = np.zeros(spec.shape, bool)
    hit[rows[inside], cols[inside]] = True
    for name in (ELEVATION, TRAVERSABILITY, RELIABILITY):
        np.testing.assert_array_equal(m.valid[name], hit)


def test_dense_flat_scan_elevation_error_below_resolution():
    world = flat_world(height=0.3)
    sensor = SensorSpec(azimuth_resolution=0.25, channels=32)
    spec = GridSpec(64, 64, 0.25)
    cloud = scan_to_world(simulate_scan(world, Pose3(), sensor), Pose3(), sensor)
    m = estimate_maps([cloud], Pose2(), spec, sensor)
    truth = oracle_maps(world, Pose2(), spec)
    assert m.valid[ELEVATION].sum() > 100
    err = np.abs(m.layers[ELEVATION] - truth.layers[ELEVATION])[m.valid[ELEVATION]]
    assert err.max() < spec.resolution


def test_height_step_heuristic():
    sensor = SensorSpec()
    spec = GridSpec(4, 4, 1.0)
    pts = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.5], [-0.5, 0.5, 0.0], [-0.5, 0.5, 0.2]])
    m = estimate_maps([PointCloud(pts)], Pose2(), spec, sensor)
    assert m.layers[TRAVERSABILITY][2, 2] == 1.0 and m.layers[TRAVERSABILITY][1, 2] == 0.0
    assert m.layers[ELEVATION][2, 2] == 0.0


def test_generation_is_deterministic():
    spec = GridSpec(32, 32, 0.5)
    sensor = SensorSpec(azimuth_resolution=3.0)
    runs = []
    for _ in range(2):
        world = make_world(seed=11, extent=50.0, n_obstacles=5, duration=6.0)
        runs.append(list(simulate_steps(world, sensor, spec, rate=1.0)))
    assert len(runs[0]) == 7
    for a, b in zip(*runs):
        assert a.time == b.time
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        assert a.estimate.equals(b.estimate) and a.oracle.equals(b.oracle)


def test_obstacles_near_path_and_trajectory_monotone():
    world = make_world(seed=5, n_obstacles=10)
    assert len(world.obstacles) == 10
    assert np.all(np.diff(world.trajectory.times) > 0)
    assert world.trajectory.end == 120.0


def _coverage_recall(oracle, pred) -> float:
    gt = hazard_classify(oracle.layer(TRAVERSABILITY), 0.9)
    hz = hazard_classify(pred.layer(TRAVERSABILITY), 0.9).values
    return float(np.count_nonzero(gt.values & hz) / np.count_nonzero(gt.values))


@pytest.fixture(scope="module")
def short_drive():
    world = make_world(seed=0, extent=50.0, n_obstacles=6, duration=40.0)
    sensor = SensorSpec(azimuth_resolution=1.0)
    spec = GridSpec(96, 96, 0.25)
    return list(simulate_steps(world, sensor, spec, rate=1.0))


def test_hindsight_lowers_elevation_error(short_drive):
    # missing cells are filled from their nearest valid neighbour in both maps before scoring
    maps = [s.estimate for s in short_drive]
    single, fused = [], []
    for s in short_drive[5:-5:5]:
        gt = compute_hindsight(select_window(maps, s.time, 20.0), s.pose2, timestamp=s.time)
        truth = s.oracle.layer(ELEVATION)
        single.append(mae(truth, fill_nearest(s.estimate.layer(ELEVATION))))
        fused.append(mae(truth, fill_nearest(gt.layer(ELEVATION))))
    assert max(fused) < min(single)


def test_hazard_recall_non_decreasing_in_window(short_drive):
    maps = [s.estimate for s in short_drive]
    ref = short_drive[len(short_drive) // 2]
    recalls = []
    for window in (0.0, 4.0, 10.0, 20.0, 40.0):
        gt = compute_hindsight(select_window(maps, ref.time, window), ref.pose2, FusionPolicy(), timestamp=ref.time)
        recalls.append(_coverage_recall(ref.oracle, gt))
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] > recalls[0]
