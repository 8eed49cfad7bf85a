"""Procedural terrain, a ray-marched LiDAR and per-step map estimates with exact oracle maps.

The world is a smooth heightfield (a sum of Gaussian bumps) with flat-topped
cylindrical obstacles draped on it. Every quantity has a closed form, so the
oracle maps are exact and every simulated return can be checked analytically.

The LiDAR models beam divergence: a beam reports the nearest surface within
its footprint (the central ray plus four rays on the cone edge), along the central
direction. At grazing angles this places far ground returns slightly above
the terrain, which is the error that hindsight fusion removes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import PointCloud, Pose2, Pose3, Trajectory, gravity_align, quat_from_euler
from .gridmap import ELEVATION, RELIABILITY, TRAVERSABILITY, GridMap, GridSpec, cell_centers, points_to_cells

TRAJECTORY_TYPES = ("loop", "line", "figure8")
BUMP_CUTOFF = 6.0


@dataclass(eq=False)
class WorldSpec:
    seed: int
    extent: float
    bumps: np.ndarray  # (M, 4): cx, cy, amplitude, sigma
    obstacles: np.ndarray  # (K, 5): cx, cy, radius, height, cost
    trajectory: Trajectory
    base_height: float = 0.0
    _ceiling: float | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.bumps = np.asarray(self.bumps, dtype=np.float64).reshape(-1, 4)
        self.obstacles = np.asarray(self.obstacles, dtype=np.float64).reshape(-1, 5)
        if np.any(self.obstacles[:, 4] < 0) or np.any(self.obstacles[:, 4] > 1):
            raise ValueError("obstacle cost must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "extent": self.extent,
            "base_height": self.base_height,
            "bumps": self.bumps.tolist(),
            "obstacles": self.obstacles.tolist(),
        }


@dataclass(frozen=True)
class SensorSpec:
    channels: int = 16
    vertical_fov: tuple[float, float] = (-25.0, 5.0)  # degrees
    azimuth_resolution: float = 0.5  # degrees
    max_range: float = 40.0
    min_range: float = 0.5
    rate: float = 10.0  # Hz
    mount: tuple[float, float, float] = (0.0, 0.0, 1.5)  # sensor origin in the base frame
    beam_divergence: float = 0.003  # full cone angle, rad
    march_step: float = 0.1
    reliability_scale: float = 5.0  # reliability = 1 - exp(-points / scale)
    step_threshold: float = 0.3  # height spread above which a cell is a hazard

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if self.channels < 1 or self.azimuth_resolution <= 0 or self.march_step <= 0:
            raise ValueError("invalid beam layout")

    def extrinsic(self) -> Pose3:
        return Pose3(translation=self.mount)

    def beam_directions(self) -> np.ndarray:
        """Central unit directions (sensor frame), channel-major."""
        el = np.deg2rad(np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.channels))
        n_az = int(round(360.0 / self.azimuth_resolution))
        az = np.arange(n_az) * (2 * np.pi / n_az)
        return _directions(el[:, None], az[None, :]).reshape(-1, 3)

    def reliability(self, counts) -> np.ndarray:
        return 1.0 - np.exp(-np.asarray(counts, dtype=np.float64) / self.reliability_scale)


def _directions(el, az) -> np.ndarray:
    el, az = np.broadcast_arrays(el, az)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


# --------------------------------------------------------------------------- #
# analytic world


def terrain_height(world: WorldSpec, x, y) -> np.ndarray:
    """Base height plus Gaussian bumps, each truncated to zero beyond BUMP_CUTOFF sigmas."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.full(np.broadcast(x, y).shape, world.base_height)
    for cx, cy, amp, sigma in world.bumps:
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        bump = amp * np.exp(-d2 / (2.0 * sigma * sigma))
        z = z + np.where(d2 < (BUMP_CUTOFF * sigma) ** 2, bump, 0.0)
    return z


def _obstacle_max(world: WorldSpec, x, y, column: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    for ob in world.obstacles:
        inside = (x - ob[0]) ** 2 + (y - ob[1]) ** 2 <= ob[2] * ob[2]
        out = np.where(inside, np.maximum(out, ob[column]), out)
    return out


def surface_height(world: WorldSpec, x, y) -> np.ndarray:
    """Terrain plus the height of any obstacle covering (x, y)."""
    return terrain_height(world, x, y) + _obstacle_max(world, x, y, 3)


def obstacle_cost(world: WorldSpec, x, y) -> np.ndarray:
    return _obstacle_max(world, x, y, 4)


def terrain_gradient(world: WorldSpec, x: float, y: float) -> tuple[float, float]:
    gx = gy = 0.0
    for cx, cy, amp, sigma in world.bumps:
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        if d2 >= (BUMP_CUTOFF * sigma) ** 2:
            continue
        e = amp * math.exp(-d2 / (2.0 * sigma * sigma))
        gx -= e * (x - cx) / (sigma * sigma)
        gy -= e * (y - cy) / (sigma * sigma)
    return gx, gy


# --------------------------------------------------------------------------- #
# world generation


def _path(kind: str, s: np.ndarray, radius: float) -> np.ndarray:
    """Planar path for curve parameter s in [0, 1]."""
    a = 2 * np.pi * s
    if kind == "loop":
        return np.stack([radius * np.cos(a), radius * np.sin(a)], axis=-1)
    if kind == "figure8":
        return np.stack([radius * np.sin(a), radius * np.sin(a) * np.cos(a)], axis=-1)
    if kind == "line":
        return np.stack([radius * (2 * s - 1), np.zeros_like(s)], axis=-1)
    raise ValueError(f"unknown trajectory type {kind!r}; expected one of {TRAJECTORY_TYPES}")


def make_trajectory(world: WorldSpec, kind: str, duration: float, radius: float,
                    sample_rate: float = 10.0, ground_clearance: float = 0.5) -> Trajectory:
    """Base-frame poses following the terrain: yaw along the path, roll/pitch from the slope."""
    n = int(round(duration * sample_rate)) + 1
    times = np.linspace(0.0, duration, n)
    s = times / duration
    xy = _path(kind, s, radius)
    ahead = _path(kind, np.minimum(s + 1e-4, 1.0), radius) - _path(kind, np.maximum(s - 1e-4, 0.0), radius)
    poses = []
    for (x, y), (dx, dy) in zip(xy, ahead):
        yaw = math.atan2(dy, dx)
        gx, gy = terrain_gradient(world, x, y)
        # slope along and across the heading
        along = gx * math.cos(yaw) + gy * math.sin(yaw)
        across = -gx * math.sin(yaw) + gy * math.cos(yaw)
        pitch = -math.atan(along)
        roll = math.atan(across)
        z = float(terrain_height(world, x, y)) + ground_clearance
        poses.append(Pose3(quat_from_euler(roll, pitch, yaw), (x, y, z)))
    return Trajectory(times, poses)


def make_world(
    seed: int = 0,
    extent: float = 100.0,
    n_obstacles: int = 10,
    n_bumps: int = 8,
    trajectory: str = "loop",
    duration: float = 120.0,
    path_radius: float | None = None,
) -> WorldSpec:
    """Random world whose obstacles sit a few meters off the vehicle path."""
    rng = np.random.default_rng(seed)
    half = extent / 2.0
    radius = path_radius if path_radius is not None else 0.25 * extent
    bumps = np.column_stack(
        [
            rng.uniform(-half, half, n_bumps),
            rng.uniform(-half, half, n_bumps),
            rng.uniform(-1.5, 1.5, n_bumps),
            rng.uniform(4.0, 10.0, n_bumps),
        ]
    )
    path = _path(trajectory, np.linspace(0.0, 1.0, 2001), radius)
    obstacles: list[list[float]] = []
    attempts = 0
    while len(obstacles) < n_obstacles:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place obstacles; reduce their number")
        r = rng.uniform(0.6, 2.0)
        height = rng.uniform(0.6, 1.4)
        cost = 1.0 if rng.random() < 0.8 else rng.uniform(0.3, 0.8)
        anchor = path[rng.integers(len(path))]
        offset = rng.uniform(r + 2.5, r + 9.0)
        angle = rng.uniform(0, 2 * np.pi)
        c = anchor + offset * np.array([math.cos(angle), math.sin(angle)])
        if np.min(np.hypot(*(path - c).T)) < r + 2.5:
            continue
        if np.any(np.abs(c) > half - r):
            continue
        if any(math.hypot(c[0] - o[0], c[1] - o[1]) < r + o[2] + 1.0 for o in obstacles):
            continue
        obstacles.append([float(c[0]), float(c[1]), r, height, cost])
    world = WorldSpec(seed, extent, bumps, np.array(obstacles).reshape(-1, 5), Trajectory([0.0], [Pose3()]))
    world.trajectory = make_trajectory(world, trajectory, duration, radius)
    return world


# --------------------------------------------------------------------------- #
# LiDAR


@numba.njit(cache=True, nogil=True)
def _terrain(x, y, base, bumps):
    z = base
    for i in range(bumps.shape[0]):
        dx = x - bumps[i, 0]
        dy = y - bumps[i, 1]
        s = bumps[i, 3]
        d2 = dx * dx + dy * dy
        if d2 < (BUMP_CUTOFF * s) * (BUMP_CUTOFF * s):
            z += bumps[i, 2] * math.exp(-d2 / (2.0 * s * s))
    return z


@numba.njit(cache=True, nogil=True)
def _obstacle_top(x, y, obstacles):
    top = 0.0
    for k in range(obstacles.shape[0]):
        dx = x - obstacles[k, 0]
        dy = y - obstacles[k, 1]
        if dx * dx + dy * dy <= obstacles[k, 2] * obstacles[k, 2] and obstacles[k, 3] > top:
            top = obstacles[k, 3]
    return top


@numba.njit(cache=True, nogil=True)
def _clear_of_obstacles(ox, oy, dx, dy, t0, t1, obstacles):
    """True if the planar segment of the ray over [t0, t1] stays outside every obstacle."""
    for k in range(obstacles.shape[0]):
        px = obstacles[k, 0] - ox
        py = obstacles[k, 1] - oy
        hn = math.sqrt(dx * dx + dy * dy)
        if hn == 0.0:
            s = t0
        else:
            s = (px * dx + py * dy) / (hn * hn)
            s = min(max(s, t0), t1)
        qx = dx * s - px
        qy = dy * s - py
        r = obstacles[k, 2] + 1e-6
        if qx * qx + qy * qy <= r * r:
            return False
    return True


@numba.njit(cache=True, nogil=True)
def _march(origins, dirs, base, bumps, obstacles, step, min_range, max_range, z_ceiling, slope):
    """First-hit range per ray on the fixed grid t_k = min_range + k * step, or -1.

    Samples are skipped only where a slope bound proves the ray stays above the
    terrain and no obstacle lies below it, so the bracketing sample pair is the
    same one a plain fixed-step march would find.
    """
    n = dirs.shape[0]
    out = np.full(n, -1.0)
    n_steps = int(math.ceil((max_range - min_range) / step))
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        rate = abs(dz) + slope * math.sqrt(dx * dx + dy * dy)
        t_prev = min_range
        x, y = ox + dx * t_prev, oy + dy * t_prev
        f_terrain = oz + dz * t_prev - _terrain(x, y, base, bumps)
        f_prev = f_terrain - _obstacle_top(x, y, obstacles)
        if f_prev <= 0.0:
            continue
        k = 0
        while k < n_steps:
            if rate > 0.0:
                skip = int(math.floor(0.999 * f_terrain / (rate * step))) - 1
                if skip >= 2 and k + skip < n_steps:
                    t_far = min_range + (k + skip) * step
                    if _clear_of_obstacles(ox, oy, dx, dy, t_prev, t_far, obstacles):
                        k += skip
                        t_prev = t_far
                        x, y = ox + dx * t_prev, oy + dy * t_prev
                        f_terrain = oz + dz * t_prev - _terrain(x, y, base, bumps)
                        f_prev = f_terrain - _obstacle_top(x, y, obstacles)
            k += 1
            t = min(min_range + k * step, max_range)
            z = oz + dz * t
            if dz >= 0.0 and z > z_ceiling:
                break
            x, y = ox + dx * t, oy + dy * t
            f_terrain = z - _terrain(x, y, base, bumps)
            f = f_terrain - _obstacle_top(x, y, obstacles)
            if f <= 0.0:
                a, b, fa, fb = t_prev, t, f_prev, f
                m = 0.5 * (a + b)
                fm = oz + dz * m - _terrain(ox + dx * m, oy + dy * m, base, bumps) \
                    - _obstacle_top(ox + dx * m, oy + dy * m, obstacles)
                if fm <= 0.0:
                    b, fb = m, fm
                else:
                    a, fa = m, fm
                out[i] = a + (b - a) * fa / (fa - fb)
                break
            t_prev, f_prev = t, f
    return out


def terrain_slope_bound(world: WorldSpec) -> float:
    """Upper bound on the terrain gradient norm: a Gaussian's slope never exceeds amp / (sigma sqrt(e))."""
    if not len(world.bumps):
        return 0.0
    return float(np.sum(np.abs(world.bumps[:, 2]) / (world.bumps[:, 3] * math.sqrt(math.e))))


def height_ceiling(world: WorldSpec) -> float:
    """Upper bound on the surface height anywhere (bumps vanish beyond their cutoff)."""
    if world._ceiling is None:
        reach = BUMP_CUTOFF * world.bumps[:, 3].max() if len(world.bumps) else 0.0
        half = 0.5 * world.extent + reach
        spacing = 0.5
        g = np.arange(-half, half + spacing, spacing)
        sampled = float(terrain_height(world, g[:, None], g[None, :]).max())
        slope = terrain_slope_bound(world)
        tallest = float(world.obstacles[:, 3].max()) if len(world.obstacles) else 0.0
        world._ceiling = sampled + slope * spacing + tallest
    return world._ceiling


def cast_rays(world: WorldSpec, origins, directions, sensor: SensorSpec) -> np.ndarray:
    """Ranges to the first surface along world-frame rays (-1 for no return)."""
    origins = np.ascontiguousarray(np.broadcast_to(origins, np.shape(directions)), dtype=np.float64)
    dirs = np.ascontiguousarray(directions, dtype=np.float64)
    top = height_ceiling(world)
    return _march(
        origins, dirs, float(world.base_height), world.bumps, world.obstacles,
        float(sensor.march_step), float(sensor.min_range), float(sensor.max_range), top + 1e-6,
        terrain_slope_bound(world),
    )


def _footprint_directions(sensor: SensorSpec) -> np.ndarray:
    """(n_beams, 5, 3): central ray followed by the upper, lower, left and right cone edges."""
    el = np.deg2rad(np.linspace(sensor.vertical_fov[0], sensor.vertical_fov[1], sensor.channels))
    n_az = int(round(360.0 / sensor.azimuth_resolution))
    az = np.arange(n_az) * (2 * np.pi / n_az)
    el, az = np.meshgrid(el, az, indexing="ij")
    el, az = el.ravel(), az.ravel()
    half = 0.5 * sensor.beam_divergence
    daz = half / np.maximum(np.cos(el), 1e-6)
    return np.stack(
        [
            _directions(el, az),
            _directions(el + half, az),
            _directions(el - half, az),
            _directions(el, az + daz),
            _directions(el, az - daz),
        ],
        axis=1,
    )


def sensor_pose(base_pose: Pose3, sensor: SensorSpec) -> Pose3:
    return base_pose @ sensor.extrinsic()


def simulate_scan(world: WorldSpec, pose: Pose3, sensor: SensorSpec = SensorSpec(), stamp: float = 0.0) -> PointCloud:
    """One instantaneous sweep from base pose ``pose``; points are returned in the sensor frame."""
    sp = sensor_pose(pose, sensor)
    local = _footprint_directions(sensor)
    n_beams = local.shape[0]
    if sensor.beam_divergence == 0:
        local = local[:, :1]
    world_dirs = local.reshape(-1, 3) @ sp.rotation_matrix.T
    ranges = cast_rays(world, sp.translation, world_dirs, sensor).reshape(n_beams, -1)
    ranges = np.where(ranges < 0, np.inf, ranges).min(axis=1)
    hit = np.isfinite(ranges)
    pts = local[hit, 0] * ranges[hit, None]
    return PointCloud(pts, np.full(len(pts), float(stamp)), 0, stamp)


def scan_to_world(cloud: PointCloud, base_pose: Pose3, sensor: SensorSpec) -> PointCloud:
    return cloud.transformed(sensor_pose(base_pose, sensor))


# --------------------------------------------------------------------------- #
# maps


def _world_cell_centers(pose: Pose2, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = cell_centers(spec)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    w = pose.apply(np.stack([gx, gy], axis=-1))
    return w[..., 0], w[..., 1]


def oracle_maps(world: WorldSpec, pose: Pose2, spec: GridSpec, timestamp: float = 0.0) -> GridMap:
    """Exact elevation (terrain + obstacles) and obstacle cost at every cell center."""
    x, y = _world_cell_centers(pose, spec)
    out = GridMap(spec.with_pose(pose), timestamp=timestamp)
    out.set_layer(ELEVATION, surface_height(world, x, y))
    out.set_layer(TRAVERSABILITY, obstacle_cost(world, x, y))
    return out


def estimate_maps(
    scans: list[PointCloud],
    pose: Pose2,
    spec: GridSpec,
    sensor: SensorSpec = SensorSpec(),
    world: WorldSpec | None = None,
    timestamp: float | None = None,
) -> GridMap:
    """Single-step map from registered scans (points in the odometry frame).

    Elevation is the lowest point per cell. A cell is a hazard (1) when its points
    span more than ``sensor.step_threshold`` in height; with ``world`` given, the
    true obstacle cost at observed cells is blended in by taking the maximum.
    Reliability saturates with the per-cell point count. Cells without points
    are invalid.
    """
    stamp = timestamp if timestamp is not None else (max(s.stamp for s in scans) if scans else 0.0)
    out = GridMap(spec.with_pose(pose), timestamp=stamp)
    h, w = spec.shape
    pts = np.concatenate([s.points for s in scans]) if scans else np.zeros((0, 3))
    local = pose.inverse().apply(pts[:, :2]) if len(pts) else np.zeros((0, 2))
    rows, cols, inside = points_to_cells(spec, local)
    flat = rows[inside] * w + cols[inside]
    z = pts[inside, 2]
    count = np.bincount(flat, minlength=h * w).reshape(h, w)
    zmin = np.full(h * w, np.inf)
    zmax = np.full(h * w, -np.inf)
    np.minimum.at(zmin, flat, z)
    np.maximum.at(zmax, flat, z)
    zmin, zmax = zmin.reshape(h, w), zmax.reshape(h, w)
    seen = count > 0
    spread = np.where(seen, zmax - zmin, 0.0)
    trav = (spread > sensor.step_threshold).astype(np.float64)
    if world is not None:
        x, y = _world_cell_centers(pose, spec)
        trav = np.maximum(trav, obstacle_cost(world, x, y))
    out.set_layer(ELEVATION, np.where(seen, zmin, 0.0), seen)
    out.set_layer(TRAVERSABILITY, np.where(seen, trav, 0.0), seen)
    out.set_layer(RELIABILITY, np.where(seen, sensor.reliability(count), 0.0), seen)
    return out


@dataclass
class Step:
    index: int
    time: float
    pose: Pose3  # base frame in the odometry frame
    cloud: PointCloud  # registered, odometry frame
    estimate: GridMap
    oracle: GridMap

    @property
    def pose2(self) -> Pose2:
        return gravity_align(self.pose).to_pose2()


def step_times(world: WorldSpec, rate: float = 1.0) -> np.ndarray:
    """Scan times along the world trajectory, ``rate`` per second starting at its first sample."""
    traj = world.trajectory
    n = int(math.floor((traj.end - traj.start) * rate + 1e-9)) + 1
    return traj.start + np.arange(n) / rate


def simulate_step(world: WorldSpec, sensor: SensorSpec, spec: GridSpec, index: int, time: float,
                  with_oracle: bool = True, blend_cost: bool = True) -> Step:
    base = world.trajectory.pose_at(time)
    scan = scan_to_world(simulate_scan(world, base, sensor, time), base, sensor)
    p2 = gravity_align(base).to_pose2()
    est = estimate_maps([scan], p2, spec, sensor, world if blend_cost else None, time)
    orc = oracle_maps(world, p2, spec, time) if with_oracle else None
    return Step(index, time, base, scan, est, orc)


def simulate_steps(world: WorldSpec, sensor: SensorSpec, spec: GridSpec, rate: float = 1.0,
                   with_oracle: bool = True, blend_cost: bool = True):
    """Yield one ``Step`` per scan along the world trajectory, ``rate`` scans per second."""
    for i, t in enumerate(step_times(world, rate)):
        yield simulate_step(world, sensor, spec, i, float(t), with_oracle, blend_cost)
