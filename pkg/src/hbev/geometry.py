"""Rigid-body frames, point clouds and the pinhole camera model.

Conventions
-----------
* Quaternions are stored as ``(w, x, y, z)`` and kept unit-norm with ``w >= 0``.
* ``Pose3`` maps points from its child frame into its parent frame:
  ``p_parent = R @ p_child + t``.
* Euler angles use the intrinsic Z-Y-X (yaw, pitch, roll) convention.
* Camera frames are optical frames: +z along the optical axis, +x right, +y down.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class GimbalLockError(GeometryError):
    """Yaw is not observable because pitch is at +-pi/2."""


class InterpolationDomainError(GeometryError):
    """A pose was requested outside the time span of a trajectory."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


# --------------------------------------------------------------------------- #
# quaternion helpers


def _normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise GeometryError(f"cannot normalize quaternion {q}")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a single quaternion, or a stack of them (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _normalize_quat(q)


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return _normalize_quat(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ]
    )


def slerp(q0: np.ndarray, q1: np.ndarray, alpha) -> np.ndarray:
    """Spherical interpolation; ``alpha`` may be a scalar or an array."""
    alpha = np.asarray(alpha, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = q0 + alpha[..., None] * (q1 - q0)
    else:
        theta = math.acos(min(dot, 1.0))
        s = math.sin(theta)
        w0 = np.sin((1.0 - alpha) * theta) / s
        w1 = np.sin(alpha * theta) / s
        out = w0[..., None] * q0 + w1[..., None] * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


# --------------------------------------------------------------------------- #
# poses


@dataclass(frozen=True, eq=False)
class Pose3:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _normalize_quat(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("pose translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose3":
        return cls(quat_from_euler(roll, pitch, yaw), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose3":
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def euler(self) -> tuple[float, float, float]:
        """(roll, pitch, yaw), Z-Y-X intrinsic."""
        m = self.rotation_matrix
        pitch = math.asin(max(-1.0, min(1.0, -m[2, 0])))
        roll = math.atan2(m[2, 1], m[2, 2])
        yaw = math.atan2(m[1, 0], m[0, 0])
        return roll, pitch, yaw

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return Pose3(
            quat_multiply(self.rotation, other.rotation),
            self.rotation_matrix @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose3":
        q_inv = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose3(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix.T + self.translation

    def to_pose2(self) -> "Pose2":
        m = self.rotation_matrix
        return Pose2(math.atan2(m[1, 0], m[0, 0]), self.translation[:2])

    def allclose(self, other: "Pose3", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0.0))

    def __repr__(self) -> str:
        return f"Pose3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Pose2:
    yaw: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not math.isfinite(self.yaw):
            raise GeometryError("yaw must be finite")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls()

    @property
    def x(self) -> float:
        return float(self.translation[0])

    @property
    def y(self) -> float:
        return float(self.translation[1])

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def __matmul__(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ox, oy = other.translation
        return Pose2(
            self.yaw + other.yaw,
            (c * ox - s * oy + self.x, s * ox + c * oy + self.y),
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-self.yaw, (-(c * self.x + s * self.y), s * self.x - c * self.y))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(p)
        out[..., 0] = c * p[..., 0] - s * p[..., 1] + self.x
        out[..., 1] = s * p[..., 0] + c * p[..., 1] + self.y
        return out

    def to_pose3(self, z: float = 0.0) -> Pose3:
        return Pose3.from_euler(0.0, 0.0, self.yaw, (self.x, self.y, z))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)

    def __repr__(self) -> str:
        return f"Pose2(yaw={self.yaw!r}, translation={self.translation.tolist()})"


def gravity_align(base_pose: Pose3, tol: float = 1e-6) -> Pose3:
    """Pose of the gravity-aligned base frame: keep position and yaw, drop roll and pitch."""
    m = base_pose.rotation_matrix
    # cos(pitch) = hypot(R00, R10); yaw is undefined when it vanishes
    if math.hypot(m[0, 0], m[1, 0]) < tol:
        raise GimbalLockError("pitch is +-pi/2; yaw is undefined")
    yaw = math.atan2(m[1, 0], m[0, 0])
    return Pose3(quat_from_euler(0.0, 0.0, yaw), base_pose.translation)


# --------------------------------------------------------------------------- #
# trajectories


class Trajectory:
    """Time-stamped pose samples with slerp / linear interpolation in between."""

    def __init__(self, times, poses: Sequence[Pose3]):
        times = np.asarray(times, dtype=np.float64)
        if times.ndim != 1 or len(times) != len(poses) or len(times) == 0:
            raise GeometryError("need one time per pose and at least one sample")
        if np.any(np.diff(times) <= 0):
            raise GeometryError("trajectory timestamps must be strictly increasing")
        self.times = times
        self.quats = np.stack([p.rotation for p in poses])
        self.translations = np.stack([p.translation for p in poses])

    def __len__(self) -> int:
        return len(self.times)

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def __getitem__(self, i: int) -> Pose3:
        return Pose3(self.quats[i], self.translations[i])

    def _bracket(self, ts: np.ndarray):
        if np.any(ts < self.times[0]) or np.any(ts > self.times[-1]):
            raise InterpolationDomainError(
                f"query outside trajectory span [{self.start}, {self.end}]"
            )
        if len(self.times) == 1:
            zero = np.zeros(len(ts), dtype=np.intp)
            return zero, zero, np.zeros_like(ts)
        hi = np.clip(np.searchsorted(self.times, ts, side="right"), 1, len(self.times) - 1)
        lo = hi - 1
        span = self.times[hi] - self.times[lo]
        return lo, hi, np.clip((ts - self.times[lo]) / span, 0.0, 1.0)

    def pose_at(self, t: float) -> Pose3:
        rot, trans = self.poses_at(np.array([t], dtype=np.float64))
        return Pose3(matrix_to_quat(rot[0]), trans[0])

    __call__ = pose_at

    def poses_at(self, ts) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized interpolation: returns rotation matrices (M, 3, 3) and translations (M, 3)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        lo, hi, alpha = self._bracket(ts)
        trans = self.translations[lo] + alpha[:, None] * (self.translations[hi] - self.translations[lo])
        quats = np.empty((len(ts), 4))
        for seg in np.unique(lo):
            sel = lo == seg
            quats[sel] = slerp(self.quats[seg], self.quats[hi[sel][0]], alpha[sel])
        return quat_to_matrix(quats), trans


# --------------------------------------------------------------------------- #
# point clouds


@dataclass(eq=False)
class PointCloud:
    """Time-stamped 3-D points. ``stamp`` is the cloud timestamp; each point has its own time."""

    points: np.ndarray
    timestamps: np.ndarray | None = None
    source_ids: np.ndarray | int = 0
    stamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point coordinates must be finite")
        if self.timestamps is None:
            self.timestamps = np.full(n, float(self.stamp))
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(n)
        self.source_ids = np.broadcast_to(np.asarray(self.source_ids, dtype=np.int32), (n,)).copy()
        self.stamp = float(self.stamp)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, stamp: float = 0.0) -> "PointCloud":
        return cls(np.zeros((0, 3)), stamp=stamp)

    def transformed(self, pose: Pose3) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.timestamps.copy(), self.source_ids.copy(), self.stamp)


PoseSource = Callable[[float], Pose3]


def motion_compensate(cloud: PointCloud, pose_at: PoseSource | Trajectory, reference_time: float) -> PointCloud:
    """Re-express every point as if it had been observed at ``reference_time``.

    ``pose_at(t)`` maps the sensor frame at time ``t`` into the world frame.
    """
    if len(cloud) == 0:
        return PointCloud.empty(reference_time)
    if isinstance(pose_at, Trajectory):
        uniq, inverse = np.unique(cloud.timestamps, return_inverse=True)
        rots, trans = pose_at.poses_at(uniq)
        ref = pose_at.pose_at(reference_time).inverse()
        world = np.einsum("nij,nj->ni", rots[inverse], cloud.points) + trans[inverse]
        out = ref.apply(world)
    else:
        ref = pose_at(reference_time).inverse()
        out = np.empty_like(cloud.points)
        uniq, inverse = np.unique(cloud.timestamps, return_inverse=True)
        for k, t in enumerate(uniq):
            sel = inverse == k
            out[sel] = (ref @ pose_at(float(t))).apply(cloud.points[sel])
    return PointCloud(out, np.full(len(cloud), float(reference_time)), cloud.source_ids.copy(), reference_time)


def merge_clouds(clouds: Sequence[PointCloud], extrinsics: Sequence[Pose3]) -> PointCloud:
    """Express every cloud in the common base frame and concatenate them."""
    if len(clouds) != len(extrinsics):
        raise GeometryError(f"{len(clouds)} clouds but {len(extrinsics)} extrinsics")
    if not clouds:
        return PointCloud.empty()
    parts = [c.transformed(e) for c, e in zip(clouds, extrinsics)]
    return PointCloud(
        np.concatenate([p.points for p in parts]),
        np.concatenate([p.timestamps for p in parts]),
        np.concatenate([p.source_ids for p in parts]),
        stamp=max(c.stamp for c in clouds),
    )


# --------------------------------------------------------------------------- #
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project(intrinsics: CameraIntrinsics, point_cam) -> tuple[float, float] | None:
    """Pinhole projection; ``None`` for points at or behind the camera plane."""
    x, y, z = (float(v) for v in point_cam)
    if z <= 0.0:
        return None
    return (intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def project_points(intrinsics: CameraIntrinsics, points_cam) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``project``: returns ``(uv, in_front)``; rows with ``in_front=False`` are NaN."""
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    in_front = p[:, 2] > 0.0
    uv = np.full((len(p), 2), np.nan)
    z = p[in_front, 2]
    uv[in_front, 0] = intrinsics.fx * p[in_front, 0] / z + intrinsics.cx
    uv[in_front, 1] = intrinsics.fy * p[in_front, 1] / z + intrinsics.cy
    return uv, in_front


def unproject(intrinsics: CameraIntrinsics, u, v, depth=1.0) -> np.ndarray:
    """Point at optical depth ``depth`` (camera z) that projects to pixel (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx * depth
    y = (v - intrinsics.cy) / intrinsics.fy * depth
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def pixel_rays(intrinsics: CameraIntrinsics, u, v) -> np.ndarray:
    """Unit-length viewing directions (camera frame) through pixels (u, v)."""
    d = unproject(intrinsics, u, v, 1.0)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
