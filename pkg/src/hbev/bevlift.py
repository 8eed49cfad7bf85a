"""Camera frustum lifting, splatting and point-cloud pillar rasterization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, PointCloud, Pose3, pixel_rays
from .gridmap import GridMap, GridSpec, Layer, points_to_cells


@dataclass(frozen=True)
class FrustumConfig:
    d_min: float = 4.0
    d_max: float = 50.0
    spacing: float = 0.2
    feature_height: int = 24
    feature_width: int = 32
    downsample_factor: int = 16

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be smaller than d_max")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if self.feature_height < 1 or self.feature_width < 1 or self.downsample_factor < 1:
            raise ValueError("feature map dimensions must be positive")

    @property
    def n_depth(self) -> int:
        return int(round((self.d_max - self.d_min) / self.spacing))

    def depths(self) -> np.ndarray:
        return self.d_min + np.arange(self.n_depth) * self.spacing

    @property
    def image_size(self) -> tuple[int, int]:
        """(width, height) of the full-resolution image."""
        return (self.feature_width * self.downsample_factor, self.feature_height * self.downsample_factor)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Full-resolution (u, v) of every feature pixel, i.e. the centers of their patches."""
        f = self.downsample_factor
        u = (np.arange(self.feature_width) + 0.5) * f
        v = (np.arange(self.feature_height) + 0.5) * f
        return u, v


@dataclass(eq=False)
class FrustumPointSet:
    """Lifted points in the gravity-aligned base frame, ordered (camera, row, col, depth bin)."""

    positions: np.ndarray
    camera: np.ndarray
    row: np.ndarray
    col: np.ndarray
    depth_bin: np.ndarray
    weights: np.ndarray | None = None
    features: np.ndarray | None = None
    origins: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def channels(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    @classmethod
    def concatenate(cls, sets: list["FrustumPointSet"]) -> "FrustumPointSet":
        def cat(attr):
            parts = [getattr(s, attr) for s in sets]
            return None if any(p is None for p in parts) else np.concatenate(parts)

        return cls(
            positions=np.concatenate([s.positions for s in sets]),
            camera=np.concatenate([s.camera for s in sets]),
            row=np.concatenate([s.row for s in sets]),
            col=np.concatenate([s.col for s in sets]),
            depth_bin=np.concatenate([s.depth_bin for s in sets]),
            weights=cat("weights"),
            features=cat("features"),
            origins=np.concatenate([s.origins for s in sets]),
        )


def generate_frustum(
    intrinsics: CameraIntrinsics,
    cam_pose: Pose3,
    config: FrustumConfig = FrustumConfig(),
    camera_index: int = 0,
) -> FrustumPointSet:
    """N_D points per feature pixel along its viewing ray, at ranges d_min + i * spacing.

    ``cam_pose`` maps the camera optical frame into the base frame. Ranges are
    Euclidean distances from the camera center.
    """
    u, v = config.pixel_centers()
    uu, vv = np.meshgrid(u, v)  # (Fh, Fw)
    rays = pixel_rays(intrinsics, uu, vv)  # (Fh, Fw, 3)
    depths = config.depths()
    pts_cam = rays[:, :, None, :] * depths[None, None, :, None]
    positions = cam_pose.apply(pts_cam.reshape(-1, 3))
    fh, fw, nd = config.feature_height, config.feature_width, config.n_depth
    row, col, dbin = np.meshgrid(np.arange(fh), np.arange(fw), np.arange(nd), indexing="ij")
    return FrustumPointSet(
        positions=positions,
        camera=np.full(positions.shape[0], camera_index, dtype=np.int32),
        row=row.ravel().astype(np.int32),
        col=col.ravel().astype(np.int32),
        depth_bin=dbin.ravel().astype(np.int32),
        origins=cam_pose.translation.reshape(1, 3).copy(),
    )


# optical frame (x right, y down, z forward) expressed in a forward-looking base frame
_OPTICAL_TO_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_rig(n_cameras: int = 4, config: FrustumConfig = FrustumConfig(), height: float = 1.5,
               horizontal_fov_deg: float = 90.0) -> list[tuple[CameraIntrinsics, Pose3]]:
    """Cameras spaced evenly in yaw around the base, all at the same height."""
    width, img_height = config.image_size
    f = 0.5 * width / np.tan(np.deg2rad(horizontal_fov_deg) / 2)
    intr = CameraIntrinsics(f, f, width / 2, img_height / 2, width, img_height)
    rig = []
    for k in range(n_cameras):
        yaw = 2 * np.pi * k / n_cameras
        rz = np.array([[np.cos(yaw), -np.sin(yaw), 0.0], [np.sin(yaw), np.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
        m = np.eye(4)
        m[:3, :3] = rz @ _OPTICAL_TO_BASE
        m[:3, 3] = (0.0, 0.0, height)
        rig.append((intr, Pose3.from_matrix(m)))
    return rig


def synthetic_logits(n_cameras: int, config: FrustumConfig = FrustumConfig(), seed: int = 0) -> np.ndarray:
    """Standard-normal depth logits of shape (n_cameras, Fh, Fw, N_D), float32."""
    rng = np.random.default_rng(seed)
    shape = (n_cameras, config.feature_height, config.feature_width, config.n_depth)
    return rng.standard_normal(shape).astype(np.float32)


def depth_weights(logits) -> np.ndarray:
    """Softmax over the last axis (the depth bins)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("depth logits must be finite")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def lift(frustum: FrustumPointSet, logits, features) -> FrustumPointSet:
    """Attach depth weights and per-pixel features to a positions-only frustum.

    ``logits`` has shape (Fh, Fw, N_D) and ``features`` (Fh, Fw, K).
    """
    logits = np.asarray(logits, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features = features[..., None]
    w = depth_weights(logits)
    if w.shape[-1] != frustum.depth_bin.max() + 1:
        raise ValueError(f"expected {frustum.depth_bin.max() + 1} depth bins, got {w.shape[-1]}")
    return FrustumPointSet(
        positions=frustum.positions,
        camera=frustum.camera,
        row=frustum.row,
        col=frustum.col,
        depth_bin=frustum.depth_bin,
        weights=w[frustum.row, frustum.col, frustum.depth_bin],
        features=features[frustum.row, frustum.col],
        origins=frustum.origins,
    )


def splat_array(positions, weights, features, spec: GridSpec) -> np.ndarray:
    """Scatter-sum ``weight * feature`` into an (H, W, K) float64 array by (x, y) cell.

    z is ignored, so every point in a vertical column lands in the same cell.
    Points outside the grid are dropped; untouched cells stay exactly 0.
    """
    positions = np.asarray(positions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if len(weights) != len(positions) or len(features) != len(positions):
        raise ValueError("positions, weights and features must have one row per point")
    h, w = spec.shape
    k = features.shape[1]
    rows, cols, inside = points_to_cells(spec, positions)
    flat = rows[inside] * w + cols[inside]
    contrib = weights[inside, None] * features[inside]
    out = np.empty((h * w, k))
    for ch in range(k):
        out[:, ch] = np.bincount(flat, weights=contrib[:, ch], minlength=h * w)
    return out.reshape(h, w, k)


def splat(points: FrustumPointSet, spec: GridSpec, channels: int | None = None) -> GridMap:
    """Splat lifted points into a feature map with layers ``feature_000`` ... (all valid)."""
    if points.weights is None or points.features is None:
        raise ValueError("frustum points need weights and features; see lift()")
    if channels is not None and points.channels != channels:
        raise ValueError(f"expected {channels} feature channels, got {points.channels}")
    grid = splat_array(points.positions, points.weights, points.features, spec)
    out = GridMap(spec, dtype=np.float64)
    for ch in range(grid.shape[2]):
        out.set_layer(f"feature_{ch:03d}", grid[:, :, ch])
    return out


@dataclass(eq=False)
class PillarGrid:
    spec: GridSpec
    count: np.ndarray
    centroid: np.ndarray
    max_z: np.ndarray

    @property
    def mean_z(self) -> np.ndarray:
        return self.centroid[:, :, 2]

    def features(self) -> np.ndarray:
        """Reference per-pillar aggregate: (count, mean height, max height)."""
        return np.stack([self.count.astype(np.float64), self.mean_z, self.max_z], axis=-1)


def pillar_rasterize(cloud: PointCloud, spec: GridSpec) -> PillarGrid:
    """Group points by the (x, y) cell they fall in; z plays no part in the assignment."""
    h, w = spec.shape
    rows, cols, inside = points_to_cells(spec, cloud.points)
    flat = rows[inside] * w + cols[inside]
    pts = cloud.points[inside]
    count = np.bincount(flat, minlength=h * w)
    sums = np.stack([np.bincount(flat, weights=pts[:, i], minlength=h * w) for i in range(3)], axis=-1)
    centroid = np.zeros((h * w, 3))
    occupied = count > 0
    centroid[occupied] = sums[occupied] / count[occupied, None]
    max_z = np.full(h * w, -np.inf)
    np.maximum.at(max_z, flat, pts[:, 2])
    max_z[~occupied] = 0.0
    return PillarGrid(spec, count.reshape(h, w), centroid.reshape(h, w, 3), max_z.reshape(h, w))


def normalize_elevation(layer: Layer | np.ndarray, scale: float = 0.05):
    """``clip(scale * e, -1, 1)`` in float64; a ``Layer`` keeps its validity mask.

    With the default scale, elevations beyond +-20 m saturate at +-1.
    """
    if isinstance(layer, Layer):
        values = np.clip(scale * np.asarray(layer.values, dtype=np.float64), -1.0, 1.0)
        return Layer(np.where(layer.valid, values, 0.0), layer.valid.copy())
    return np.clip(scale * np.asarray(layer, dtype=np.float64), -1.0, 1.0)


def denormalize_elevation(layer: Layer | np.ndarray, scale: float = 0.05, dtype=np.float32):
    """Inverse of ``normalize_elevation`` wherever the input was not clipped.

    Normalized values are float64, so rounding back to float32 (the map storage
    type) recovers every unclipped float32 elevation bit for bit.
    """
    if isinstance(layer, Layer):
        values = np.asarray(layer.values, dtype=np.float64) / scale
        return Layer(np.where(layer.valid, values, 0.0).astype(dtype), layer.valid.copy())
    return (np.asarray(layer, dtype=np.float64) / scale).astype(dtype)
