"""On-disk formats: grid maps, point clouds, trajectories, camera calibration, tensors.

All binary formats are little-endian; the exact byte layouts are in docs/formats.md.
Writers go through ``atomic_write`` (temp file in the target directory + rename).
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, PointCloud, Pose2, Pose3, Trajectory
from .gridmap import SENTINEL, GridMap, GridSpec

GRIDMAP_MAGIC = b"HBGM"
CLOUD_MAGIC = b"HBPC"
TENSOR_MAGIC = b"HBLT"
FORMAT_VERSION = 1

_GRID_HEADER = struct.Struct("<4sHIIdddddH")
_CLOUD_HEADER = struct.Struct("<4sHIdi")
_TENSOR_HEADER = struct.Struct("<4sHH")
_MIXED_SOURCES = -1

TRAJECTORY_COLUMNS = ("t", "x", "y", "z", "qw", "qx", "qy", "qz")


class FormatError(ValueError):
    """A file does not follow the expected format."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# --------------------------------------------------------------------------- #
# grid maps


def gridmap_to_bytes(grid: GridMap) -> bytes:
    h, w = grid.shape
    pose = grid.spec.center_pose
    buf = io.BytesIO()
    buf.write(_GRID_HEADER.pack(
        GRIDMAP_MAGIC, FORMAT_VERSION, h, w, grid.spec.resolution,
        pose.x, pose.y, pose.yaw, grid.timestamp, len(grid.layers),
    ))
    for name, values in grid.layers.items():
        encoded = name.encode("utf-8")
        valid = grid.valid[name]
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        data = np.where(valid, values, SENTINEL).astype("<f4")
        buf.write(data.tobytes(order="C"))
        buf.write(np.packbits(valid.ravel(), bitorder="little").tobytes())
    return buf.getvalue()


def gridmap_from_bytes(data: bytes, path="<bytes>") -> GridMap:
    if len(data) < _GRID_HEADER.size:
        raise FormatError(path, "truncated header")
    magic, version, h, w, res, x, y, yaw, stamp, n_layers = _GRID_HEADER.unpack_from(data)
    if magic != GRIDMAP_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported version {version}")
    spec = GridSpec(h, w, res, Pose2(yaw, (x, y)))
    grid = GridMap(spec, timestamp=stamp, dtype=np.float32)
    n = h * w
    mask_bytes = (n + 7) // 8
    offset = _GRID_HEADER.size
    try:
        for _ in range(n_layers):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + length].decode("utf-8")
            offset += length
            values = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(h, w)
            offset += 4 * n
            bits = np.frombuffer(data, dtype=np.uint8, count=mask_bytes, offset=offset)
            offset += mask_bytes
            valid = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(h, w)
            grid.layers[name] = np.where(valid, values, np.float32(SENTINEL)).astype(np.float32)
            grid.valid[name] = valid
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(path, f"truncated or corrupt layer data ({exc})") from None
    if offset != len(data):
        raise FormatError(path, f"{len(data) - offset} trailing bytes")
    return grid


def read_gridmap_header(path) -> tuple[GridSpec, float]:
    """Grid spec and timestamp without loading the layers."""
    with open(path, "rb") as f:
        head = f.read(_GRID_HEADER.size)
    if len(head) < _GRID_HEADER.size:
        raise FormatError(path, "truncated header")
    magic, version, h, w, res, x, y, yaw, stamp, _ = _GRID_HEADER.unpack(head)
    if magic != GRIDMAP_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported version {version}")
    return GridSpec(h, w, res, Pose2(yaw, (x, y))), stamp


def write_gridmap(path, grid: GridMap) -> Path:
    return atomic_write(path, gridmap_to_bytes(grid))


def read_gridmap(path) -> GridMap:
    return gridmap_from_bytes(_read(path), path)


# --------------------------------------------------------------------------- #
# point clouds


def cloud_to_bytes(cloud: PointCloud) -> bytes:
    ids = np.unique(cloud.source_ids)
    source = int(ids[0]) if len(ids) == 1 else _MIXED_SOURCES
    records = np.empty((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.points
    records[:, 3] = cloud.timestamps - cloud.stamp
    header = _CLOUD_HEADER.pack(CLOUD_MAGIC, FORMAT_VERSION, len(cloud), cloud.stamp, source)
    return header + records.tobytes()


def cloud_from_bytes(data: bytes, path="<bytes>") -> PointCloud:
    if len(data) < _CLOUD_HEADER.size:
        raise FormatError(path, "truncated header")
    magic, version, count, stamp, source = _CLOUD_HEADER.unpack_from(data)
    if magic != CLOUD_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported version {version}")
    if len(data) != _CLOUD_HEADER.size + 16 * count:
        raise FormatError(path, f"expected {count} records")
    rec = np.frombuffer(data, dtype="<f4", offset=_CLOUD_HEADER.size).reshape(count, 4).astype(np.float64)
    return PointCloud(rec[:, :3], stamp + rec[:, 3], source, stamp)


def write_cloud(path, cloud: PointCloud) -> Path:
    return atomic_write(path, cloud_to_bytes(cloud))


def read_cloud(path) -> PointCloud:
    return cloud_from_bytes(_read(path), path)


# --------------------------------------------------------------------------- #
# trajectories


def trajectory_to_csv(traj: Trajectory) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRAJECTORY_COLUMNS)
    for t, p, q in zip(traj.times, traj.translations, traj.quats):
        writer.writerow([repr(float(v)) for v in (t, *p, *q)])
    return out.getvalue()


def trajectory_from_csv(text: str, path="<text>") -> Trajectory:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != TRAJECTORY_COLUMNS:
        raise FormatError(path, f"expected header {','.join(TRAJECTORY_COLUMNS)}")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64).reshape(-1, 8)
    except ValueError as exc:
        raise FormatError(path, str(exc)) from None
    poses = [Pose3(row[4:8], row[1:4]) for row in data]
    return Trajectory(data[:, 0], poses)


def write_trajectory(path, traj: Trajectory) -> Path:
    return atomic_write(path, trajectory_to_csv(traj))


def read_trajectory(path) -> Trajectory:
    return trajectory_from_csv(Path(path).read_text(), path)


# --------------------------------------------------------------------------- #
# camera calibration


def camera_to_dict(intrinsics: CameraIntrinsics, extrinsic: Pose3) -> dict:
    return {
        "fx": intrinsics.fx, "fy": intrinsics.fy, "cx": intrinsics.cx, "cy": intrinsics.cy,
        "width": intrinsics.width, "height": intrinsics.height,
        "extrinsic": {
            "translation": [float(v) for v in extrinsic.translation],
            "rotation": [float(v) for v in extrinsic.rotation],
        },
    }


def camera_from_dict(data: dict) -> tuple[CameraIntrinsics, Pose3]:
    intr = CameraIntrinsics(
        float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
        int(data["width"]), int(data["height"]),
    )
    ext = data.get("extrinsic", {})
    pose = Pose3(ext.get("rotation", [1.0, 0.0, 0.0, 0.0]), ext.get("translation", [0.0, 0.0, 0.0]))
    return intr, pose


def write_cameras(path, cameras: list[tuple[CameraIntrinsics, Pose3]]) -> Path:
    doc = {"cameras": [camera_to_dict(i, p) for i, p in cameras]}
    return atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_cameras(path) -> list[tuple[CameraIntrinsics, Pose3]]:
    """Calibration JSON: a single camera object or ``{"cameras": [...]}``."""
    try:
        doc = json.loads(Path(path).read_text())
        items = doc["cameras"] if "cameras" in doc else [doc]
        return [camera_from_dict(c) for c in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, f"invalid camera calibration ({exc})") from None


# --------------------------------------------------------------------------- #
# tensors (depth logits / features)


def tensor_to_bytes(array) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + array.tobytes()


def tensor_from_bytes(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < _TENSOR_HEADER.size:
        raise FormatError(path, "truncated header")
    magic, version, ndim = _TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported version {version}")
    offset = _TENSOR_HEADER.size + 4 * ndim
    if len(data) < offset:
        raise FormatError(path, "truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", data, _TENSOR_HEADER.size)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != offset + 4 * count:
        raise FormatError(path, f"expected {count} float32 values for shape {dims}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def write_tensor(path, array) -> Path:
    return atomic_write(path, tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(_read(path), path)


# --------------------------------------------------------------------------- #
# json


def dumps_json(doc) -> str:
    """Canonical JSON used for every report and manifest (sorted keys, trailing newline)."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc) -> Path:
    return atomic_write(path, dumps_json(doc))
