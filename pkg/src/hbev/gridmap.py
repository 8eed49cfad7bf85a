"""Vehicle-centric multi-layer grid maps.

Cell ``(row, col)`` covers ``[(row - r0) * res, (row - r0 + 1) * res)`` along +x (vehicle
forward) and ``[(col - c0) * res, (col - c0 + 1) * res)`` along +y (vehicle left), where
``(r0, c0) = (H // 2, W // 2)`` is the cell holding the map origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .geometry import Pose2

ELEVATION = "elevation"
TRAVERSABILITY = "traversability"
RELIABILITY = "reliability"

# value stored in invalid cells; validity itself lives in a separate mask
SENTINEL = 0.0

_UNIT_INTERVAL_LAYERS = (TRAVERSABILITY, RELIABILITY)


class GridMapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridSpec:
    height_cells: int
    width_cells: int
    resolution: float
    center_pose: Pose2 = field(default_factory=Pose2)

    def __post_init__(self):
        if int(self.height_cells) < 1 or int(self.width_cells) < 1:
            raise GridMapError("grid must have at least one cell per axis")
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise GridMapError("resolution must be positive")
        object.__setattr__(self, "height_cells", int(self.height_cells))
        object.__setattr__(self, "width_cells", int(self.width_cells))
        object.__setattr__(self, "resolution", float(self.resolution))

    @classmethod
    def from_extent(cls, extent: float, resolution: float, center_pose: Pose2 | None = None) -> "GridSpec":
        n = int(round(extent / resolution))
        return cls(n, n, resolution, center_pose or Pose2())

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def center_cell(self) -> tuple[int, int]:
        return (self.height_cells // 2, self.width_cells // 2)

    def with_pose(self, pose: Pose2) -> "GridSpec":
        return GridSpec(self.height_cells, self.width_cells, self.resolution, pose)

    def same_shape(self, other: "GridSpec") -> bool:
        return self.shape == other.shape and self.resolution == other.resolution

    def half_resolution(self) -> "GridSpec":
        """Grid covering the same area with cells twice as large."""
        return GridSpec(max(1, self.height_cells // 2), max(1, self.width_cells // 2), 2 * self.resolution, self.center_pose)

    def __repr__(self) -> str:
        return (
            f"GridSpec({self.height_cells}x{self.width_cells} @ {self.resolution} m, "
            f"center={self.center_pose.as_tuple()})"
        )


class Layer(NamedTuple):
    values: np.ndarray
    valid: np.ndarray


def world_to_cell(spec: GridSpec, point) -> tuple[int, int] | None:
    """Cell containing a point given in the map frame, or ``None`` when it lies outside."""
    x, y = float(point[0]), float(point[1])
    r0, c0 = spec.center_cell
    row = math.floor(x / spec.resolution) + r0
    col = math.floor(y / spec.resolution) + c0
    if 0 <= row < spec.height_cells and 0 <= col < spec.width_cells:
        return row, col
    return None


def points_to_cells(spec: GridSpec, xy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``world_to_cell``: ``(rows, cols, inside)``."""
    xy = np.asarray(xy, dtype=np.float64)
    xy = xy.reshape(-1, xy.shape[-1])[:, :2] if xy.ndim > 1 else xy.reshape(-1, 2)
    r0, c0 = spec.center_cell
    rows = np.floor(xy[:, 0] / spec.resolution).astype(np.int64) + r0
    cols = np.floor(xy[:, 1] / spec.resolution).astype(np.int64) + c0
    inside = (rows >= 0) & (rows < spec.height_cells) & (cols >= 0) & (cols < spec.width_cells)
    return rows, cols, inside


def cell_to_world(spec: GridSpec, row, col) -> tuple:
    """Center of a cell in the map frame."""
    r0, c0 = spec.center_cell
    return ((row - r0 + 0.5) * spec.resolution, (col - c0 + 0.5) * spec.resolution)


def cell_centers(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis cell center coordinates: x for every row, y for every column."""
    r0, c0 = spec.center_cell
    xs = (np.arange(spec.height_cells) - r0 + 0.5) * spec.resolution
    ys = (np.arange(spec.width_cells) - c0 + 0.5) * spec.resolution
    return xs, ys


def cell_distances(spec: GridSpec) -> np.ndarray:
    """Euclidean distance of every cell center from the center cell's center."""
    r0, c0 = spec.center_cell
    dr = np.arange(spec.height_cells)[:, None] - r0
    dc = np.arange(spec.width_cells)[None, :] - c0
    return np.sqrt(dr * dr + dc * dc) * spec.resolution


class GridMap:
    """Named layers of ``H x W`` values, each with its own validity mask.

    Invalid cells always hold ``SENTINEL``. Layers are only changed through
    ``set_layer`` / ``set_cell``; there is no internal locking.
    """

    def __init__(
        self,
        spec: GridSpec,
        layers: Mapping[str, np.ndarray] | Iterable[str] = (),
        valid: Mapping[str, np.ndarray] | None = None,
        timestamp: float = 0.0,
        dtype=np.float32,
    ):
        self.spec = spec
        self.timestamp = float(timestamp)
        self.dtype = np.dtype(dtype)
        self.layers: dict[str, np.ndarray] = {}
        self.valid: dict[str, np.ndarray] = {}
        if isinstance(layers, Mapping):
            for name, values in layers.items():
                mask = None if valid is None else valid.get(name)
                self.set_layer(name, values, mask)
        else:
            for name in layers:
                self.add_layer(name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def add_layer(self, name: str) -> None:
        """Add an all-invalid layer."""
        self.layers[name] = np.full(self.shape, SENTINEL, dtype=self.dtype)
        self.valid[name] = np.zeros(self.shape, dtype=bool)

    def set_layer(self, name: str, values, valid=None) -> None:
        values = np.array(values, dtype=self.dtype, copy=True)
        if values.shape != self.shape:
            raise GridMapError(f"layer {name!r} has shape {values.shape}, expected {self.shape}")
        if valid is None:
            valid = np.ones(self.shape, dtype=bool)
        valid = np.array(valid, dtype=bool, copy=True)
        if valid.shape != self.shape:
            raise GridMapError(f"validity of {name!r} has shape {valid.shape}, expected {self.shape}")
        valid &= np.isfinite(values)
        values[~valid] = SENTINEL
        if name in _UNIT_INTERVAL_LAYERS:
            v = values[valid]
            if v.size and (v.min() < 0.0 or v.max() > 1.0):
                raise GridMapError(f"{name} values must lie in [0, 1]")
        self.layers[name] = values
        self.valid[name] = valid

    def layer(self, name: str) -> Layer:
        try:
            return Layer(self.layers[name], self.valid[name])
        except KeyError:
            raise GridMapError(f"unknown layer {name!r}") from None

    def _check_index(self, row: int, col: int) -> None:
        h, w = self.shape
        if not (0 <= row < h and 0 <= col < w):
            raise IndexError(f"cell ({row}, {col}) outside {h}x{w} grid")

    def get_cell(self, layer: str, row: int, col: int) -> tuple[float, bool]:
        self._check_index(row, col)
        values, valid = self.layer(layer)
        return float(values[row, col]), bool(valid[row, col])

    def set_cell(self, layer: str, row: int, col: int, value: float, valid: bool = True) -> None:
        self._check_index(row, col)
        if layer not in self.layers:
            self.add_layer(layer)
        if valid and not math.isfinite(value):
            raise GridMapError("valid cells must hold finite values")
        if valid and layer in _UNIT_INTERVAL_LAYERS and not 0.0 <= value <= 1.0:
            raise GridMapError(f"{layer} values must lie in [0, 1]")
        self.layers[layer][row, col] = value if valid else SENTINEL
        self.valid[layer][row, col] = valid

    def copy(self) -> "GridMap":
        out = GridMap(self.spec, timestamp=self.timestamp, dtype=self.dtype)
        for name in self.layers:
            out.layers[name] = self.layers[name].copy()
            out.valid[name] = self.valid[name].copy()
        return out

    def equals(self, other: "GridMap") -> bool:
        """Bitwise equality of layer values and validity (pose and timestamp are not compared)."""
        if self.shape != other.shape or self.layer_names != other.layer_names:
            return False
        return all(
            np.array_equal(self.valid[n], other.valid[n])
            and self.layers[n].tobytes() == other.layers[n].astype(self.dtype).tobytes()
            for n in self.layers
        )

    def __repr__(self) -> str:
        return f"GridMap({self.spec!r}, layers={self.layer_names}, t={self.timestamp})"


def source_cells(source: GridSpec, target: GridSpec, relative_pose: Pose2):
    """For every target cell, the source cell whose square contains the target cell center.

    ``relative_pose`` is the pose of the source frame expressed in the target frame.
    Returns ``(rows, cols, inside)`` arrays of the target shape.
    """
    xs, ys = cell_centers(target)
    c, s = math.cos(relative_pose.yaw), math.sin(relative_pose.yaw)
    dx = xs[:, None] - relative_pose.x
    dy = ys[None, :] - relative_pose.y
    xsrc = c * dx + s * dy
    ysrc = -s * dx + c * dy
    r0, c0 = source.center_cell
    rows = np.floor(xsrc / source.resolution).astype(np.int64) + r0
    cols = np.floor(ysrc / source.resolution).astype(np.int64) + c0
    inside = (rows >= 0) & (rows < source.height_cells) & (cols >= 0) & (cols < source.width_cells)
    return rows, cols, inside


def transform_grid(grid: GridMap, relative_pose: Pose2) -> GridMap:
    """Nearest-neighbour resample of ``grid`` into a frame in which it sits at ``relative_pose``.

    Output cells that fall outside the source become invalid.
    """
    target_spec = grid.spec.with_pose(grid.spec.center_pose @ relative_pose.inverse())
    rows, cols, inside = source_cells(grid.spec, target_spec, relative_pose)
    r = np.where(inside, rows, 0)
    cidx = np.where(inside, cols, 0)
    out = GridMap(target_spec, timestamp=grid.timestamp, dtype=grid.dtype)
    for name in grid.layers:
        values = grid.layers[name][r, cidx]
        valid = grid.valid[name][r, cidx] & inside
        out.layers[name] = np.where(valid, values, grid.dtype.type(SENTINEL)).astype(grid.dtype)
        out.valid[name] = valid
    return out
