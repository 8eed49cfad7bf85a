"""Hindsight pseudo ground truth: fuse a time window of per-step maps at one reference pose.

Maps are visited in increasing timestamp order. Each one is resampled (nearest
neighbour) into the reference frame and fused cell by cell:

* elevation: minimum over valid observations (default: +inf, reported invalid)
* reliability: maximum (default 0, always valid)
* traversability: the latest observation whose reliability reaches the
  confidence threshold (default 0 = traversable, reported invalid until set)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .geometry import Pose2
from .gridmap import ELEVATION, RELIABILITY, SENTINEL, TRAVERSABILITY, GridMap, GridSpec

LAYERS = (ELEVATION, RELIABILITY, TRAVERSABILITY)

DEFAULT_ELEVATION = math.inf
DEFAULT_RELIABILITY = 0.0
DEFAULT_TRAVERSABILITY = 0.0


@dataclass(frozen=True)
class FusionPolicy:
    confidence_threshold: float = 0.5
    window: float = 60.0

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if not self.window > 0:
            raise ValueError("window must be positive")


def select_window(maps: Sequence[GridMap], reference_time: float, window: float) -> list[GridMap]:
    """Maps stamped within ``window / 2`` of ``reference_time``, oldest first."""
    half = window / 2.0
    picked = [m for m in maps if abs(m.timestamp - reference_time) <= half]
    return sorted(picked, key=lambda m: m.timestamp)


def select_reference_samples(positions, min_distance: float = 0.2, tol: float = 1e-9) -> list[int]:
    """Indices of reference samples spaced at least ``min_distance`` apart along the path.

    Distance is planar arc length travelled since the last selected sample; the
    first sample is always selected.
    """
    xy = np.asarray(positions, dtype=np.float64)
    if xy.size == 0:
        return []
    xy = xy.reshape(len(xy), -1)[:, :2]
    steps = np.hypot(*np.diff(xy, axis=0).T)
    picked = [0]
    travelled = 0.0
    for i, d in enumerate(steps, start=1):
        travelled += d
        if travelled >= min_distance - tol:
            picked.append(i)
            travelled = 0.0
    return picked


def fuse_cell(policy: FusionPolicy, layer: str, accumulated: tuple, incoming: tuple) -> tuple:
    """Scalar fusion rule for one cell of one layer.

    ``accumulated`` is ``(value, valid, latest_time)`` and ``incoming`` is
    ``(value, valid, reliability, time)``. Returns the new accumulator.
    """
    value, valid, latest = accumulated
    in_value, in_valid, in_reliability, in_time = incoming
    if layer not in LAYERS:
        raise ValueError(f"unknown layer {layer!r}")
    if not in_valid:
        return accumulated
    if layer == ELEVATION:
        current = value if valid else DEFAULT_ELEVATION
        return (min(current, in_value), True, latest)
    if layer == RELIABILITY:
        return (max(value, in_value), True, latest)
    if in_reliability >= policy.confidence_threshold and in_time >= latest:
        return (in_value, True, in_time)
    return accumulated


@numba.njit(cache=True, nogil=True)
def _fuse_into(
    elev, elev_ok, rel, rel_ok, trav, trav_ok,
    has_elev, has_rel, has_trav, stamp,
    cos_yaw, sin_yaw, tx, ty,
    out_r0, out_c0, out_res, h_src, w_src, src_r0, src_c0, src_res, threshold,
    acc_elev, acc_elev_ok, acc_rel, acc_trav, acc_trav_ok, acc_trav_time,
):
    # absent layers come in as 1x1 placeholders, so the source shape is passed explicitly
    h_out, w_out = acc_elev.shape
    for r in range(h_out):
        xt = (r - out_r0 + 0.5) * out_res
        dx = xt - tx
        for c in range(w_out):
            yt = (c - out_c0 + 0.5) * out_res
            dy = yt - ty
            xs = cos_yaw * dx + sin_yaw * dy
            ys = -sin_yaw * dx + cos_yaw * dy
            rs = int(math.floor(xs / src_res)) + src_r0
            cs = int(math.floor(ys / src_res)) + src_c0
            if rs < 0 or rs >= h_src or cs < 0 or cs >= w_src:
                continue
            if has_elev and elev_ok[rs, cs]:
                v = elev[rs, cs]
                if v < acc_elev[r, c]:
                    acc_elev[r, c] = v
                acc_elev_ok[r, c] = True
            confidence = 0.0
            if has_rel and rel_ok[rs, cs]:
                confidence = rel[rs, cs]
                if confidence > acc_rel[r, c]:
                    acc_rel[r, c] = confidence
            if has_trav and trav_ok[rs, cs]:
                if confidence >= threshold and stamp >= acc_trav_time[r, c]:
                    acc_trav[r, c] = trav[rs, cs]
                    acc_trav_time[r, c] = stamp
                    acc_trav_ok[r, c] = True


class HindsightAccumulator:
    """Running state of the fusion at one reference pose; feed maps in time order."""

    def __init__(self, spec: GridSpec, policy: FusionPolicy = FusionPolicy(), dtype=np.float32):
        self.spec = spec
        self.policy = policy
        self.dtype = np.dtype(dtype)
        shape = spec.shape
        self.elevation = np.full(shape, np.finfo(self.dtype).max, dtype=self.dtype)
        self.elevation_valid = np.zeros(shape, dtype=bool)
        self.reliability = np.full(shape, DEFAULT_RELIABILITY, dtype=self.dtype)
        self.traversability = np.full(shape, DEFAULT_TRAVERSABILITY, dtype=self.dtype)
        self.traversability_valid = np.zeros(shape, dtype=bool)
        self.traversability_time = np.full(shape, -np.inf)
        self._dummy = (np.zeros((1, 1), dtype=self.dtype), np.zeros((1, 1), dtype=bool))

    def _layer(self, grid: GridMap, name: str):
        if name in grid.layers:
            return grid.layers[name].astype(self.dtype, copy=False), grid.valid[name], True
        return self._dummy[0], self._dummy[1], False

    def add(self, grid: GridMap) -> None:
        if not grid.spec.same_shape(self.spec):
            raise ValueError(f"map {grid.spec!r} does not match reference grid {self.spec!r}")
        relative = self.spec.center_pose.inverse() @ grid.spec.center_pose
        elev, elev_ok, has_elev = self._layer(grid, ELEVATION)
        rel, rel_ok, has_rel = self._layer(grid, RELIABILITY)
        trav, trav_ok, has_trav = self._layer(grid, TRAVERSABILITY)
        r0, c0 = self.spec.center_cell
        sr0, sc0 = grid.spec.center_cell
        _fuse_into(
            elev, elev_ok, rel, rel_ok, trav, trav_ok,
            has_elev, has_rel, has_trav, float(grid.timestamp),
            math.cos(relative.yaw), math.sin(relative.yaw), relative.x, relative.y,
            r0, c0, self.spec.resolution, grid.spec.height_cells, grid.spec.width_cells,
            sr0, sc0, grid.spec.resolution,
            float(self.policy.confidence_threshold),
            self.elevation, self.elevation_valid, self.reliability,
            self.traversability, self.traversability_valid, self.traversability_time,
        )

    def result(self, timestamp: float = 0.0) -> GridMap:
        out = GridMap(self.spec, timestamp=timestamp, dtype=self.dtype)
        sentinel = self.dtype.type(SENTINEL)
        out.layers[ELEVATION] = np.where(self.elevation_valid, self.elevation, sentinel)
        out.valid[ELEVATION] = self.elevation_valid.copy()
        out.layers[RELIABILITY] = self.reliability.copy()
        out.valid[RELIABILITY] = np.ones(self.spec.shape, dtype=bool)
        out.layers[TRAVERSABILITY] = np.where(self.traversability_valid, self.traversability, sentinel)
        out.valid[TRAVERSABILITY] = self.traversability_valid.copy()
        return out


def compute_hindsight(
    maps: Sequence[GridMap],
    reference_pose: Pose2,
    policy: FusionPolicy = FusionPolicy(),
    *,
    spec: GridSpec | None = None,
    timestamp: float = 0.0,
) -> GridMap:
    """Fuse ``maps`` into a ground-truth map centered at ``reference_pose``.

    All maps must share one grid shape. With no maps, ``spec`` supplies the
    shape and the result holds the defaults only.
    """
    if not maps and spec is None:
        raise ValueError("spec is required when no maps are given")
    base = spec if spec is not None else maps[0].spec
    for m in maps:
        if not m.spec.same_shape(base):
            raise ValueError(f"inconsistent map dimensions: {m.spec!r} vs {base!r}")
    dtype = maps[0].dtype if maps else np.float32
    acc = HindsightAccumulator(base.with_pose(reference_pose), policy, dtype)
    for m in sorted(maps, key=lambda m: m.timestamp):
        acc.add(m)
    return acc.result(timestamp)
