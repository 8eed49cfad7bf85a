"""Slow, obviously-correct reference implementations used by the tests."""
from __future__ import annotations

import math

import numpy as np

from hbev.geometry import Pose2
from hbev.gridmap import ELEVATION, RELIABILITY, TRAVERSABILITY, GridMap, GridSpec
from hbev.hindsight import FusionPolicy, fuse_cell


def source_index(ref: GridSpec, src: GridSpec, r: int, c: int) -> tuple[int, int] | None:
    """Nearest source cell of target cell (r, c), one cell at a time."""
    rel = ref.center_pose.inverse() @ src.center_pose
    r0, c0 = ref.center_cell
    sr0, sc0 = src.center_cell
    xt = (r - r0 + 0.5) * ref.resolution
    yt = (c - c0 + 0.5) * ref.resolution
    dx, dy = xt - rel.x, yt - rel.y
    cy, sy = math.cos(rel.yaw), math.sin(rel.yaw)
    xs = cy * dx + sy * dy
    ys = -sy * dx + cy * dy
    rs = math.floor(xs / src.resolution) + sr0
    cs = math.floor(ys / src.resolution) + sc0
    if 0 <= rs < src.height_cells and 0 <= cs < src.width_cells:
        return rs, cs
    return None


def hindsight_oracle(maps: list[GridMap], reference: Pose2, policy: FusionPolicy, spec: GridSpec):
    """Per-cell, per-map application of the scalar fusion rule; returns {layer: (values, valid)}."""
    ref = spec.with_pose(reference)
    h, w = spec.shape
    out = {name: (np.zeros((h, w)), np.zeros((h, w), dtype=bool)) for name in (ELEVATION, RELIABILITY, TRAVERSABILITY)}
    state = {
        ELEVATION: [[(math.inf, False, -math.inf)] * w for _ in range(h)],
        RELIABILITY: [[(0.0, True, -math.inf)] * w for _ in range(h)],
        TRAVERSABILITY: [[(0.0, False, -math.inf)] * w for _ in range(h)],
    }
    for m in sorted(maps, key=lambda m: m.timestamp):
        for r in range(h):
            for c in range(w):
                idx = source_index(ref, m.spec, r, c)
                if idx is None:
                    continue
                rel = (float(m.layers[RELIABILITY][idx]), bool(m.valid[RELIABILITY][idx])) if RELIABILITY in m else (0.0, False)
                confidence = rel[0] if rel[1] else 0.0
                for name in (ELEVATION, RELIABILITY, TRAVERSABILITY):
                    if name not in m:
                        continue
                    incoming = (float(m.layers[name][idx]), bool(m.valid[name][idx]), confidence, m.timestamp)
                    state[name][r][c] = fuse_cell(policy, name, state[name][r][c], incoming)
    for name, (values, valid) in out.items():
        for r in range(h):
            for c in range(w):
                v, ok, _ = state[name][r][c]
                valid[r, c] = ok
                values[r, c] = v if ok else 0.0
    return out


def hindsight_oracle_vectorized(maps: list[GridMap], reference: Pose2, policy: FusionPolicy, spec: GridSpec):
    """The same rules as ``hindsight_oracle`` written with whole-array numpy operations, one map at a time."""
    ref = spec.with_pose(reference)
    h, w = spec.shape
    r0, c0 = ref.center_cell
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xt = (rr - r0 + 0.5) * ref.resolution
    yt = (cc - c0 + 0.5) * ref.resolution
    elev, elev_ok = np.full((h, w), math.inf), np.zeros((h, w), bool)
    rel = np.zeros((h, w))
    trav, trav_ok, latest = np.zeros((h, w)), np.zeros((h, w), bool), np.full((h, w), -math.inf)
    for m in sorted(maps, key=lambda m: m.timestamp):
        src = m.spec
        t = ref.center_pose.inverse() @ src.center_pose
        cy, sy = math.cos(t.yaw), math.sin(t.yaw)
        dx, dy = xt - t.x, yt - t.y
        rs = np.floor((cy * dx + sy * dy) / src.resolution).astype(int) + src.center_cell[0]
        cs = np.floor((-sy * dx + cy * dy) / src.resolution).astype(int) + src.center_cell[1]
        inside = (rs >= 0) & (rs < src.height_cells) & (cs >= 0) & (cs < src.width_cells)
        rs, cs = np.where(inside, rs, 0), np.where(inside, cs, 0)

        def take(name):
            return m.layers[name][rs, cs].astype(np.float64), m.valid[name][rs, cs] & inside

        if RELIABILITY in m:
            rv, rok = take(RELIABILITY)
            conf = np.where(rok, rv, 0.0)
            rel = np.where(rok, np.maximum(rel, rv), rel)
        else:
            conf = np.zeros((h, w))
        if ELEVATION in m:
            ev, eok = take(ELEVATION)
            elev = np.where(eok, np.minimum(np.where(elev_ok, elev, math.inf), ev), elev)
            elev_ok |= eok
        if TRAVERSABILITY in m:
            tv, tok = take(TRAVERSABILITY)
            accept = tok & (conf >= policy.confidence_threshold) & (m.timestamp >= latest)
            trav = np.where(accept, tv, trav)
            latest = np.where(accept, m.timestamp, latest)
            trav_ok |= accept
    return {
        ELEVATION: (np.where(elev_ok, elev, 0.0), elev_ok),
        RELIABILITY: (rel, np.ones((h, w), bool)),
        TRAVERSABILITY: (np.where(trav_ok, trav, 0.0), trav_ok),
    }


def naive_errors(t, tv, p, pv, rel=None):
    """Double-loop MAE / MSE and reliability-weighted WMAE / WMSE over jointly valid cells.

    All four are normalized by the number of jointly valid cells; ``None`` when there is none.
    """
    n = 0
    sa = sq = wsa = wsq = 0.0
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            if tv[i, j] and pv[i, j]:
                d = float(t[i, j]) - float(p[i, j])
                n += 1
                sa += abs(d)
                sq += d * d
                if rel is not None:
                    wsa += float(rel[i, j]) * abs(d)
                    wsq += float(rel[i, j]) * d * d
    out = {"mae": sa / n if n else None, "mse": sq / n if n else None}
    if rel is not None:
        out["wmae"] = wsa / n if n else None
        out["wmse"] = wsq / n if n else None
    return out


def naive_confusion(gt, gv, pred, pv):
    tp = fp = fn = tn = 0
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            if not (gv[i, j] and pv[i, j]):
                continue
            g, p = bool(gt[i, j]), bool(pred[i, j])
            tp += g and p
            fp += (not g) and p
            fn += g and not p
            tn += not g and not p
    return tp, fp, fn, tn


def median_oracle(values, valid):
    h, w = values.shape
    out = np.zeros_like(values)
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            window = sorted(
                values[a, b]
                for a in range(max(0, i - 2), min(h, i + 3))
                for b in range(max(0, j - 2), min(w, j + 3))
                if valid[a, b]
            )
            out[i, j] = window[(len(window) - 1) // 2]
    return out


def ray_cylinder(origin, direction, center_xy, radius, z_bottom, z_top):
    """Distance along a unit ray to the first hit on a closed vertical cylinder (side or top), or None."""
    ox, oy, oz = origin
    dx, dy, dz = direction
    hits = []
    a = dx * dx + dy * dy
    fx, fy = ox - center_xy[0], oy - center_xy[1]
    if a > 0:
        b = 2 * (fx * dx + fy * dy)
        c = fx * fx + fy * fy - radius * radius
        disc = b * b - 4 * a * c
        if disc >= 0:
            for t in ((-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)):
                if t > 0 and z_bottom <= oz + t * dz <= z_top:
                    hits.append(t)
    if dz != 0:
        t = (z_top - oz) / dz
        if t > 0 and (fx + t * dx) ** 2 + (fy + t * dy) ** 2 <= radius * radius:
            hits.append(t)
    return min(hits) if hits else None
