"""Output-side processing: median filtering, histogram loss weights and the weighted MSE loss."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .gridmap import Layer

MIN_WEIGHT = 0.2
MAX_WEIGHT = 5.0

TRAVERSABILITY_RANGE = (0.0, 1.0)
NORMALIZED_ELEVATION_RANGE = (-1.0, 1.0)


class UndefinedLossError(ValueError):
    pass


def _as_layer(layer) -> Layer:
    if isinstance(layer, Layer):
        return layer
    values = np.asarray(layer)
    return Layer(values, np.isfinite(values))


def median_filter_5x5(layer: Layer | np.ndarray) -> Layer:
    """Replace each valid cell by the lower median of the valid cells in its 5x5 window.

    Invalid cells stay invalid and never contribute to a neighbour's median.
    """
    values, valid = _as_layer(layer)
    h, w = values.shape
    padded = np.full((h + 4, w + 4), np.nan)
    padded[2:-2, 2:-2] = np.where(valid, values, np.nan)
    windows = sliding_window_view(padded, (5, 5)).reshape(h, w, 25)
    ordered = np.sort(windows, axis=-1)  # NaN sorts last
    n = np.count_nonzero(~np.isnan(windows), axis=-1)
    idx = np.maximum(n - 1, 0) // 2
    med = np.take_along_axis(ordered, idx[..., None], axis=-1)[..., 0]
    out = np.where(valid, med, 0.0).astype(values.dtype)
    return Layer(out, valid.copy())


def fill_nearest(layer: Layer | np.ndarray) -> Layer:
    """Fill every invalid cell with the value of the nearest valid cell (Euclidean, in cells).

    Used to score sparse per-step estimates over the whole grid. A layer with no
    valid cell is returned unchanged.
    """
    values, valid = _as_layer(layer)
    if not valid.any() or valid.all():
        return Layer(np.where(valid, values, 0.0).astype(values.dtype), valid.copy())
    _, (rows, cols) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return Layer(values[rows, cols], np.ones_like(valid))


@dataclass(frozen=True, eq=False)
class WeightTable:
    n_bins: int
    edges: np.ndarray
    weights: np.ndarray
    counts: np.ndarray | None = None

    def bin_index(self, values) -> np.ndarray:
        """Bin of each value; values on an internal edge go to the upper bin, the max to the last."""
        idx = np.searchsorted(self.edges, np.asarray(values, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def lookup(self, values) -> np.ndarray:
        return self.weights[self.bin_index(values)]

    def frequencies(self) -> np.ndarray | None:
        if self.counts is None:
            return None
        return self.counts / self.counts.sum()

    def to_dict(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "edges": [float(e) for e in self.edges],
            "weights": [float(w) for w in self.weights],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "WeightTable":
        edges = np.asarray(data["edges"], dtype=np.float64)
        weights = np.asarray(data["weights"], dtype=np.float64)
        n = int(data["n_bins"])
        if len(edges) != n + 1 or len(weights) != n:
            raise ValueError("weight table needs n_bins + 1 edges and n_bins weights")
        if np.any(weights < MIN_WEIGHT) or np.any(weights > MAX_WEIGHT):
            raise ValueError("weights must lie in [0.2, 5]")
        return cls(n, edges, weights)

    @classmethod
    def from_json(cls, text: str) -> "WeightTable":
        return cls.from_dict(json.loads(text))

    @classmethod
    def uniform(cls, n_bins: int, value_range=(0.0, 1.0)) -> "WeightTable":
        return cls(n_bins, np.linspace(*value_range, n_bins + 1), np.ones(n_bins))


class HistogramAccumulator:
    """Streaming histogram over a fixed value range; partial histograms merge by addition."""

    def __init__(self, n_bins: int = 100, value_range=TRAVERSABILITY_RANGE):
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        lo, hi = value_range
        if not hi > lo:
            raise ValueError("value range must be increasing")
        self.n_bins = n_bins
        self.edges = np.linspace(lo, hi, n_bins + 1)
        self.counts = np.zeros(n_bins, dtype=np.int64)

    def add(self, values, valid=None) -> None:
        values = np.asarray(values, dtype=np.float64)
        mask = np.isfinite(values) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(values)
        idx = np.searchsorted(self.edges, values[mask], side="right") - 1
        idx = np.clip(idx, 0, self.n_bins - 1)
        self.counts += np.bincount(idx, minlength=self.n_bins)

    def merge(self, other: "HistogramAccumulator") -> "HistogramAccumulator":
        if other.n_bins != self.n_bins or not np.array_equal(other.edges, self.edges):
            raise ValueError("cannot merge histograms with different bins")
        out = HistogramAccumulator.__new__(HistogramAccumulator)
        out.n_bins, out.edges = self.n_bins, self.edges
        out.counts = self.counts + other.counts
        return out

    def table(self) -> WeightTable:
        total = int(self.counts.sum())
        if total == 0:
            raise ValueError("no valid values to build a weight table from")
        weights = np.full(self.n_bins, MAX_WEIGHT)
        seen = self.counts > 0
        # 1 / (count / total * n_bins) written as one exact integer ratio
        raw = total / (self.counts[seen].astype(np.float64) * self.n_bins)
        weights[seen] = np.clip(raw, MIN_WEIGHT, MAX_WEIGHT)
        return WeightTable(self.n_bins, self.edges.copy(), weights, self.counts.copy())


def build_weight_table(values, n_bins: int = 100, value_range=TRAVERSABILITY_RANGE) -> WeightTable:
    """Clipped inverse normalized frequency per bin.

    ``values`` is an array, a ``Layer`` or an iterable of either (a dataset stream).
    Empty bins get the maximum weight.
    """
    acc = HistogramAccumulator(n_bins, value_range)
    for item in _iter_chunks(values):
        if isinstance(item, Layer):
            acc.add(item.values, item.valid)
        else:
            acc.add(item)
    return acc.table()


def _iter_chunks(values) -> Iterable:
    if isinstance(values, (Layer, np.ndarray)):
        yield values
        return
    items = list(values) if not isinstance(values, list) else values
    if items and all(np.isscalar(v) for v in items):
        yield np.asarray(items, dtype=np.float64)
        return
    yield from items


def wmse_loss(target, prediction, table: WeightTable) -> float:
    """Mean over valid target cells of ``w(target) * (target - prediction)^2``."""
    t = _as_layer(target)
    p = _as_layer(prediction)
    if t.values.shape != p.values.shape:
        raise ValueError("target and prediction shapes differ")
    mask = t.valid & p.valid
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise UndefinedLossError("no valid cells carry a supervision signal")
    tv = t.values[mask].astype(np.float64)
    pv = p.values[mask].astype(np.float64)
    return float(np.sum(table.lookup(tv) * (tv - pv) ** 2) / n)


def final_loss(trav_target, trav_prediction, trav_table, elev_target, elev_prediction, elev_table) -> float:
    """Traversability loss plus elevation loss."""
    return wmse_loss(trav_target, trav_prediction, trav_table) + wmse_loss(elev_target, elev_prediction, elev_table)
