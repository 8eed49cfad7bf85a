"""Evaluation of predicted grid maps against (pseudo) ground truth.

A cell contributes to a metric only if it is valid in both the target and the
prediction. Undefined quantities (no cells, no positives) are reported as
``None``, never as 0.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import PointCloud
from .gridmap import ELEVATION, RELIABILITY, TRAVERSABILITY, GridMap, Layer, cell_distances, points_to_cells

DEFAULT_FATAL_THRESHOLD = 0.9
DEFAULT_BIN_WIDTH = 1.0


class UndefinedMetricError(ValueError):
    pass


def _as_layer(layer) -> Layer:
    if isinstance(layer, Layer):
        return layer
    values = np.asarray(layer)
    return Layer(values, np.ones(values.shape, dtype=bool))


def _joint(target, prediction, mask=None):
    t = _as_layer(target)
    p = _as_layer(prediction)
    if t.values.shape != p.values.shape:
        raise ValueError(f"shape mismatch {t.values.shape} vs {p.values.shape}")
    joint = t.valid & p.valid
    if mask is not None:
        joint = joint & mask
    return t.values[joint].astype(np.float64), p.values[joint].astype(np.float64), joint


def _mean(total: float, n: int, name: str) -> float:
    if n == 0:
        raise UndefinedMetricError(f"{name} is undefined without jointly valid cells")
    return total / n


def mae(target, prediction) -> float:
    t, p, _ = _joint(target, prediction)
    return _mean(float(np.sum(np.abs(t - p))), t.size, "MAE")


def mse(target, prediction) -> float:
    t, p, _ = _joint(target, prediction)
    return _mean(float(np.sum((t - p) ** 2)), t.size, "MSE")


def _reliability_at(reliability, joint) -> np.ndarray:
    c = _as_layer(reliability)
    if not np.all(c.valid[joint]):
        raise ValueError("reliability must be valid wherever target and prediction are")
    return c.values[joint].astype(np.float64)


def wmae(target, prediction, reliability) -> float:
    """Reliability-weighted MAE, normalized by the cell count (not by the weight sum)."""
    t, p, joint = _joint(target, prediction)
    c = _reliability_at(reliability, joint)
    return _mean(float(np.sum(c * np.abs(t - p))), t.size, "WMAE")


def wmse(target, prediction, reliability) -> float:
    t, p, joint = _joint(target, prediction)
    c = _reliability_at(reliability, joint)
    return _mean(float(np.sum(c * (t - p) ** 2)), t.size, "WMSE")


def hazard_classify(traversability, fatal_threshold: float = DEFAULT_FATAL_THRESHOLD) -> Layer:
    """Binary hazard layer: value >= threshold. Validity is carried over."""
    if not 0.0 <= fatal_threshold <= 1.0:
        raise ValueError("fatal threshold must lie in [0, 1]")
    layer = _as_layer(traversability)
    return Layer((layer.values >= fatal_threshold) & layer.valid, layer.valid.copy())


class PRF(NamedTuple):
    precision: float | None
    recall: float | None
    f1: float | None
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return self._asdict()


def prf_from_counts(tp: int, fp: int, fn: int, tn: int = 0) -> PRF:
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    # 2PR / (P + R) == 2TP / (2TP + FP + FN); the latter is defined whenever any error or hit exists
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom > 0 else None
    return PRF(precision, recall, f1, int(tp), int(fp), int(fn), int(tn))


def confusion(gt_binary, pred_binary, mask=None) -> tuple[int, int, int, int]:
    g = _as_layer(gt_binary)
    p = _as_layer(pred_binary)
    joint = g.valid & p.valid
    if mask is not None:
        joint = joint & mask
    gv = g.values.astype(bool)[joint]
    pv = p.values.astype(bool)[joint]
    tp = int(np.count_nonzero(gv & pv))
    fp = int(np.count_nonzero(~gv & pv))
    fn = int(np.count_nonzero(gv & ~pv))
    tn = int(np.count_nonzero(~gv & ~pv))
    return tp, fp, fn, tn


def hazard_prf(gt_binary, pred_binary) -> PRF:
    return prf_from_counts(*confusion(gt_binary, pred_binary))


def observed_cells(grid: GridMap, cloud: PointCloud) -> np.ndarray:
    """Cells that received at least one point of a cloud given in the map frame."""
    rows, cols, inside = points_to_cells(grid.spec, cloud.points)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[rows[inside], cols[inside]] = True
    return mask


# --------------------------------------------------------------------------- #
# dataset-level accumulation


@dataclass
class ErrorSums:
    """Per-sample partial sums; totals use math.fsum so merge order cannot change results."""

    n: list = field(default_factory=list)
    abs_err: list = field(default_factory=list)
    sq_err: list = field(default_factory=list)
    w_abs_err: list = field(default_factory=list)
    w_sq_err: list = field(default_factory=list)
    weighted: bool = True

    def add(self, target, prediction, mask=None, reliability=None) -> None:
        t, p, joint = _joint(target, prediction, mask)
        d = t - p
        self.n.append(int(t.size))
        self.abs_err.append(float(np.sum(np.abs(d))))
        self.sq_err.append(float(np.sum(d * d)))
        if reliability is None:
            self.weighted = False
        elif self.weighted:
            c = _reliability_at(reliability, joint)
            self.w_abs_err.append(float(np.sum(c * np.abs(d))))
            self.w_sq_err.append(float(np.sum(c * d * d)))

    def merge(self, other: "ErrorSums") -> "ErrorSums":
        return ErrorSums(
            self.n + other.n,
            self.abs_err + other.abs_err,
            self.sq_err + other.sq_err,
            self.w_abs_err + other.w_abs_err,
            self.w_sq_err + other.w_sq_err,
            self.weighted and other.weighted,
        )

    def summary(self) -> dict:
        n = sum(self.n)

        def avg(parts):
            return math.fsum(parts) / n if n else None

        return {
            "n_cells": n,
            "mae": avg(self.abs_err),
            "mse": avg(self.sq_err),
            "wmae": avg(self.w_abs_err) if self.weighted else None,
            "wmse": avg(self.w_sq_err) if self.weighted else None,
        }


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, gt_binary, pred_binary, mask=None) -> None:
        tp, fp, fn, tn = confusion(gt_binary, pred_binary, mask)
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.tn += tn

    def merge(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def summary(self) -> dict:
        return prf_from_counts(self.tp, self.fp, self.fn, self.tn).as_dict()


SPLITS = ("observed", "unobserved", "combined")


@dataclass
class SplitSums:
    traversability: ErrorSums = field(default_factory=ErrorSums)
    elevation: ErrorSums = field(default_factory=ErrorSums)
    hazard: Confusion = field(default_factory=Confusion)

    def merge(self, other: "SplitSums") -> "SplitSums":
        return SplitSums(
            self.traversability.merge(other.traversability),
            self.elevation.merge(other.elevation),
            self.hazard.merge(other.hazard),
        )

    def summary(self) -> dict:
        return {
            "traversability": self.traversability.summary(),
            "elevation": self.elevation.summary(),
            "hazard": self.hazard.summary(),
        }


class Evaluator:
    """Accumulates metrics over many (ground truth, prediction) map pairs."""

    def __init__(self, fatal_threshold: float = DEFAULT_FATAL_THRESHOLD, bin_width: float = DEFAULT_BIN_WIDTH):
        if not bin_width > 0:
            raise ValueError("bin width must be positive")
        self.fatal_threshold = float(fatal_threshold)
        self.bin_width = float(bin_width)
        self.n_samples = 0
        self.splits = {name: SplitSums() for name in SPLITS}
        self.bins: dict[int, tuple[ErrorSums, ErrorSums, Confusion]] = {}
        self.has_observation_split = False

    def _update(self, sums: SplitSums, gt: GridMap, pred: GridMap, mask) -> None:
        reliability = gt.layer(RELIABILITY) if RELIABILITY in gt else None
        if TRAVERSABILITY in gt and TRAVERSABILITY in pred:
            sums.traversability.add(gt.layer(TRAVERSABILITY), pred.layer(TRAVERSABILITY), mask, reliability)
            sums.hazard.add(
                hazard_classify(gt.layer(TRAVERSABILITY), self.fatal_threshold),
                hazard_classify(pred.layer(TRAVERSABILITY), self.fatal_threshold),
                mask,
            )
        if ELEVATION in gt and ELEVATION in pred:
            sums.elevation.add(gt.layer(ELEVATION), pred.layer(ELEVATION), mask, reliability)

    def add(self, gt: GridMap, pred: GridMap, cloud: PointCloud | None = None) -> None:
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
        self.n_samples += 1
        self._update(self.splits["combined"], gt, pred, None)
        if cloud is not None:
            self.has_observation_split = True
            seen = observed_cells(gt, cloud)
            self._update(self.splits["observed"], gt, pred, seen)
            self._update(self.splits["unobserved"], gt, pred, ~seen)
        bin_index = np.floor(cell_distances(gt.spec) / self.bin_width).astype(np.int64)
        for b in range(int(bin_index.max()) + 1):
            mask = bin_index == b
            trav, elev, haz = self.bins.setdefault(b, (ErrorSums(), ErrorSums(), Confusion()))
            if TRAVERSABILITY in gt and TRAVERSABILITY in pred:
                trav.add(gt.layer(TRAVERSABILITY), pred.layer(TRAVERSABILITY), mask)
                haz.add(
                    hazard_classify(gt.layer(TRAVERSABILITY), self.fatal_threshold),
                    hazard_classify(pred.layer(TRAVERSABILITY), self.fatal_threshold),
                    mask,
                )
            if ELEVATION in gt and ELEVATION in pred:
                elev.add(gt.layer(ELEVATION), pred.layer(ELEVATION), mask)

    def merge(self, other: "Evaluator") -> "Evaluator":
        if (self.fatal_threshold, self.bin_width) != (other.fatal_threshold, other.bin_width):
            raise ValueError("cannot merge evaluators with different settings")
        out = Evaluator(self.fatal_threshold, self.bin_width)
        out.n_samples = self.n_samples + other.n_samples
        out.has_observation_split = self.has_observation_split or other.has_observation_split
        out.splits = {k: self.splits[k].merge(other.splits[k]) for k in SPLITS}
        for b in sorted(set(self.bins) | set(other.bins)):
            empty = (ErrorSums(), ErrorSums(), Confusion())
            a, c = self.bins.get(b, empty), other.bins.get(b, empty)
            out.bins[b] = (a[0].merge(c[0]), a[1].merge(c[1]), a[2].merge(c[2]))
        return out

    def report(self) -> "EvalReport":
        combined = self.splits["combined"].summary()
        bins = []
        for b in sorted(self.bins):
            trav, elev, haz = self.bins[b]
            t, e, h = trav.summary(), elev.summary(), haz.summary()
            bins.append(
                {
                    "bin": b,
                    "range_min": b * self.bin_width,
                    "range_max": (b + 1) * self.bin_width,
                    "n_cells": t["n_cells"],
                    "precision": h["precision"],
                    "recall": h["recall"],
                    "f1": h["f1"],
                    "mse": t["mse"],
                    "elevation_mae": e["mae"],
                }
            )
        split = {"combined": combined}
        if self.has_observation_split:
            split["observed"] = self.splits["observed"].summary()
            split["unobserved"] = self.splits["unobserved"].summary()
        return EvalReport(
            traversability=combined["traversability"],
            elevation=combined["elevation"],
            hazard=combined["hazard"],
            distance_bins=bins,
            split=split,
            fatal_threshold=self.fatal_threshold,
            bin_width=self.bin_width,
            n_samples=self.n_samples,
        )


@dataclass
class EvalReport:
    traversability: dict
    elevation: dict
    hazard: dict
    distance_bins: list
    split: dict
    fatal_threshold: float
    bin_width: float
    n_samples: int

    @property
    def mae(self):
        return self.elevation["mae"]

    @property
    def wmae(self):
        return self.elevation["wmae"]

    @property
    def mse(self):
        return self.traversability["mse"]

    @property
    def wmse(self):
        return self.traversability["wmse"]

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "fatal_threshold": self.fatal_threshold,
            "bin_width": self.bin_width,
            "traversability": self.traversability,
            "elevation": self.elevation,
            "hazard": self.hazard,
            "split": self.split,
            "distance_bins": self.distance_bins,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def bins_csv(self) -> str:
        cols = ["bin", "range_min", "range_max", "n_cells", "precision", "recall", "f1", "mse", "elevation_mae"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.distance_bins:
            writer.writerow(["" if row[c] is None else repr(row[c]) for c in cols])
        return buf.getvalue()


def evaluate(gt: GridMap, pred: GridMap, cloud: PointCloud | None = None, **kwargs) -> EvalReport:
    ev = Evaluator(**kwargs)
    ev.add(gt, pred, cloud)
    return ev.report()


def distance_binned(gt: GridMap, pred: GridMap, bin_width: float = DEFAULT_BIN_WIDTH,
                    fatal_threshold: float = DEFAULT_FATAL_THRESHOLD) -> list[dict]:
    """Per-bin hazard P/R/F1 and traversability MSE; bin = floor(distance / bin_width)."""
    return evaluate(gt, pred, fatal_threshold=fatal_threshold, bin_width=bin_width).distance_bins


def split_observed(gt: GridMap, pred: GridMap, cloud: PointCloud,
                   fatal_threshold: float = DEFAULT_FATAL_THRESHOLD) -> dict:
    """Metrics for cells with LiDAR returns, cells without, and all cells together."""
    return evaluate(gt, pred, cloud, fatal_threshold=fatal_threshold).split
