"""Segmentation evaluation: overlap, surface distances, detection rates.

Surface voxels are mask voxels with a face-adjacent background (or
out-of-grid) neighbor.  Directed surface distances come from an exact
Euclidean distance transform with anisotropic voxel spacing; the test suite
validates them against an all-pairs brute-force oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UndefinedDistanceError

_FACE_NEIGHBORHOOD = ndimage.generate_binary_structure(3, 1)


@dataclass
class BinaryMask:
    mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 3:
            raise ShapeError(f"mask must be 3D, got shape {self.mask.shape}")


@dataclass
class SurfaceSet:
    """Surface voxels of a mask, kept on their grid for distance transforms."""

    voxels: np.ndarray                   # boolean surface map
    spacing: tuple[float, float, float]

    @property
    def points(self):
        """Surface voxel coordinates in mm, one row per voxel."""
        return np.argwhere(self.voxels) * np.asarray(self.spacing)

    def __len__(self):
        return int(self.voxels.sum())


@dataclass
class MetricReport:
    """Per-case metric values; distances are None when undefined."""

    dsc: float
    hd95_mm: float | None
    assd_mm: float | None
    sensitivity: float
    precision: float


def _check_same_grid(x: BinaryMask, y: BinaryMask):
    if x.mask.shape != y.mask.shape:
        raise ShapeError(f"mask shapes differ: {x.mask.shape} vs {y.mask.shape}")
    if not np.allclose(x.spacing, y.spacing):
        raise ShapeError(f"mask spacings differ: {x.spacing} vs {y.spacing}")


def dsc(x: BinaryMask, y: BinaryMask) -> float:
    """Dice overlap 2|X∩Y| / (|X|+|Y|); two empty masks count as 1.0."""
    _check_same_grid(x, y)
    total = int(x.mask.sum()) + int(y.mask.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x.mask & y.mask).sum()) / total


def extract_surface(x: BinaryMask) -> SurfaceSet:
    """Mask voxels with a face-adjacent background or out-of-grid neighbor."""
    interior = ndimage.binary_erosion(x.mask, structure=_FACE_NEIGHBORHOOD)
    return SurfaceSet(x.mask & ~interior, x.spacing)


def directed_distances(a: SurfaceSet, b: SurfaceSet) -> np.ndarray:
    """Shortest distance in mm from every voxel of surface a to surface b."""
    if len(b) == 0:
        raise UndefinedDistanceError("cannot measure distances to an empty surface")
    if a.voxels.shape != b.voxels.shape or not np.allclose(a.spacing, b.spacing):
        raise ShapeError("surfaces must live on the same grid")
    dist_to_b = ndimage.distance_transform_edt(~b.voxels, sampling=b.spacing)
    return dist_to_b[a.voxels]


def _surface_pair(x: BinaryMask, y: BinaryMask):
    _check_same_grid(x, y)
    sx, sy = extract_surface(x), extract_surface(y)
    if len(sx) == 0 or len(sy) == 0:
        raise UndefinedDistanceError("surface distance needs two non-empty masks")
    return directed_distances(sx, sy), directed_distances(sy, sx)


def hd95(x: BinaryMask, y: BinaryMask) -> float:
    """Symmetric Hausdorff distance at the 95th percentile per direction.

    Percentiles interpolate linearly between order statistics, so the result
    is never larger than the exact (100th percentile) Hausdorff distance.
    """
    d_xy, d_yx = _surface_pair(x, y)
    return float(max(np.percentile(d_xy, 95), np.percentile(d_yx, 95)))


def assd(x: BinaryMask, y: BinaryMask) -> float:
    """Average symmetric surface distance: all directed distances, averaged."""
    d_xy, d_yx = _surface_pair(x, y)
    return float((d_xy.sum() + d_yx.sum()) / (len(d_xy) + len(d_yx)))


def sensitivity(pred: BinaryMask, gt: BinaryMask) -> float:
    """TP / (TP + FN); 1.0 when the ground truth is empty."""
    _check_same_grid(pred, gt)
    tp = int((pred.mask & gt.mask).sum())
    fn = int((~pred.mask & gt.mask).sum())
    return tp / (tp + fn) if tp + fn else 1.0


def precision(pred: BinaryMask, gt: BinaryMask) -> float:
    """TP / (TP + FP); 1.0 when the prediction is empty."""
    _check_same_grid(pred, gt)
    tp = int((pred.mask & gt.mask).sum())
    fp = int((pred.mask & ~gt.mask).sum())
    return tp / (tp + fp) if tp + fp else 1.0


def evaluate_case(pred: BinaryMask, gt: BinaryMask) -> MetricReport:
    """All five metrics for one case; undefined distances become None."""
    _check_same_grid(pred, gt)
    try:
        hd_value = hd95(pred, gt)
        assd_value = assd(pred, gt)
    except UndefinedDistanceError:
        hd_value = assd_value = None
    return MetricReport(
        dsc=dsc(pred, gt),
        hd95_mm=hd_value,
        assd_mm=assd_value,
        sensitivity=sensitivity(pred, gt),
        precision=precision(pred, gt),
    )


# -- reporting ----------------------------------------------------------------

CSV_HEADER = ["case_id", "fold", "dsc", "hd95_mm", "assd_mm", "sensitivity", "precision"]
_METRIC_FIELDS = ["dsc", "hd95_mm", "assd_mm", "sensitivity", "precision"]


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def write_metric_csv(path, rows, aggregate=True):
    """Write per-case rows plus mean / std / median aggregate rows.

    ``rows`` is a list of ``(case_id, fold, MetricReport)``.  Aggregates are
    taken per column over the cases where the metric is defined; std is the
    sample standard deviation.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for case_id, fold, report in rows:
            writer.writerow([case_id, fold] +
                            [_fmt(getattr(report, f)) for f in _METRIC_FIELDS])
        if aggregate and rows:
            columns = {f: [getattr(r, f) for _, _, r in rows if getattr(r, f) is not None]
                       for f in _METRIC_FIELDS}
            for name, reduce in (("mean", np.mean), ("std", _sample_std), ("median", np.median)):
                writer.writerow([name, ""] +
                                [_fmt(float(reduce(columns[f])) if columns[f] else None)
                                 for f in _METRIC_FIELDS])


def _sample_std(values):
    return np.std(values, ddof=1) if len(values) > 1 else 0.0


def read_metric_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
