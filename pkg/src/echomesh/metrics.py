"""Evaluation and clinical measures: voxel IoU, MSE, LV volume, EF and PCC."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import DegenerateGeometry, InvalidArgument, OutOfDomain, UndefinedCorrelation
from .geometry import LabeledCloud
from .ot import DeformationSamples
from .seeding import generator

DEFAULT_RESOLUTION = 128
BBOX_MARGIN = 0.01
DEFAULT_SUBSAMPLE_RATE = 0.1


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def same_domain(self, other: "VoxelGrid") -> bool:
        return (self.occupancy.shape == other.occupancy.shape
                and np.array_equal(self.bbox_min, other.bbox_min)
                and np.array_equal(self.bbox_max, other.bbox_max))


def _check_bbox(bbox_min, bbox_max):
    lo = np.asarray(bbox_min, dtype=np.float64).reshape(3)
    hi = np.asarray(bbox_max, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
        raise InvalidArgument("bbox min must be below max on every axis")
    return lo, hi


def joint_bbox(*clouds: LabeledCloud, margin: float = BBOX_MARGIN):
    """Bounding box of all clouds grown by ``margin`` of its extent on every side."""
    pts = np.vstack([c.points for c in clouds if len(c)])
    if len(pts) == 0:
        raise InvalidArgument("cannot bound empty clouds")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.maximum((hi - lo) * margin, 1e-6)
    return lo - pad, hi + pad


def voxel_indices(points: np.ndarray, resolution: int, bbox_min, bbox_max) -> np.ndarray:
    """(n, 3) integer cell indices; points on an upper face go to the last cell."""
    lo, hi = _check_bbox(bbox_min, bbox_max)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    outside = np.any((points < lo) | (points > hi), axis=1)
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise OutOfDomain(f"point {i} at {points[i].tolist()} lies outside the voxel bbox", index=i)
    idx = np.floor((points - lo) / (hi - lo) * resolution).astype(np.int64)
    return np.minimum(idx, resolution - 1)


def voxelize(cloud: LabeledCloud, resolution: int = DEFAULT_RESOLUTION, bbox=None) -> VoxelGrid:
    """Occupancy of an R^3 grid over ``bbox`` (default: the cloud's padded bbox)."""
    resolution = int(resolution)
    if resolution < 1:
        raise InvalidArgument("resolution must be at least 1")
    lo, hi = _check_bbox(*(bbox if bbox is not None else joint_bbox(cloud)))
    occ = np.zeros((resolution,) * 3, dtype=bool)
    if len(cloud):
        idx = voxel_indices(cloud.points, resolution, lo, hi)
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(occ, lo, hi)


def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """TP / (TP + FP + FN); 1.0 when both grids are empty."""
    if not a.same_domain(b):
        raise InvalidArgument("IoU needs grids with identical resolution and bbox")
    union = int(np.count_nonzero(a.occupancy | b.occupancy))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.occupancy & b.occupancy)) / union


def compare_clouds(pred: LabeledCloud, target: LabeledCloud, resolution: int = DEFAULT_RESOLUTION) -> float:
    """IoU of two clouds voxelized over their shared padded bbox."""
    box = joint_bbox(pred, target)
    return iou(voxelize(pred, resolution, box), voxelize(target, resolution, box))


def mse(pred: DeformationSamples, target: DeformationSamples) -> float:
    """Mean of squared differences over all 3N scalar components."""
    a = pred.vectors if isinstance(pred, DeformationSamples) else np.asarray(pred, dtype=np.float64)
    b = target.vectors if isinstance(target, DeformationSamples) else np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InvalidArgument("MSE of empty inputs is undefined")
    return float(np.mean((a - b) ** 2))


def subsample(cloud: LabeledCloud, rate: float = DEFAULT_SUBSAMPLE_RATE, seed: int = 0) -> LabeledCloud:
    """Keep ceil(rate * N) points chosen uniformly without replacement, in input order."""
    if not 0 < rate <= 1:
        raise InvalidArgument(f"rate must be in (0, 1], got {rate}")
    n = len(cloud)
    k = math.ceil(rate * n)
    if k >= n:
        return cloud
    keep = np.sort(generator(seed).choice(n, size=k, replace=False))
    return cloud.take(keep)


def extract_region(cloud: LabeledCloud, labels: Iterable[int]) -> LabeledCloud:
    if cloud.labels is None:
        raise InvalidArgument("region extraction needs a labeled cloud")
    wanted = np.fromiter((int(x) for x in labels), dtype=np.int64)
    return cloud.take(np.flatnonzero(np.isin(cloud.labels, wanted)))


def delaunay_volume(cloud: LabeledCloud) -> float:
    """Total volume of the 3-D Delaunay tetrahedralization (the convex-hull volume)."""
    pts = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 4:
        raise DegenerateGeometry(f"need at least 4 points for a volume, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometry("points are coplanar (or collinear); volume is undefined")
    try:
        # Qhull's triangulated output ("Qt", on by default) splits cospherical
        # cells deterministically; the pieces may be flat but never overlap
        tri = Delaunay(centered)
    except QhullError as exc:
        raise DegenerateGeometry(f"Delaunay triangulation failed: {exc}") from None
    t = centered[tri.simplices]
    det = np.linalg.det(t[:, 1:] - t[:, :1])
    return float(np.sum(np.abs(det)) / 6.0)


def ejection_fraction(edv: float, esv: float):
    """Return ``(sv, ef_percent)`` from end-diastolic and end-systolic volumes."""
    if not edv > 0:
        raise InvalidArgument("EDV must be positive")
    if not 0 <= esv <= edv:
        raise InvalidArgument("ESV must lie in [0, EDV]")
    sv = edv - esv
    return sv, sv / edv * 100.0


def ef(edv: float, esv: float) -> float:
    return ejection_fraction(edv, esv)[1]


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise InvalidArgument("pearson needs equal-length inputs")
    if x.size < 2:
        raise UndefinedCorrelation("pearson needs at least two pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("correlation is undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class VolumeReport:
    region_labels: tuple
    point_count_used: int
    volume: float
    subsample_rate: float
    seed: int


def lv_volume(cloud: LabeledCloud, lv_labels, rate: float = DEFAULT_SUBSAMPLE_RATE, seed: int = 0) -> VolumeReport:
    """Subsample, keep the ventricle labels, and take the Delaunay volume."""
    region = extract_region(subsample(cloud, rate, seed), lv_labels)
    return VolumeReport(tuple(sorted(int(x) for x in lv_labels)), len(region),
                        delaunay_volume(region), rate, seed)


# -- patient tables -----------------------------------------------------------


@dataclass
class PatientRecord:
    patient_id: str
    glps: Optional[float]
    ef: Optional[float]  # fraction in [0, 1]


def read_patients(path) -> list:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "glps", "ef"} - set(reader.fieldnames or ())
        if missing:
            raise InvalidArgument(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            glps = row["glps"].strip()
            efv = row["ef"].strip()
            rec = PatientRecord(row["patient_id"].strip(),
                                float(glps) if glps else None,
                                float(efv) if efv else None)
            if rec.glps is not None and not math.isfinite(rec.glps):
                raise InvalidArgument(f"{path}: patient {rec.patient_id} has non-finite GLPS")
            if rec.ef is not None and not 0 <= rec.ef <= 1:
                raise InvalidArgument(f"{path}: patient {rec.patient_id} EF must be a fraction in [0, 1]")
            out.append(rec)
    return out
