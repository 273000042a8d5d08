"""Labeled point clouds and the similarity transforms used to pose them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument

N_LABELS = 24
ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """N points in millimetres with optional per-point tissue labels (0-23).

    Arrays are copied on construction and made read-only, so a cloud can be
    shared between threads without defensive copies.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgument(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.size == 0:
                lab = lab.reshape(0).astype(np.int64)
            if lab.ndim != 1 or lab.shape[0] != pts.shape[0]:
                raise InvalidArgument("labels must be a 1-D array with one entry per point")
            if lab.size and not np.issubdtype(lab.dtype, np.integer):
                if not np.all(lab == np.round(lab)):
                    raise InvalidArgument("labels must be integers")
            lab = lab.astype(np.int64)
            if lab.size and (lab.min() < 0 or lab.max() >= N_LABELS):
                raise InvalidArgument(f"labels must lie in [0, {N_LABELS - 1}]")
            object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def with_points(self, points) -> "LabeledCloud":
        return LabeledCloud(points, self.labels)

    def take(self, index) -> "LabeledCloud":
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return LabeledCloud(self.points[index], labels)

    def equals(self, other: "LabeledCloud") -> bool:
        if not np.array_equal(self.points, other.points):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    def bbox(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = s * R(angles) * p + delta, angles in radians."""

    delta: tuple = (0.0, 0.0, 0.0)
    angles: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        delta = tuple(float(v) for v in self.delta)
        angles = tuple(float(v) for v in self.angles)
        if len(delta) != 3 or len(angles) != 3:
            raise InvalidArgument("delta and angles need three components")
        if not all(math.isfinite(v) for v in delta + angles + (float(self.scale),)):
            raise InvalidArgument("transform parameters must be finite")
        if not self.scale > 0:
            raise InvalidArgument(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def from_degrees(cls, delta=(0.0, 0.0, 0.0), angles_deg=(0.0, 0.0, 0.0), scale=1.0):
        return cls(delta, tuple(math.radians(a) for a in angles_deg), scale)

    def to_dict(self) -> dict:
        return {
            "delta_mm": list(self.delta),
            "angles_rad": list(self.angles),
            "angles_deg": [math.degrees(a) for a in self.angles],
            "scale": self.scale,
        }


def _finite_vec3(v, what) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise InvalidArgument(f"{what} must have three components")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument(f"{what} must be finite")
    return a


def rot_x(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """Return ``Rz(tz) @ Ry(ty) @ Rx(tx)`` for column vectors.

    Parameters
    ----------
    angles : sequence of 3 floats
        Rotation about x, y and z in radians.
    """
    tx, ty, tz = _finite_vec3(angles, "angles")
    return rot_z(tz) @ rot_y(ty) @ rot_x(tx)


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidArgument("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise InvalidArgument("rotation matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgument("rotation matrix must have determinant +1")
    return R


def translate(cloud: LabeledCloud, delta) -> LabeledCloud:
    d = _finite_vec3(delta, "delta")
    return cloud.with_points(cloud.points + d)


def rotate(cloud: LabeledCloud, R) -> LabeledCloud:
    R = check_rotation(R)
    return cloud.with_points(cloud.points @ R.T)


def scale(cloud: LabeledCloud, s: float) -> LabeledCloud:
    s = float(s)
    if not math.isfinite(s) or s <= 0:
        raise InvalidArgument(f"scale factor must be positive and finite, got {s}")
    return cloud.with_points(cloud.points * s)


def apply_transform(cloud: LabeledCloud, t: SimilarityTransform) -> LabeledCloud:
    """Scale, then rotate, then translate every point."""
    R = rotation_matrix(t.angles)
    return cloud.with_points(t.scale * (cloud.points @ R.T) + np.asarray(t.delta))


# -- CSV io -----------------------------------------------------------------


def read_cloud(path) -> LabeledCloud:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidArgument(f"{path}: empty file") from None
        if header not in (["x", "y", "z"], ["x", "y", "z", "label"]):
            raise InvalidArgument(f"{path}: unexpected header {header}")
        has_labels = len(header) == 4
        pts, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InvalidArgument(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                pts.append([float(c) for c in row[:3]])
                if has_labels:
                    labels.append(int(row[3]))
            except ValueError as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
    return LabeledCloud(np.array(pts, dtype=np.float64).reshape(-1, 3),
                        np.array(labels, dtype=np.int64) if has_labels else None)


def write_cloud(cloud: LabeledCloud, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if cloud.labels is None:
            w.writerow(["x", "y", "z"])
            for p in cloud.points:
                w.writerow([f"{v:.6f}" for v in p])
        else:
            w.writerow(["x", "y", "z", "label"])
            for p, lab in zip(cloud.points, cloud.labels):
                w.writerow([f"{v:.6f}" for v in p] + [int(lab)])
