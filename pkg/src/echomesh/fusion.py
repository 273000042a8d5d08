"""Deformation grids: trilinear resampling, weighted fusion and template warping.

Grid values live on nodes. Axis 0 (D) runs along x, axis 1 (H) along y and
axis 2 (W) along z; node ``(i, j, k)`` sits at
``bbox_min + (i, j, k) / (dims - 1) * (bbox_max - bbox_min)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, OutOfDomain
from .geometry import LabeledCloud

GRID_MAGIC = b"S2MF"
_HEADER = struct.Struct("<4s3I6f")


@dataclass(frozen=True, eq=False)
class VectorGrid:
    values: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or v.shape[3] != 3 or min(v.shape[:3]) < 1:
            raise InvalidArgument(f"grid values must have shape (D, H, W, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("grid values must be finite")
        lo = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise InvalidArgument("bbox min must be below max on every axis")
        for name, a in (("values", v), ("bbox_min", lo), ("bbox_max", hi)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def dims(self) -> tuple:
        return tuple(self.values.shape[:3])

    def same_domain(self, other: "VectorGrid") -> bool:
        return (self.dims == other.dims and np.array_equal(self.bbox_min, other.bbox_min)
                and np.array_equal(self.bbox_max, other.bbox_max))

    def node_coordinates(self):
        """Per-axis node coordinate vectors (xs, ys, zs)."""
        return tuple(
            np.linspace(self.bbox_min[a], self.bbox_max[a], n) if n > 1 else np.array([self.bbox_min[a]])
            for a, n in enumerate(self.dims)
        )

    def node_points(self) -> np.ndarray:
        xs, ys, zs = self.node_coordinates()
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)


def grid_from_function(fn, dims: Sequence[int], bbox_min, bbox_max) -> VectorGrid:
    """Sample ``fn`` (an (n, 3) -> (n, 3) map, e.g. an RBFField) at every node."""
    probe = VectorGrid(np.zeros(tuple(dims) + (3,)), bbox_min, bbox_max)
    pts = probe.node_points()
    vals = np.asarray(fn(pts.reshape(-1, 3)), dtype=np.float64).reshape(pts.shape)
    return VectorGrid(vals, bbox_min, bbox_max)


def _linear_along(values: np.ndarray, axis: int, idx: np.ndarray, frac: np.ndarray) -> np.ndarray:
    lo = np.take(values, idx, axis=axis)
    hi = np.take(values, np.minimum(idx + 1, values.shape[axis] - 1), axis=axis)
    shape = [1] * values.ndim
    shape[axis] = -1
    t = frac.reshape(shape)
    # lo + t*(hi - lo) keeps equal neighbours (constants) exact; t == 1 picks hi
    return np.where(t == 1.0, hi, lo + t * (hi - lo))


def _upsample_axis(n: int, factor: int):
    m = (n - 1) * factor + 1
    j = np.arange(m)
    idx = np.minimum(j // factor, max(n - 2, 0))
    frac = (j - idx * factor) / factor
    return idx, frac


def _resample_axis(n: int, m: int):
    if n == 1 or m == 1:
        return np.zeros(m, dtype=np.int64), np.zeros(m)
    t = np.arange(m) * (n - 1) / (m - 1)
    idx = np.minimum(np.floor(t).astype(np.int64), n - 2)
    return idx, t - idx


def trilinear_upsample(grid: VectorGrid, factor: int) -> VectorGrid:
    """Refine every cell ``factor`` times; original nodes are kept exactly."""
    if int(factor) != factor or factor < 1:
        raise InvalidArgument(f"upsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    out = grid.values
    for axis, n in enumerate(grid.dims):
        if n > 1 and factor > 1:
            out = _linear_along(out, axis, *_upsample_axis(n, factor))
    return VectorGrid(out, grid.bbox_min, grid.bbox_max)


def resample(grid: VectorGrid, dims: Sequence[int]) -> VectorGrid:
    """Trilinear resampling onto ``dims`` nodes spanning the same bbox.

    Unlike :func:`trilinear_upsample` the new node count need not be an
    integer refinement, e.g. 8 -> 32 nodes per axis.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidArgument("target dims must be three positive integers")
    out = grid.values
    for axis, (n, m) in enumerate(zip(grid.dims, dims)):
        out = _linear_along(out, axis, *_resample_axis(n, m))
    return VectorGrid(out, grid.bbox_min, grid.bbox_max)


def normalize_weights(raw, axis: int = 0) -> np.ndarray:
    """Softmax with max-subtraction along ``axis``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0 or raw.shape[axis] < 1:
        raise InvalidArgument("need at least one weight")
    if not np.all(np.isfinite(raw)):
        raise InvalidArgument("raw weights must be finite")
    z = np.exp(raw - raw.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def fuse(fields: Sequence[VectorGrid], weights, per_node: bool = False) -> VectorGrid:
    """Weighted sum of coarse fields.

    Parameters
    ----------
    fields : sequence of VectorGrid
        K grids over one domain.
    weights : array_like
        Normalized weights, shape (K,), or shape (K, D, H, W) when
        ``per_node`` is set.
    """
    fields = list(fields)
    if not fields:
        raise InvalidArgument("need at least one field")
    first = fields[0]
    for f in fields[1:]:
        if not f.same_domain(first):
            raise InvalidArgument("fields must share dims and bbox")
    w = np.asarray(weights, dtype=np.float64)
    expected = (len(fields),) + (first.dims if per_node else ())
    if w.shape != expected:
        raise InvalidArgument(f"weights must have shape {expected}, got {w.shape}")
    stack = np.stack([f.values for f in fields])
    if per_node:
        out = np.einsum("k...,k...c->...c", w, stack)
    else:
        out = np.tensordot(w, stack, axes=(0, 0))
    return VectorGrid(out, first.bbox_min, first.bbox_max)


def _index_coords(grid: VectorGrid, points: np.ndarray):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    outside = np.any((points < grid.bbox_min) | (points > grid.bbox_max), axis=1)
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise OutOfDomain(f"point {i} at {points[i].tolist()} lies outside the grid bbox", index=i)
    dims = np.asarray(grid.dims)
    t = (points - grid.bbox_min) / (grid.bbox_max - grid.bbox_min) * np.maximum(dims - 1, 0)
    idx = np.minimum(np.floor(t).astype(np.int64), np.maximum(dims - 2, 0))
    frac = np.where(dims > 1, t - idx, 0.0)
    return idx, frac


def cell_expansion(grid: VectorGrid, cell: Sequence[int], frac: Sequence[float]) -> np.ndarray:
    """Eight-term trilinear blend inside one cell at local coordinates ``frac``."""
    v = grid.values
    D, H, W = grid.dims
    i, j, k = (int(c) for c in cell)
    x, y, z = (float(f) for f in frac)
    i1, j1, k1 = min(i + 1, D - 1), min(j + 1, H - 1), min(k + 1, W - 1)
    return (v[i, j, k] * (1 - x) * (1 - y) * (1 - z)
            + v[i1, j, k] * x * (1 - y) * (1 - z)
            + v[i, j1, k] * (1 - x) * y * (1 - z)
            + v[i, j, k1] * (1 - x) * (1 - y) * z
            + v[i1, j, k1] * x * (1 - y) * z
            + v[i, j1, k1] * (1 - x) * y * z
            + v[i1, j1, k] * x * y * (1 - z)
            + v[i1, j1, k1] * x * y * z)


def sample_points(grid: VectorGrid, points) -> np.ndarray:
    """Trilinear interpolation of the grid at many points, shape (n, 3)."""
    idx, frac = _index_coords(grid, points)
    v = grid.values
    hi = np.minimum(idx + 1, np.asarray(grid.dims) - 1)
    out = np.zeros((len(idx), 3))
    for bx in (0, 1):
        wx = frac[:, 0] if bx else 1 - frac[:, 0]
        ix = hi[:, 0] if bx else idx[:, 0]
        for by in (0, 1):
            wy = frac[:, 1] if by else 1 - frac[:, 1]
            iy = hi[:, 1] if by else idx[:, 1]
            for bz in (0, 1):
                wz = frac[:, 2] if bz else 1 - frac[:, 2]
                iz = hi[:, 2] if bz else idx[:, 2]
                out += (wx * wy * wz)[:, None] * v[ix, iy, iz]
    return out


def sample_grid(grid: VectorGrid, point) -> np.ndarray:
    return sample_points(grid, np.asarray(point, dtype=np.float64).reshape(1, 3))[0]


def apply_grid(template: LabeledCloud, grid: VectorGrid) -> LabeledCloud:
    """Add the interpolated displacement to every template point."""
    return template.with_points(template.points + sample_points(grid, template.points))


# -- binary io --------------------------------------------------------------


def write_grid(grid: VectorGrid, path) -> None:
    D, H, W = grid.dims
    header = _HEADER.pack(GRID_MAGIC, D, H, W, *grid.bbox_min, *grid.bbox_max)
    Path(path).write_bytes(header + grid.values.astype("<f4").tobytes(order="C"))


def read_grid(path) -> VectorGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidArgument(f"{path}: truncated grid header")
    magic, D, H, W, *box = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise InvalidArgument(f"{path}: not a vector grid file")
    n = D * H * W * 3
    body = data[_HEADER.size:]
    if len(body) != 4 * n:
        raise InvalidArgument(f"{path}: expected {n} float32 values, found {len(body) // 4}")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(D, H, W, 3)
    return VectorGrid(vals, box[:3], box[3:])
