"""Echocardiographic scan sectors: slicing, rasterizing and overlay scoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import InvalidArgument
from .geometry import LabeledCloud

VIEW_NAMES = ("A4C", "A2C", "A3C", "Basal", "MidCavity", "Apical")
LONG_AXIS_VIEWS = ("A4C", "A2C", "A3C")
SHORT_AXIS_VIEWS = ("Basal", "MidCavity", "Apical")

# Sector origins (mm) recommended for each view.
APICAL_PROBE_ORIGIN = (62.63, -60.94, -28.13)
VIEW_ORIGINS = {
    "A4C": APICAL_PROBE_ORIGIN,
    "A2C": APICAL_PROBE_ORIGIN,
    "A3C": APICAL_PROBE_ORIGIN,
    "Basal": (16.27, -8.42, -9.61),
    "MidCavity": (39.04, -20.21, -23.07),
    "Apical": (45.55, -23.58, -26.91),
}
# Rotation of the imaging plane about the sector axis, relative to A4C.
LONG_AXIS_PLANE_DEG = {"A4C": 0.0, "A2C": 60.0, "A3C": 120.0}

DEFAULT_HALF_ANGLE_DEG = 45.0
DEFAULT_DEPTH_MM = 150.0
DEFAULT_SLAB_HALF_THICKNESS_MM = 1.0
DEFAULT_RASTER = (256, 256)
DEFAULT_PIXEL_SIZE_MM = 0.7

_UNIT_TOL = 1e-9


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise InvalidArgument("cannot normalize a zero or non-finite vector")
    return v / n


def _perpendicular(axis: np.ndarray) -> np.ndarray:
    # Gram-Schmidt against the world axis least aligned with `axis`.
    ref = np.eye(3)[int(np.argmin(np.abs(axis)))]
    return _unit(ref - axis * (ref @ axis))


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues' formula
    c, s = math.cos(angle), math.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1 - c)


@dataclass(frozen=True, eq=False)
class ViewDefinition:
    """A planar scan sector.

    The imaging plane is spanned by ``axis`` (sector centre line) and ``up``;
    its normal is ``axis x up``.
    """

    name: str
    origin: np.ndarray
    axis: np.ndarray
    up: np.ndarray
    half_angle: float = DEFAULT_HALF_ANGLE_DEG
    depth: float = DEFAULT_DEPTH_MM
    slab_half_thickness: float = DEFAULT_SLAB_HALF_THICKNESS_MM

    def __post_init__(self):
        for name in ("origin", "axis", "up"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.shape != (3,) or not np.all(np.isfinite(a)):
                raise InvalidArgument(f"view {self.name!r}: {name} must be 3 finite numbers")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if abs(np.linalg.norm(self.axis) - 1) > _UNIT_TOL or abs(np.linalg.norm(self.up) - 1) > _UNIT_TOL:
            raise InvalidArgument(f"view {self.name!r}: axis and up must be unit vectors")
        if abs(self.axis @ self.up) > _UNIT_TOL:
            raise InvalidArgument(f"view {self.name!r}: axis and up must be orthogonal")
        if not 0 < self.half_angle < 90:
            raise InvalidArgument(f"view {self.name!r}: half_angle must be in (0, 90) degrees")
        if not self.depth > 0 or not self.slab_half_thickness > 0:
            raise InvalidArgument(f"view {self.name!r}: depth and slab thickness must be positive")

    @property
    def normal(self) -> np.ndarray:
        return _unit(np.cross(self.axis, self.up))

    def moved(self, R=None, delta=(0.0, 0.0, 0.0)) -> "ViewDefinition":
        """The same sector after the rigid motion ``p -> R p + delta``."""
        R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
        return replace(self, origin=R @ self.origin + np.asarray(delta, dtype=np.float64),
                       axis=R @ self.axis, up=R @ self.up)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "origin": self.origin.tolist(),
            "axis": self.axis.tolist(),
            "up": self.up.tolist(),
            "half_angle_deg": self.half_angle,
            "depth_mm": self.depth,
            "slab_half_thickness_mm": self.slab_half_thickness,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ViewDefinition":
        try:
            return cls(
                name=str(obj["name"]),
                origin=obj["origin"],
                axis=obj["axis"],
                up=obj["up"],
                half_angle=float(obj.get("half_angle_deg", DEFAULT_HALF_ANGLE_DEG)),
                depth=float(obj.get("depth_mm", DEFAULT_DEPTH_MM)),
                slab_half_thickness=float(obj.get("slab_half_thickness_mm", DEFAULT_SLAB_HALF_THICKNESS_MM)),
            )
        except KeyError as exc:
            raise InvalidArgument(f"view definition missing key {exc}") from None


def long_axis_direction() -> np.ndarray:
    """Unit vector from the basal toward the apical short-axis origin."""
    return _unit(np.subtract(VIEW_ORIGINS["Apical"], VIEW_ORIGINS["Basal"]))


def builtin_views(
    cloud: Optional[LabeledCloud] = None,
    atria_labels: Optional[Iterable[int]] = None,
    half_angle: float = DEFAULT_HALF_ANGLE_DEG,
    depth: float = DEFAULT_DEPTH_MM,
    slab_half_thickness: float = DEFAULT_SLAB_HALF_THICKNESS_MM,
) -> list[ViewDefinition]:
    """The six standard views at their recommended sector origins.

    Apical long-axis views look from the shared apical probe origin toward
    the centroid of the atria when a labeled ``cloud`` and ``atria_labels``
    are given, otherwise toward the basal origin. Short-axis planes are
    normal to the ventricular long axis through the three short-axis origins.
    """
    common = dict(half_angle=half_angle, depth=depth, slab_half_thickness=slab_half_thickness)
    apex = np.asarray(APICAL_PROBE_ORIGIN)
    target = np.asarray(VIEW_ORIGINS["Basal"])
    if cloud is not None and atria_labels is not None:
        if cloud.labels is None:
            raise InvalidArgument("atria-directed views need a labeled cloud")
        sel = np.isin(cloud.labels, list(atria_labels))
        if not sel.any():
            raise InvalidArgument("no points carry the requested atria labels")
        target = cloud.points[sel].mean(axis=0)
    la_axis = _unit(target - apex)
    la_up0 = _perpendicular(la_axis)

    views = []
    for name in LONG_AXIS_VIEWS:
        up = _rotate_about(la_up0, la_axis, math.radians(LONG_AXIS_PLANE_DEG[name]))
        views.append(ViewDefinition(name, VIEW_ORIGINS[name], la_axis, _unit(up), **common))

    long_axis = long_axis_direction()
    sa_axis = _perpendicular(long_axis)
    sa_up = _unit(np.cross(long_axis, sa_axis))
    for name in SHORT_AXIS_VIEWS:
        views.append(ViewDefinition(name, VIEW_ORIGINS[name], sa_axis, sa_up, **common))
    return views


def load_views(path) -> list[ViewDefinition]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise InvalidArgument("view file must hold a JSON array")
    return [ViewDefinition.from_json(o) for o in data]


def save_views(views, path) -> None:
    Path(path).write_text(json.dumps([v.to_json() for v in views], indent=2), encoding="utf-8")


# -- slicing ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlanarSlice:
    """Slice points in plane coordinates: u along the sector axis, v along up."""

    points2d: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points2d, dtype=np.float64).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, "points2d", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise InvalidArgument("slice labels must match point count")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.points2d.shape[0]


def sector_selection(points: np.ndarray, view: ViewDefinition):
    """Boolean mask of points inside the slab sector, and their (u, v, w) coordinates."""
    rel = points - view.origin
    u = rel @ view.axis
    v = rel @ view.up
    w = rel @ view.normal
    radial = np.hypot(u, v)
    # angle(in-plane projection, axis) <= half_angle  <=>  u >= radial * cos(half_angle)
    cos_half = math.cos(math.radians(view.half_angle))
    keep = (np.abs(w) <= view.slab_half_thickness) & (radial <= view.depth) & (u >= radial * cos_half)
    return keep, u, v, w


def slice_cloud(cloud: LabeledCloud, view: ViewDefinition) -> PlanarSlice:
    if len(cloud) == 0:
        raise InvalidArgument("cannot slice an empty cloud")
    keep, u, v, _ = sector_selection(cloud.points, view)
    labels = None if cloud.labels is None else cloud.labels[keep]
    return PlanarSlice(np.column_stack([u[keep], v[keep]]), labels)


# -- rasterizing ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Occupancy image with pixels 0 or 255, row-major, shape (height, width).

    The sector origin sits at the top-centre; +u runs down the rows and +v
    runs right along the columns.
    """

    pixels: np.ndarray
    pixel_size: float = DEFAULT_PIXEL_SIZE_MM
    dropped: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidArgument("mask must be a non-empty 2-D array")
        if not np.all((px == 0) | (px == 255)):
            raise InvalidArgument("mask pixels must be 0 or 255")
        px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if not self.pixel_size > 0:
            raise InvalidArgument("pixel_size must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def on(self) -> np.ndarray:
        return self.pixels == 255


def plane_to_pixel(uv: np.ndarray, width: int, pixel_size: float):
    """Integer (row, col) of the pixel containing each (u, v) point."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    rows = np.floor(uv[:, 0] / pixel_size).astype(np.int64)
    cols = np.floor(uv[:, 1] / pixel_size + width / 2).astype(np.int64)
    return rows, cols


def pixel_centers(width: int, height: int, pixel_size: float):
    """(u, v) plane coordinates of every pixel centre, each shaped (height, width)."""
    u = (np.arange(height) + 0.5) * pixel_size
    v = (np.arange(width) + 0.5 - width / 2) * pixel_size
    return np.meshgrid(u, v, indexing="ij")


def rasterize(
    slice_: PlanarSlice,
    width: int = DEFAULT_RASTER[0],
    height: int = DEFAULT_RASTER[1],
    pixel_size: float = DEFAULT_PIXEL_SIZE_MM,
) -> BinaryMask:
    if int(width) < 1 or int(height) < 1 or not pixel_size > 0:
        raise InvalidArgument("raster dimensions and pixel size must be positive")
    width, height = int(width), int(height)
    img = np.zeros((height, width), dtype=np.uint8)
    rows, cols = plane_to_pixel(slice_.points2d, width, pixel_size)
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    img[rows[inside], cols[inside]] = 255
    return BinaryMask(img, float(pixel_size), dropped=int((~inside).sum()))


def overlay_coverage(mask: BinaryMask, image_mask: BinaryMask) -> float:
    """Fraction of ``image_mask``'s on-pixels that ``mask`` also covers."""
    if mask.pixels.shape != image_mask.pixels.shape:
        raise InvalidArgument(
            f"mask dimensions differ: {mask.pixels.shape} vs {image_mask.pixels.shape}")
    ref = image_mask.on
    n = int(ref.sum())
    if n == 0:
        return 1.0
    return int((mask.on & ref).sum()) / n


# -- PGM io -----------------------------------------------------------------


def write_pgm(pixels: np.ndarray, path, comment: Optional[str] = None) -> None:
    px = np.asarray(pixels, dtype=np.uint8)
    h, w = px.shape
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + px.tobytes())


def read_pgm(path):
    """Return (pixels uint8 array, list of comment strings)."""
    data = Path(path).read_bytes()
    pos = 0
    tokens, comments = [], []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidArgument(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise InvalidArgument(f"{path}: only binary PGM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise InvalidArgument(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy(), comments


def _pixel_size_comment(pixel_size: float) -> str:
    return f"pixel_size_mm {pixel_size!r}"


def save_mask(mask: BinaryMask, path) -> None:
    write_pgm(mask.pixels, path, _pixel_size_comment(mask.pixel_size))


def pixel_size_from_comments(comments, default=DEFAULT_PIXEL_SIZE_MM) -> float:
    for c in comments:
        parts = c.split()
        if len(parts) == 2 and parts[0] == "pixel_size_mm":
            return float(parts[1])
    return default


def load_mask(path) -> BinaryMask:
    px, comments = read_pgm(path)
    return BinaryMask(px, pixel_size_from_comments(comments))
