import json
import math

import numpy as np
import pytest

from conftest import ball_points
from echomesh.errors import InvalidArgument
from echomesh.fixtures import ATRIA, synthetic_heart
from echomesh.geometry import LabeledCloud, rotation_matrix
from echomesh.views import (VIEW_NAMES, BinaryMask, PlanarSlice, ViewDefinition, builtin_views,
                            load_mask, load_views, overlay_coverage, rasterize, read_pgm,
                            save_mask, save_views, slice_cloud)


def simple_view(**kw):
    base = dict(name="t", origin=(0, 0, 0), axis=(1, 0, 0), up=(0, 1, 0))
    base.update(kw)
    return ViewDefinition(**base)


def test_builtin_origins():
    views = {v.name: v for v in builtin_views()}
    assert tuple(views) == VIEW_NAMES
    np.testing.assert_array_equal(views["A4C"].origin, [62.63, -60.94, -28.13])
    np.testing.assert_array_equal(views["Basal"].origin, [16.27, -8.42, -9.61])
    np.testing.assert_array_equal(views["MidCavity"].origin, [39.04, -20.21, -23.07])
    np.testing.assert_array_equal(views["Apical"].origin, [45.55, -23.58, -26.91])
    for name in ("A2C", "A3C"):
        np.testing.assert_array_equal(views[name].origin, views["A4C"].origin)
    for v in views.values():
        assert (v.half_angle, v.depth, v.slab_half_thickness) == (45.0, 150.0, 1.0)


def test_builtin_geometry_is_consistent():
    views = {v.name: v for v in builtin_views()}
    sa = [views[n] for n in ("Basal", "MidCavity", "Apical")]
    # short-axis planes are parallel and stacked along their common normal
    for v in sa[1:]:
        np.testing.assert_allclose(abs(v.normal @ sa[0].normal), 1.0, atol=1e-12)
    depths = [v.origin @ sa[0].normal for v in sa]
    assert depths[0] != depths[1] != depths[2]
    # long-axis views share the sector axis but image distinct planes
    la = [views[n] for n in ("A4C", "A2C", "A3C")]
    for v in la[1:]:
        np.testing.assert_allclose(v.axis, la[0].axis, atol=1e-12)
        assert abs(v.normal @ la[0].normal) < 0.9


def test_builtin_views_aim_at_atria():
    heart = synthetic_heart(3000, seed=1)
    views = {v.name: v for v in builtin_views(heart, ATRIA)}
    target = heart.points[np.isin(heart.labels, ATRIA)].mean(axis=0)
    direction = (target - views["A4C"].origin) / np.linalg.norm(target - views["A4C"].origin)
    np.testing.assert_allclose(views["A4C"].axis, direction, atol=1e-12)


def test_view_validation():
    with pytest.raises(InvalidArgument):
        simple_view(axis=(1, 1, 0))
    with pytest.raises(InvalidArgument):
        simple_view(up=(1, 0, 0))
    with pytest.raises(InvalidArgument):
        simple_view(half_angle=90)
    with pytest.raises(InvalidArgument):
        simple_view(depth=0)


def test_on_axis_point_included():
    v = simple_view()
    s = slice_cloud(LabeledCloud([[v.depth / 2, 0, 0]]), v)
    np.testing.assert_allclose(s.points2d, [[v.depth / 2, 0]])


def test_out_of_slab_point_excluded():
    v = simple_view()
    p = np.array([40.0, 0, 0]) + 2 * v.slab_half_thickness * v.normal
    assert len(slice_cloud(LabeledCloud([p]), v)) == 0


def test_sector_bounds():
    v = simple_view(half_angle=30, depth=50)
    pts = [[10, 10 * math.tan(math.radians(29)), 0],   # inside the fan
           [10, 10 * math.tan(math.radians(31)), 0],   # outside the fan
           [49.9, 0, 0], [50.1, 0, 0], [-5, 0, 0]]
    s = slice_cloud(LabeledCloud(pts, [1, 2, 3, 4, 5]), v)
    assert s.labels.tolist() == [1, 3]


def test_slice_count_matches_slab_sector_volume(rng):
    # ball of radius 35 around the origin covers the whole 30 mm sector slab
    v = simple_view(depth=30.0)
    n = 1_000_000
    pts = ball_points(rng, n, 35.0)
    density = n / (4 / 3 * math.pi * 35.0 ** 3)
    volume = math.radians(v.half_angle) * v.depth ** 2 * 2 * v.slab_half_thickness
    kept = len(slice_cloud(LabeledCloud(pts), v))
    assert kept == pytest.approx(density * volume, rel=0.05)


def test_slice_permutation_invariant(rng, cloud):
    v = simple_view(depth=100, slab_half_thickness=5)
    perm = rng.permutation(len(cloud))
    a = slice_cloud(cloud, v)
    b = slice_cloud(cloud.take(perm), v)
    key = lambda s: sorted(zip(s.points2d[:, 0], s.points2d[:, 1], s.labels))
    assert key(a) == key(b)


def test_slice_rigid_equivariance(rng):
    heart = synthetic_heart(5000, seed=3)
    R = rotation_matrix(rng.uniform(-math.pi, math.pi, 3))
    d = rng.normal(scale=30, size=3)
    moved = heart.with_points(heart.points @ R.T + d)
    for view in builtin_views():
        a = slice_cloud(heart, view)
        b = slice_cloud(moved, view.moved(R, d))
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_allclose(b.points2d, a.points2d, rtol=0, atol=1e-9)


def test_slice_empty_cloud_rejected():
    with pytest.raises(InvalidArgument):
        slice_cloud(LabeledCloud(np.zeros((0, 3))), simple_view())


def test_rasterize_basic_cases():
    empty = rasterize(PlanarSlice(np.zeros((0, 2))), 8, 8, 1.0)
    assert not empty.on.any()
    one = rasterize(PlanarSlice([[0.0, 0.0]]), 8, 8, 1.0)
    assert one.on.sum() == 1 and one.on[0, 4]
    same = rasterize(PlanarSlice([[0.2, 0.2], [0.7, 0.9]]), 8, 8, 1.0)
    assert same.on.sum() == 1


def test_rasterize_orientation_and_drops():
    m = rasterize(PlanarSlice([[5.5, 0.0], [0.5, -2.5], [100.0, 0.0], [1.0, 50.0]]), 8, 8, 1.0)
    assert m.on[5, 4] and m.on[0, 1]
    assert m.dropped == 2


def test_rasterize_never_exceeds_point_count(rng):
    pts = rng.uniform(-20, 60, size=(300, 2))
    assert rasterize(PlanarSlice(pts), 64, 64, 0.7).on.sum() <= len(pts)


def make_mask(on):
    return BinaryMask(np.where(on, 255, 0))


def test_overlay_coverage_cases():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert overlay_coverage(make_mask(a), make_mask(a)) == 1.0
    assert overlay_coverage(make_mask(~a), make_mask(a)) == 0.0
    half = np.zeros((4, 4), bool)
    half[0] = True
    assert overlay_coverage(make_mask(half), make_mask(a)) == 0.5
    assert overlay_coverage(make_mask(a), make_mask(np.zeros((4, 4), bool))) == 1.0
    with pytest.raises(InvalidArgument):
        overlay_coverage(make_mask(a), make_mask(np.zeros((4, 5), bool)))


def test_overlay_subset_is_full_coverage(rng):
    big = rng.random((32, 32)) < 0.5
    small = big & (rng.random((32, 32)) < 0.5)
    assert overlay_coverage(make_mask(big), make_mask(small)) == 1.0


def test_mask_rejects_grey_pixels():
    with pytest.raises(InvalidArgument):
        BinaryMask(np.full((2, 2), 7))


def test_pgm_round_trip(tmp_path, rng):
    m = BinaryMask(np.where(rng.random((5, 7)) < 0.3, 255, 0), pixel_size=0.35)
    save_mask(m, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n")
    back = load_mask(tmp_path / "m.pgm")
    np.testing.assert_array_equal(back.pixels, m.pixels)
    assert back.pixel_size == 0.35
    px, _ = read_pgm(tmp_path / "m.pgm")
    assert px.shape == (5, 7)


def test_view_json_round_trip(tmp_path):
    views = builtin_views()
    save_views(views, tmp_path / "v.json")
    keys = set(json.loads((tmp_path / "v.json").read_text())[0])
    assert keys == {"name", "origin", "axis", "up", "half_angle_deg", "depth_mm", "slab_half_thickness_mm"}
    back = load_views(tmp_path / "v.json")
    for a, b in zip(views, back):
        assert a.name == b.name
        np.testing.assert_array_equal(a.axis, b.axis)
