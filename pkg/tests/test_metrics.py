import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from conftest import ball_points
from echomesh.errors import DegenerateGeometry, InvalidArgument, OutOfDomain, UndefinedCorrelation
from echomesh.fixtures import LV, REFERENCE_COHORT, REFERENCE_COHORT_PCC, synthetic_heart, write_reference_cohort
from echomesh.geometry import LabeledCloud, SimilarityTransform, apply_transform, rotation_matrix, scale
from echomesh.metrics import (VoxelGrid, compare_clouds, delaunay_volume, ef, ejection_fraction,
                              extract_region, iou, joint_bbox, lv_volume, mse, pearson, read_patients,
                              subsample, voxelize)
from echomesh.ot import DeformationSamples

BOX = ((0.0, 0.0, 0.0), (16.0, 16.0, 16.0))


# -- voxelize / iou -----------------------------------------------------------


def test_single_point_single_voxel():
    g = voxelize(LabeledCloud([[3.5, 7.2, 0.1]]), 16, BOX)
    assert g.count == 1 and g.occupancy[3, 7, 0]


def test_all_cell_centres_fill_grid():
    c = np.arange(16) + 0.5
    pts = np.array(list(itertools.product(c, c, c)))
    assert voxelize(LabeledCloud(pts), 16, BOX).occupancy.all()


def test_upper_boundary_goes_to_last_cell():
    g = voxelize(LabeledCloud([[16.0, 16.0, 16.0], [0.0, 0.0, 0.0]]), 16, BOX)
    assert g.occupancy[15, 15, 15] and g.occupancy[0, 0, 0] and g.count == 2


def test_voxelize_matches_binning_oracle(rng):
    pts = rng.uniform(0, 16, size=(300, 3))
    g = voxelize(LabeledCloud(pts), 16, BOX)
    oracle = np.zeros((16, 16, 16), dtype=bool)
    for x, y, z in pts:
        oracle[min(int(x // 1.0), 15), min(int(y // 1.0), 15), min(int(z // 1.0), 15)] = True
    assert np.array_equal(g.occupancy, oracle)


def test_voxelize_errors():
    with pytest.raises(OutOfDomain):
        voxelize(LabeledCloud([[17.0, 1, 1]]), 16, BOX)
    with pytest.raises(InvalidArgument):
        voxelize(LabeledCloud([[1.0, 1, 1]]), 0, BOX)
    with pytest.raises(InvalidArgument):
        voxelize(LabeledCloud([[1.0, 1, 1]]), 4, ((0, 0, 0), (0, 1, 1)))


def grid_of(cells, res=4):
    occ = np.zeros((res,) * 3, dtype=bool)
    for c in cells:
        occ[c] = True
    return VoxelGrid(occ, (0, 0, 0), (1, 1, 1))


def test_iou_cases():
    a = grid_of([(0, 0, 0), (1, 1, 1)])
    assert iou(a, a) == 1.0
    assert iou(a, grid_of([(2, 2, 2)])) == 0.0
    b = grid_of([(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)])
    assert iou(a, b) == 0.5
    assert iou(grid_of([]), grid_of([])) == 1.0
    with pytest.raises(InvalidArgument):
        iou(a, grid_of([(0, 0, 0)], res=8))
    with pytest.raises(InvalidArgument):
        iou(a, VoxelGrid(a.occupancy, (0, 0, 0), (2, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_iou_properties(seed):
    r = np.random.default_rng(seed)
    a = VoxelGrid(r.random((5, 5, 5)) < 0.3, (0, 0, 0), (1, 1, 1))
    b = VoxelGrid(r.random((5, 5, 5)) < 0.3, (0, 0, 0), (1, 1, 1))
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)
    assert (v == 1.0) == np.array_equal(a.occupancy, b.occupancy)


def test_self_iou_for_any_cloud(cloud):
    g = voxelize(cloud, 32)
    assert iou(g, g) == 1.0
    assert compare_clouds(cloud, cloud, 32) == 1.0


def test_joint_bbox_margin():
    a, b = LabeledCloud([[0.0, 0, 0]]), LabeledCloud([[10.0, 20, 30]])
    lo, hi = joint_bbox(a, b)
    np.testing.assert_allclose(lo, [-0.1, -0.2, -0.3])
    np.testing.assert_allclose(hi, [10.1, 20.2, 30.3])


# -- mse ------------------------------------------------------------------


def test_mse_cases(rng):
    v = rng.normal(size=(10, 3))
    s = DeformationSamples(np.zeros((10, 3)), v)
    assert mse(s, s) == 0.0
    assert mse(DeformationSamples(np.zeros((10, 3)), v + [1, 0, 0]), s) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(InvalidArgument):
        mse(v, v[:5])


def test_mse_flat_loop_oracle(rng):
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    total = 0.0
    for i in range(40):
        for k in range(3):
            total += (a[i, k] - b[i, k]) ** 2
    assert mse(a, b) == pytest.approx(total / 120, abs=1e-12)
    assert mse(a, b) == mse(b, a)


# -- subsample / region ---------------------------------------------------


def test_subsample(rng):
    c = LabeledCloud(rng.normal(size=(1000, 3)), rng.integers(0, 24, 1000))
    assert subsample(c, 1.0, 5).equals(c)
    s = subsample(c, 0.1, 5)
    assert len(s) == 100
    rows = {tuple(p) for p in c.points}
    assert all(tuple(p) in rows for p in s.points)
    assert subsample(c, 0.1, 5).equals(s)
    assert not subsample(c, 0.1, 6).equals(s)
    assert len(subsample(c, 0.0015, 0)) == 2  # ceil(1.5)
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(InvalidArgument):
            subsample(c, bad)


def test_subsample_keeps_labels_aligned(rng):
    pts = rng.normal(size=(200, 3))
    c = LabeledCloud(pts, np.arange(200) % 24)
    s = subsample(c, 0.3, 1)
    idx = [int(np.flatnonzero((pts == p).all(axis=1))[0]) for p in s.points]
    np.testing.assert_array_equal(s.labels, np.asarray(idx) % 24)
    assert idx == sorted(idx)


def test_extract_region():
    c = LabeledCloud(np.arange(18.0).reshape(6, 3), [1, 2, 1, 3, 5, 1])
    assert extract_region(c, {1, 2, 3, 5}).equals(c)
    assert len(extract_region(c, set())) == 0
    r = extract_region(c, {1})
    assert len(r) == 3 and np.array_equal(r.points[:, 0], [0.0, 6.0, 15.0])
    with pytest.raises(InvalidArgument):
        extract_region(LabeledCloud(np.zeros((3, 3))), {1})


# -- volumes ----------------------------------------------------------------

CUBE = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
TET = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def test_analytic_volumes():
    assert delaunay_volume(LabeledCloud(TET)) == pytest.approx(1 / 6, abs=1e-12)
    assert delaunay_volume(LabeledCloud(CUBE)) == pytest.approx(1.0, abs=1e-12)


def test_interior_sample_equals_hull_volume(rng):
    pts = ball_points(rng, 5000, 30.0)
    assert delaunay_volume(LabeledCloud(pts)) == pytest.approx(ConvexHull(pts).volume, rel=1e-9)


def test_ball_surface_sample_volume(rng):
    d = rng.normal(size=(5000, 3))
    r = rng.uniform(29.97, 30.0, size=(5000, 1))
    pts = r * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert delaunay_volume(LabeledCloud(pts)) == pytest.approx(4 / 3 * math.pi * 30 ** 3, rel=0.02)


def test_volume_rigid_and_scale(rng):
    c = LabeledCloud(rng.normal(size=(300, 3)) * 10)
    v = delaunay_volume(c)
    moved = apply_transform(c, SimilarityTransform((5.0, -40.0, 12.0), (0.4, -1.1, 2.2), 1.0))
    assert delaunay_volume(moved) == pytest.approx(v, rel=1e-6)
    assert delaunay_volume(scale(c, 1.7)) == pytest.approx(1.7 ** 3 * v, rel=1e-9)


def test_degenerate_volumes(rng):
    with pytest.raises(DegenerateGeometry):
        delaunay_volume(LabeledCloud(TET[:3]))
    flat = np.c_[rng.normal(size=(50, 2)), np.zeros(50)]
    with pytest.raises(DegenerateGeometry):
        delaunay_volume(LabeledCloud(flat))
    tilted = flat @ rotation_matrix((0.3, 0.7, -0.2)).T + 5.0
    with pytest.raises(DegenerateGeometry):
        delaunay_volume(LabeledCloud(tilted))


def test_lv_volume_report():
    heart = synthetic_heart(6000, seed=3)
    rep = lv_volume(heart, [LV], rate=0.5, seed=1)
    assert rep.region_labels == (LV,) and rep.seed == 1 and rep.subsample_rate == 0.5
    n_lv = int(np.sum(subsample(heart, 0.5, 1).labels == LV))
    assert rep.point_count_used == n_lv
    # toy LV is an ellipsoid with semi-axes 40, 22, 22 mm
    assert 0.8 < rep.volume / (4 / 3 * math.pi * 40 * 22 * 22) <= 1.0


# -- ef / pearson ------------------------------------------------------------


def test_ef_cases():
    assert ef(100, 70) == pytest.approx(30.0)
    assert ef(100, 100) == 0.0
    assert ef(100, 0) == 100.0
    assert ejection_fraction(120.0, 50.0) == (70.0, pytest.approx(58.333333333))
    for edv, esv in [(100, 101), (0, 0), (-5, 0), (100, -1)]:
        with pytest.raises(InvalidArgument):
            ef(edv, esv)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 1e6), st.floats(0, 1), st.floats(0, 1))
def test_ef_decreasing_in_esv(edv, a, b):
    lo, hi = sorted((a * edv, b * edv))
    # strictness is only observable once the gap survives rounding
    if hi - lo > 1e-9 * edv:
        assert ef(edv, hi) < ef(edv, lo)


def test_pearson_cases(rng):
    x = rng.normal(size=20)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedCorrelation):
        pearson([1.0], [2.0])
    with pytest.raises(UndefinedCorrelation):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(InvalidArgument):
        pearson([1.0, 2.0], [1.0])


def test_pearson_affine_invariance(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    r = pearson(x, y)
    assert pearson(3.5 * x - 2, y) == pytest.approx(r, abs=1e-12)
    assert pearson(x, 0.2 * y + 9) == pytest.approx(r, abs=1e-12)
    assert pearson(-2 * x, y) == pytest.approx(-r, abs=1e-12)


def direct_pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return sxy / math.sqrt(sxx * syy)


def test_cohort_correlation():
    g = [a for a, _ in REFERENCE_COHORT]
    e = [b for _, b in REFERENCE_COHORT]
    r = pearson(g, e)
    assert r == pytest.approx(direct_pearson(g, e), abs=1e-12)
    assert r == pytest.approx(REFERENCE_COHORT_PCC, abs=1e-8)
    assert abs(r - (-0.82)) <= 0.06


def test_read_patients(tmp_path):
    write_reference_cohort(tmp_path / "p.csv")
    recs = read_patients(tmp_path / "p.csv")
    assert len(recs) == 14 and recs[0].patient_id == "P01"
    assert (recs[0].glps, recs[0].ef) == REFERENCE_COHORT[0]
    (tmp_path / "q.csv").write_text("patient_id,glps,ef\nA,,0.3\nB,-14,\n")
    a, b = read_patients(tmp_path / "q.csv")
    assert a.glps is None and b.ef is None
    (tmp_path / "bad.csv").write_text("patient_id,glps,ef\nA,-14,35\n")
    with pytest.raises(InvalidArgument):
        read_patients(tmp_path / "bad.csv")
    (tmp_path / "cols.csv").write_text("id,glps\nA,-14\n")
    with pytest.raises(InvalidArgument):
        read_patients(tmp_path / "cols.csv")
