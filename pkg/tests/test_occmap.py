import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import DenseGrid, components8, octree_dense
from e5sh import _kernels_py, kernels
from e5sh.core import CameraIntrinsics, ClassId, LabeledMask
from e5sh.occmap import (L_HIT, L_MAX, L_MIN, L_MISS, DimensionMismatch, Occupancy, OctreeMap,
                         build_planning_maps, extract_instances, insert_cloud, logistic,
                         project_depth, query)

RES = 0.0625  # power of two keeps voxel boundaries exact
N = 32        # depth 5: a 32^3 key space


def test_projection_principal_point():
    k = CameraIntrinsics(500, 500, 424, 240, 848, 480)
    depth = np.zeros((480, 848), np.uint16)
    depth[240, 424] = 1000
    clouds = project_depth(LabeledMask(np.full((480, 848), 3, np.uint8)), depth, k)
    assert clouds[ClassId.BACKGROUND].points.tolist() == [[0.0, 0.0, 1.0]]


def test_projection_offset_pixel():
    k = CameraIntrinsics(500, 500, 424, 240, 1000, 480)
    depth = np.zeros((480, 1000), np.uint16)
    depth[240, 924] = 2000
    classes = np.full((480, 1000), 3, np.uint8)
    classes[240, 924] = ClassId.STRAWBERRY
    clouds = project_depth(LabeledMask(classes), depth, k)
    assert clouds[ClassId.STRAWBERRY].points.tolist() == [[2.0, 0.0, 2.0]]
    assert len(clouds[ClassId.BACKGROUND]) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_reprojection_identity(seed):
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(rng.uniform(200, 900), rng.uniform(200, 900), 40.5, 30.25, 80, 60)
    depth = rng.integers(0, 5000, (60, 80), dtype=np.uint16)
    classes = rng.integers(0, 4, (60, 80), dtype=np.uint8)
    total = 0
    for c in project_depth(LabeledMask(classes), depth, k).values():
        total += len(c)
        if len(c):
            x, y, z = c.points.T
            assert np.allclose(k.fx * x / z + k.cx, c.pixels[:, 0], atol=1e-9)
            assert np.allclose(k.fy * y / z + k.cy, c.pixels[:, 1], atol=1e-9)
            assert (classes[c.pixels[:, 1], c.pixels[:, 0]] == c.cls).all()
    assert total == int((depth > 0).sum())


def test_projection_dimension_mismatch():
    k = CameraIntrinsics.default(8, 6)
    with pytest.raises(DimensionMismatch):
        project_depth(LabeledMask(np.zeros((6, 8), np.uint8)), np.zeros((5, 8)), k)


def test_single_insert():
    m = OctreeMap(RES, depth=5)
    p = (0.5 + RES / 2, 0.03, 0.03)
    m.insert_cloud((0.03, 0.03, 0.03), [p])
    assert m.log_odds(p) == L_HIT
    assert m.query(p) == Occupancy.OCCUPIED
    for i in range(8):
        q = (0.03 + i * RES, 0.03, 0.03)
        assert m.log_odds(q) == L_MISS and m.query(q) == Occupancy.FREE
    assert len(m) == 9
    assert m.query((-0.5, -0.5, -0.5)) == Occupancy.UNKNOWN


def test_five_hits_clamp():
    m = OctreeMap(0.01)
    for _ in range(5):
        m.insert_cloud((0, 0, 0), [(0.2, 0.1, 0.5)])
    assert m.log_odds((0.2, 0.1, 0.5)) == min(5 * 0.85, 3.5) == L_MAX


def test_repeat_point_within_one_call_counts_once():
    m = OctreeMap(0.01)
    m.insert_cloud((0, 0, 0), [(0.2, 0.1, 0.5)] * 5)
    assert m.log_odds((0.2, 0.1, 0.5)) == L_HIT


def test_query_thresholds():
    assert logistic(0.85) == pytest.approx(0.70, abs=0.005)
    m = OctreeMap(0.01)
    assert m.query((1, 2, 3)) == Occupancy.UNKNOWN
    k = m.key_of((0.1, 0.1, 0.1))
    m.update(k, L_HIT)
    assert query(m, (0.1, 0.1, 0.1)) == Occupancy.OCCUPIED
    for _ in range(3):
        m.update(k, L_MISS)
    assert m.log_odds((0.1, 0.1, 0.1)) == pytest.approx(-0.35)
    assert logistic(-0.35) == pytest.approx(0.41, abs=0.005)
    assert m.query((0.1, 0.1, 0.1)) == Occupancy.FREE


def test_out_of_cube_points_skipped():
    m = OctreeMap(RES, depth=5)
    assert m.insert_cloud((0, 0, 0), [(5.0, 0, 0), (0.1, 0.1, 0.1)]) == 1
    assert m.skipped == 1


def test_non_finite_points_rejected():
    with pytest.raises(ValueError):
        OctreeMap(0.01).insert_cloud((0, 0, 0), [(np.nan, 0, 0)])


def random_scene(seed, calls=3, points=12):
    """Origin and point batches strictly inside the 32^3 cube."""
    rng = np.random.default_rng(seed)
    half = N // 2 * RES
    origin = rng.uniform(-half + 1e-3, half - 1e-3, 3)
    batches = [rng.uniform(-half + 1e-3, half - 1e-3, (rng.integers(1, points + 1), 3))
               for _ in range(calls)]
    return origin, batches


def octree_matches_dense(seed):
    origin, batches = random_scene(seed)
    m = OctreeMap(RES, depth=5)
    g = DenseGrid(RES, N)
    for b in batches:
        m.insert_cloud(origin, b)
        g.insert(origin, b)
    a, b = octree_dense(m, N), g.L
    return np.array_equal(np.isnan(a), np.isnan(b)) and np.array_equal(a[~np.isnan(a)], b[~np.isnan(b)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_dense_grid_oracle(seed):
    assert octree_matches_dense(seed)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_compiled_and_python_traversal_agree(seed):
    origin, batches = random_scene(seed, calls=1, points=30)
    pts = np.concatenate(batches + [np.array([[9.0, 0, 0]])])
    a = kernels.trace_rays(origin, pts, RES, N // 2, N)
    b = _kernels_py.trace_rays(origin, pts, RES, N // 2, N)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12))
def test_log_odds_stay_clamped(seed, calls):
    origin, batches = random_scene(seed, calls=calls, points=6)
    m = OctreeMap(RES, depth=5)
    for b in batches:
        m.insert_cloud(origin, b)
    vals = [L for _, L, _ in m.leaves()]
    assert all(L_MIN <= v <= L_MAX for v in vals)
    assert len(vals) == len(m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 8))
def test_monotone_under_repeated_hits(seed, k):
    origin, batches = random_scene(seed, calls=1, points=6)
    m = OctreeMap(RES, depth=5)
    target = batches[0][0]
    prev = -math.inf
    for _ in range(k):
        m.insert_cloud(origin, [target])
        L = m.log_odds(target)
        assert L >= prev
        prev = L
    assert prev == min(k * L_HIT, L_MAX)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 8))
def test_monotone_under_repeated_misses(seed, k):
    # the voxel next to the origin lies on every ray towards +x
    m = OctreeMap(RES, depth=5)
    rng = np.random.default_rng(seed)
    origin = np.array([-0.9, 0.01, 0.01])
    prev = math.inf
    for _ in range(k):
        m.insert_cloud(origin, [(rng.uniform(0.2, 0.9), 0.01, 0.01)])
        L = m.log_odds(origin)
        assert L <= prev
        prev = L
    assert prev == pytest.approx(max(k * L_MISS, L_MIN))


def test_occupied_keys_and_export():
    m = OctreeMap(0.01)
    m.insert_cloud((0, 0, 0), [(0.1, 0.0, 0.3), (0.0, 0.2, 0.3)])
    occ = m.occupied_keys()
    assert len(occ) == 2
    lines = m.export_text().splitlines()
    assert len(lines) == len(m)
    vals = sorted(float(line.split()[3]) for line in lines)
    assert vals[-2:] == [L_HIT, L_HIT]


def _blob(classes, cy, cx, r, cls=ClassId.STRAWBERRY):
    yy, xx = np.mgrid[:classes.shape[0], :classes.shape[1]]
    classes[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls


def test_two_blobs_center_is_target():
    c = np.full((48, 64), ClassId.BACKGROUND, np.uint8)
    _blob(c, 24, 32, 5)
    _blob(c, 5, 5, 4)
    inst = extract_instances(LabeledMask(c))
    assert len(inst) == 2
    target = [i for i in inst if i.is_target]
    assert len(target) == 1
    assert abs(target[0].centroid[0] - 32) < 1 and abs(target[0].centroid[1] - 24) < 1


def test_no_strawberries():
    assert extract_instances(LabeledMask(np.zeros((4, 4), np.uint8) + 1)) == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_instances_partition_matches_bfs(seed):
    rng = np.random.default_rng(seed)
    c = np.where(rng.random((20, 24)) < 0.3, ClassId.STRAWBERRY, ClassId.CANOPY).astype(np.uint8)
    inst = extract_instances(LabeledMask(c), min_area=1)
    got = {frozenset(i.pixel_set()) for i in inst}
    assert got == set(components8(c == ClassId.STRAWBERRY))
    assert sum(i.is_target for i in inst) == (1 if inst else 0)


def planning_scene(seed, w=64, h=48):
    """Background wall, canopy, a rigid post, a central target and a corner berry."""
    rng = np.random.default_rng(seed)
    c = np.full((h, w), ClassId.BACKGROUND, np.uint8)
    d = np.full((h, w), 2000, np.uint16)
    c[:, :8] = ClassId.CANOPY
    d[:, :8] = 900
    c[36:, 48:] = ClassId.RIGID_OBSTACLE
    d[36:, 48:] = 1100
    tx, ty = w // 2 + rng.integers(-3, 4), h // 2 + rng.integers(-3, 4)
    _blob(c, ty, tx, 5)
    yy, xx = np.mgrid[:h, :w]
    d[(yy - ty) ** 2 + (xx - tx) ** 2 <= 25] = int(rng.integers(400, 600))
    nx, ny = int(rng.integers(12, 20)), int(rng.integers(4, 10))
    _blob(c, ny, nx, 4)
    d[(yy - ny) ** 2 + (xx - nx) ** 2 <= 16] = int(rng.integers(650, 800))
    return LabeledMask(c), d, CameraIntrinsics.default(w, h)


def planning_maps_filter_non_target(seed):
    mask, depth, k = planning_scene(seed)
    inst = extract_instances(mask)
    target = next(i for i in inst if i.is_target)
    obstacles, berries = build_planning_maps(mask, depth, k, target, resolution=0.01)
    clouds = project_depth(mask, depth, k)
    berry = clouds[ClassId.STRAWBERRY]
    on_target = {(int(r), int(c)) for r, c in target.pixels}
    sel = np.array([(int(v), int(u)) in on_target for u, v in berry.pixels])
    non_target, targets = berry.points[~sel], berry.points[sel]
    if len(non_target) == 0 or len(targets) == 0:
        return False
    for p in non_target:
        if obstacles.query(p) == Occupancy.OCCUPIED or berries.query(p) == Occupancy.OCCUPIED:
            return False
    return all(berries.query(p) == Occupancy.OCCUPIED for p in targets)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32))
def test_non_target_filtered(seed):
    assert planning_maps_filter_non_target(seed)


def test_zero_strawberries_leaves_obstacles_unchanged():
    mask, depth, k = planning_scene(0)
    classes = mask.classes.copy()
    classes[classes == ClassId.STRAWBERRY] = ClassId.BACKGROUND
    empty = LabeledMask(classes)
    obstacles, berries = build_planning_maps(empty, depth, k, None, resolution=0.01)
    assert len(berries) == 0
    ref = OctreeMap(0.01)
    clouds = project_depth(empty, depth, k)
    ref.insert_cloud((0, 0, 0), clouds[ClassId.RIGID_OBSTACLE].points)
    ref.insert_cloud((0, 0, 0), clouds[ClassId.CANOPY].points, soft=True)
    assert sorted(obstacles.leaves()) == sorted(ref.leaves())


def test_canopy_is_soft():
    mask, depth, k = planning_scene(1)
    obstacles, _ = build_planning_maps(mask, depth, k, None, resolution=0.01)
    soft = [key for key, L, s in obstacles.leaves() if s]
    assert soft and insert_cloud(OctreeMap(0.01), (0, 0, 0), np.zeros((0, 3))) == 0
