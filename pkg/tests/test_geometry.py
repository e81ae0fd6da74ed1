import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from soar import geometry as geo
from soar import skeleton as sk
from soar.errors import HullError, ProjectionError, SingularSystemError

from oracles import brute_force_hull_vertices, random_affine, winding_number


def test_calibration_recovers_affine_map(rng):
    m = random_affine(rng)
    x = rng.normal(size=(30, 3))
    y = geo.apply_calibration(m, x)
    cal = geo.estimate_calibration(x, y)
    assert np.abs(cal.matrix - m).max() < 1e-9
    assert cal.residual_rms < 1e-9


def test_calibration_least_squares_matches_lstsq(rng):
    x = rng.normal(size=(50, 3))
    y = geo.apply_calibration(random_affine(rng), x) + rng.normal(0, 0.01, size=(50, 3))
    cal = geo.estimate_calibration(x, y)
    sol, *_ = np.linalg.lstsq(geo.homogeneous(x), y, rcond=None)
    np.testing.assert_allclose(cal.matrix[:3], sol.T, atol=1e-10)


def test_calibration_rejects_coplanar(rng):
    x = rng.normal(size=(20, 3))
    x[:, 2] = 0.5 * x[:, 0] - x[:, 1]
    with pytest.raises(SingularSystemError):
        geo.estimate_calibration(x, x)
    with pytest.raises(SingularSystemError):
        geo.estimate_calibration(x[:3] + [[0, 0, 1], [0, 1, 0], [1, 0, 0]], x[:3])


def test_calibration_composition_and_inverse(rng):
    a = geo.AffineCalibration(random_affine(rng))
    b = geo.AffineCalibration(random_affine(rng))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(b.compose(a)(p), b(a(p)), atol=1e-10)
    np.testing.assert_allclose(a.inverse()(a(p)), p, atol=1e-10)


def test_calibration_validates_last_row():
    bad = np.eye(4)
    bad[3, 0] = 0.1
    with pytest.raises(ValueError):
        geo.AffineCalibration(bad)


def test_calibrate_cameras_matches_rig():
    ds = sk.synth_dataset(3, 3, 3, 10, 8, seed=2)
    cals = geo.calibrate_cameras(ds)
    cams = ds.camera_transforms
    for (i, j), cal in cals.items():
        truth = cams[j] @ np.linalg.inv(cams[i])
        assert np.abs(cal.matrix - truth).max() < 1e-4
    assert len(cals) == 9


def test_rigid_augment_preserves_shape_and_aligns_floor(rng):
    ds = sk.synth_dataset(2, 1, 1, 10, 8, seed=0)
    skel = ds.samples[0]
    verts = rng.normal(size=(12, 3))
    out, aug = geo.rigid_augment(verts, skel, rng, radius=(0.5, 1.0))
    d_in = np.linalg.norm(verts[:, None] - verts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_in, d_out, atol=1e-10)
    assert np.isclose(out[:, 1].min(), skel.data[..., 1].min())
    c = skel.data.reshape(-1, 3).mean(axis=0)
    r = np.hypot(*(out.mean(axis=0) - c)[[0, 2]])
    assert 0.5 - 1e-9 <= r <= 1.0 + 1e-9


def test_rigid_augment_identity_overrides(rng):
    skel = sk.synth_dataset(2, 1, 1, 10, 8, seed=0).samples[0]
    verts = rng.normal(size=(6, 3))
    out, _ = geo.rigid_augment(verts, skel, rng, yaw=0.0, horizontal=(0.0, 0.0))
    shift = out - verts
    np.testing.assert_allclose(shift[:, [0, 2]], 0.0, atol=1e-12)
    np.testing.assert_allclose(shift[:, 1], shift[0, 1])


def test_projection_divides_by_depth():
    p = np.array([[2.0, 4.0, 2.0], [1.0, -1.0, 0.5]])
    np.testing.assert_allclose(geo.perspective_project(p), [[1.0, 2.0], [2.0, -2.0]])


def test_projection_error_reports_index():
    p = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    with pytest.raises(ProjectionError) as exc:
        geo.perspective_project(p)
    assert exc.value.index == 2


def test_unit_square_hull():
    hull = geo.convex_hull_2d([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5], [0.5, 0]])
    assert len(hull.vertices) == 4
    assert geo.is_in_hull(hull, [0.5, 0.5])
    assert geo.is_in_hull(hull, [1.0, 0.5])  # boundary counts as inside
    assert not geo.is_in_hull(hull, [1.0 + 1e-6, 0.5])
    np.testing.assert_allclose(np.linalg.norm(hull.normals, axis=1), 1.0)


def test_hull_degenerate_inputs():
    with pytest.raises(HullError):
        geo.convex_hull_2d([[0, 0], [1, 1]])
    with pytest.raises(HullError):
        geo.convex_hull_2d([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(HullError):
        geo.convex_hull_2d([[0, 0], [0, 0], [0, 0]])


def test_hull_vertices_match_brute_force(rng):
    for _ in range(20):
        pts = rng.normal(size=(int(rng.integers(3, 12)), 2))
        hull = geo.convex_hull_2d(pts)
        assert set(map(tuple, hull.vertices)) == brute_force_hull_vertices(pts)


def test_hull_vertices_are_counter_clockwise(rng):
    hull = geo.convex_hull_2d(rng.normal(size=(30, 2)))
    v = hull.vertices
    area = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
    assert area > 0


def test_aabb_disjoint():
    a = np.array([[0, 0, 0], [1, 1, 1.0]])
    assert geo.aabb_disjoint(a, a + [2, 0, 0])
    assert not geo.aabb_disjoint(a, a + [0.5, 0.5, 0.5])


points2d = hnp.arrays(np.float64, st.tuples(st.integers(3, 15), st.just(2)),
                      elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(points2d, hnp.arrays(np.float64, (20, 2), elements=st.floats(-12, 12)))
def test_hull_membership_matches_winding_number(pts, queries):
    try:
        hull = geo.convex_hull_2d(pts)
    except HullError:
        return
    inside = geo.is_in_hull(hull, queries)
    for q, got in zip(queries, inside):
        # skip queries within rounding distance of an edge
        slack = np.abs(hull.normals @ q + hull.offsets).min()
        if slack < 1e-7:
            continue
        assert got == (winding_number(hull.vertices, q) != 0)


@settings(max_examples=60, deadline=None)
@given(points2d)
def test_input_points_satisfy_hull_constraints(pts):
    try:
        hull = geo.convex_hull_2d(pts)
    except HullError:
        return
    scale = max(1.0, np.abs(pts).max())
    assert np.all(pts @ hull.normals.T + hull.offsets <= 1e-9 * scale)
