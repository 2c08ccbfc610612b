import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totalcap.geometry import (
    Camera,
    DegenerateRays,
    DepthNonPositive,
    GeometryError,
    IdenticalCameras,
    InsufficientViews,
    depth,
    epipolar_distance,
    fundamental_matrix,
    load_calibration,
    look_at,
    project,
    save_calibration,
    triangulate,
)


def random_camera(rng, id=0):
    eye = rng.normal(0, 1, 3)
    eye = 4.0 * eye / np.linalg.norm(eye)
    target = rng.normal(0, 0.2, 3)
    return look_at(eye, target, up=(0, 0, 1) if abs(eye[2]) < 3.5 else (1, 0, 0), focal=rng.uniform(500, 3000), width=2000, height=2000, id=id)


class TestProject:
    def test_optical_axis_hits_principal_point(self, identity_cam):
        np.testing.assert_allclose(project(identity_cam, [0, 0, 2]), [500, 500])

    def test_lateral_offset(self, identity_cam):
        np.testing.assert_allclose(project(identity_cam, [0.1, 0, 2]), [550, 500])

    def test_behind_camera(self, identity_cam):
        with pytest.raises(DepthNonPositive):
            project(identity_cam, [0, 0, -1])

    @given(st.floats(0.05, 50.0))
    def test_constant_along_ray(self, lam):
        cam = look_at([2, 1, 3], [0, 0, 0], focal=800, width=640, height=480)
        p = np.array([0.3, -0.2, 0.1])
        ray = cam.center + lam * (p - cam.center)
        np.testing.assert_allclose(project(cam, ray), project(cam, p), atol=1e-8)


class TestDepth:
    def test_identity(self, identity_cam):
        assert depth(identity_cam, [0, 0, 3]) == 3.0

    def test_translated(self):
        cam = Camera(1000, [500, 500], np.eye(3), [0, 0, -1], 1000, 1000)
        assert depth(cam, [0, 0, 3]) == 2.0

    def test_at_center(self):
        cam = look_at([1, 2, 3], [0, 0, 0])
        assert depth(cam, [1, 2, 3]) == pytest.approx(0.0, abs=1e-12)


class TestTriangulate:
    def test_orthogonal_views(self):
        p = np.array([1.0, 1.0, 1.0])
        a = look_at([1, 1, 6], p, focal=1000, width=1000, height=1000, id=0)
        b = look_at([6, 1, 1], p, focal=1000, width=1000, height=1000, id=1)
        obs = [(a, project(a, p), 1.0), (b, project(b, p), 1.0)]
        np.testing.assert_allclose(triangulate(obs), p, atol=1e-9)

    def test_single_view(self, identity_cam):
        with pytest.raises(InsufficientViews):
            triangulate([(identity_cam, np.array([500.0, 500.0]), 1.0)])

    def test_duplicate_camera(self, identity_cam):
        uv = np.array([510.0, 480.0])
        with pytest.raises(DegenerateRays):
            triangulate([(identity_cam, uv, 1.0), (identity_cam, uv, 1.0)])

    def test_zero_confidence_view_leaves_system_singular(self, ring):
        p = np.array([0.1, 1.2, -0.2])
        obs = [(ring[0], ring[0].project_many(p), 1.0), (ring[1], ring[1].project_many(p), 0.0)]
        with pytest.raises(DegenerateRays):
            triangulate(obs)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        cams = [random_camera(rng, i) for i in range(n)]
        p = rng.normal(0, 0.3, 3)
        if any(depth(c, p) <= 0.1 for c in cams):
            return
        obs = [(c, project(c, p), rng.uniform(0.2, 1.0)) for c in cams]
        try:
            q = triangulate(obs)
        except DegenerateRays:
            return
        assert np.linalg.norm(q - p) < 1e-6


class TestEpipolar:
    def test_exact_correspondence(self, ring):
        p = np.array([0.2, 0.9, 0.1])
        a, b = ring[0], ring[1]
        assert epipolar_distance(a, a.project_many(p), b, b.project_many(p)) < 1e-6

    def test_perpendicular_shift(self, ring):
        p = np.array([0.2, 0.9, 0.1])
        a, b = ring[0], ring[1]
        pa, pb = a.project_many(p), b.project_many(p)
        line = fundamental_matrix(a, b) @ np.append(pa, 1.0)
        n = line[:2] / np.linalg.norm(line[:2])
        d = epipolar_distance(a, pa, b, pb + 5.0 * n)
        assert 2.5 <= d <= 5.0

    def test_identical_cameras(self, ring):
        with pytest.raises(IdenticalCameras):
            epipolar_distance(ring[0], [1, 2], ring[0], [3, 4])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_camera(rng, 0), random_camera(rng, 1)
        pa, pb = rng.uniform(0, 2000, 2), rng.uniform(0, 2000, 2)
        assert epipolar_distance(a, pa, b, pb) == epipolar_distance(b, pb, a, pa)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            Camera(1000, [0, 0], np.diag([1, 1, 2]), np.zeros(3), 10, 10)

    def test_rejects_bad_focal(self):
        with pytest.raises(GeometryError):
            Camera(0.0, [0, 0], np.eye(3), np.zeros(3), 10, 10)

    def test_calibration_round_trip(self, ring, tmp_path):
        save_calibration(ring, tmp_path / "cams.json")
        back = load_calibration(tmp_path / "cams.json")
        for a, b in zip(ring, back):
            assert a.id == b.id
            np.testing.assert_array_equal(a.P, b.P)
