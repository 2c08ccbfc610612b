import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totalcap.association import Detection2D
from totalcap.config import FeedbackConfig
from totalcap.feedback import (
    detection_occupancy,
    occupancy,
    person_masks,
    rasterize_capsules,
    render_mask,
    soften,
    write_pfm,
    write_pgm,
)
from totalcap.geometry import Camera, look_at


def brute_force_soft(binary, falloff):
    ys, xs = np.nonzero(binary)
    out = np.zeros(binary.shape)
    if len(xs) == 0:
        return out
    gy, gx = np.mgrid[: binary.shape[0], : binary.shape[1]]
    d = np.sqrt(((gx[..., None] - xs) ** 2 + (gy[..., None] - ys) ** 2).min(axis=-1))
    return np.maximum(0.0, 1.0 - d / falloff)


def person(topo, at):
    p = topo.zero_params()
    p.global_translation = np.asarray(at, dtype=float)
    return p


class TestRender:
    def test_capsule_half_width(self, identity_cam):
        f, r, d = 1000.0, 0.1, 2.0
        top, bottom = np.array([0, -0.2, d]), np.array([0, 0.2, d])
        ends = np.array([[identity_cam.project_many(top), identity_cam.project_many(bottom)]])
        grid = rasterize_capsules(1000, 1000, ends, np.array([[f * r / d, f * r / d]]))
        row = np.flatnonzero(grid[500])
        assert row.min() == 450 and row.max() == 550

    def test_behind_camera_is_empty(self, topo, identity_cam):
        assert not render_mask(topo, person(topo, [0, 0, -3]), identity_cam).any()

    def test_disjoint_persons(self, topo):
        cam = look_at([0, 0.5, 6], [0, 0.5, 0], focal=1000, width=1200, height=800)
        a = render_mask(topo, person(topo, [-1.0, 0.5, 0]), cam)
        b = render_mask(topo, person(topo, [1.0, 0.5, 0]), cam)
        assert a.any() and b.any()
        assert not (a & b).any()

    def test_limb_width_follows_depth(self, topo):
        cam = Camera(1000.0, [500, 500], np.eye(3), np.zeros(3), 1000, 1000)
        near = render_mask(topo, person(topo, [0, 0, 2.0]), cam).sum()
        far = render_mask(topo, person(topo, [0, 0, 4.0]), cam).sum()
        assert far < near


class TestSoften:
    def test_ramp_values(self):
        binary = np.zeros((40, 40), dtype=bool)
        binary[:, :10] = True
        grid = soften(binary, 20.0).grid
        assert grid[5, 5] == 1.0
        assert grid[5, 9 + 10] == pytest.approx(0.5)
        assert grid[5, 9 + 20] == 0.0

    def test_rejects_bad_falloff(self):
        with pytest.raises(ValueError):
            soften(np.ones((3, 3), dtype=bool), 0.0)

    def test_empty_mask(self):
        m = soften(np.zeros((10, 10), dtype=bool), 5.0)
        assert occupancy(m, (4, 4)) == 0.0 and not m.grid.any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(2.0, 30.0))
    def test_matches_brute_force(self, seed, falloff):
        rng = np.random.default_rng(seed)
        binary = rng.random((64, 64)) < rng.uniform(0.001, 0.05)
        np.testing.assert_allclose(soften(binary, falloff).grid, brute_force_soft(binary, falloff), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_lazy_lookup_matches_window(self, seed):
        rng = np.random.default_rng(seed)
        binary = rng.random((48, 48)) < 0.01
        lazy = soften(binary, 7.5)
        values = np.array([[lazy.value(x, y) for x in range(48)] for y in range(48)])
        np.testing.assert_allclose(values, soften(binary, 7.5).grid, atol=1e-12)


@pytest.fixture(scope="module")
def mask():
    binary = np.zeros((60, 60), dtype=bool)
    binary[20:40, 20:40] = True
    return soften(binary, 10.0)


class TestOccupancy:
    def test_inside_and_beyond(self, mask):
        assert occupancy(mask, (30.0, 30.0)) == 1.0
        assert occupancy(mask, (55.0, 30.0)) == 0.0

    def test_out_of_bounds(self, mask):
        assert occupancy(mask, (-1.0, 30.0)) == 0.0
        assert occupancy(mask, (30.0, 60.5)) == 0.0

    def test_bilinear_midpoint(self, mask):
        a, b = occupancy(mask, (44.0, 30.0)), occupancy(mask, (45.0, 30.0))
        assert occupancy(mask, (44.5, 30.0)) == pytest.approx(0.5 * (a + b))

    @given(st.floats(0.0, 2 * np.pi))
    def test_non_increasing_along_rays(self, mask, angle):
        d = np.array([np.cos(angle), np.sin(angle)])
        vals = [occupancy(mask, np.array([29.5, 29.5]) + t * d) for t in np.arange(0.0, 28.0, 0.5)]
        assert all(b <= a + 1.0 / mask.falloff for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v <= 1.0 for v in vals)


def test_detection_occupancy_skips_views_without_masks(topo):
    cam = look_at([0, 0.5, 6], [0, 0.5, 0], focal=1000, width=1200, height=800, id=0)
    masks = person_masks(topo, {0: person(topo, [0, 0.5, 0])}, {0: cam}, FeedbackConfig())
    det = Detection2D(cam.project_many(np.array([0.0, 0.5, 0.0])), 1.0, 0, 0)
    occ = detection_occupancy(masks, {0: [det], 1: [det]}, [0])
    assert occ == {(0, 0, 0): 1.0}


def test_debug_dumps(tmp_path):
    binary = np.zeros((4, 6), dtype=bool)
    binary[1, 2] = True
    write_pgm(tmp_path / "m.pgm", binary)
    write_pfm(tmp_path / "m.pfm", binary.astype(float))
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n6 4\n255\n") and raw[-24:][1 * 6 + 2] == 255
    pfm = (tmp_path / "m.pfm").read_bytes()
    assert pfm.startswith(b"Pf\n6 4\n-1.0\n")
    data = np.frombuffer(pfm[len(b"Pf\n6 4\n-1.0\n"):], dtype="<f4").reshape(4, 6)[::-1]
    np.testing.assert_array_equal(data, binary)
