import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totalcap.bootstrap import (
    BETA,
    BootstrapError,
    CoincidentJoints,
    DetectorFailure,
    HandCandidate,
    PartInstance,
    PrecomputedDetector,
    RoI,
    ScoredCandidate,
    ViewMismatch,
    WristAnchor,
    cross_modality_score,
    cross_scale_score,
    extrapolate_hand_center,
    initial_roi,
    iou,
    nms_associate,
    refine_roi,
)
from totalcap.geometry import Camera, look_at

HALF_DIAG_VALUE = 1 - 2 * 50 / np.sqrt(20000)  # w = h = 100, offset length 50


def candidate(detected, regressed=None, center=(0.0, 0.0), half=50.0, view=0, person=0, side="left", depth=0.0):
    detected = np.asarray(detected, dtype=float)
    return HandCandidate(
        roi=RoI(np.asarray(center, dtype=float), half, half, view, BETA),
        keypoints_detected=detected,
        confidences=np.ones(21),
        keypoints_regressed=detected if regressed is None else np.asarray(regressed, dtype=float),
        gesture_params=np.zeros(3),
        chirality=side,
        source_person=person,
        source_side=side,
        anchor_depth=depth,
    )


def random_keypoints(rng, n=21):
    return rng.uniform(-40, 40, (n, 2))


class TestExtrapolation:
    def test_quarter_beyond_wrist(self):
        np.testing.assert_allclose(extrapolate_hand_center([0, 0, 1], [0, 0, 0]), [0, 0, 1.25])

    def test_coincident(self):
        with pytest.raises(CoincidentJoints):
            extrapolate_hand_center([1, 2, 3], [1, 2, 3])

    def test_zero_gamma_returns_wrist(self):
        np.testing.assert_array_equal(extrapolate_hand_center([1, 0, 0], [0, 0, 0], gamma=0.0), [1, 0, 0])


class TestInitialRoi:
    def test_radius_at_three_meters(self, identity_cam):
        roi = initial_roi(identity_cam, [0, 0, 3.0], 0.15)
        assert roi.half_width == pytest.approx(50.0, abs=1e-12)
        np.testing.assert_allclose(roi.center, [500, 500])

    def test_doubling_depth_halves_radius(self, identity_cam):
        a = initial_roi(identity_cam, [0, 0, 2.0], 0.15)
        b = initial_roi(identity_cam, [0, 0, 4.0], 0.15)
        assert b.half_width == a.half_width / 2

    def test_behind_camera(self, identity_cam):
        assert initial_roi(identity_cam, [0, 0, -1.0], 0.15) is None
        assert initial_roi(identity_cam, [0, 0, 0.0], 0.15) is None

    def test_far_outside_image(self, identity_cam):
        assert initial_roi(identity_cam, [10.0, 0, 3.0], 0.15) is None

    @settings(max_examples=100, deadline=None)
    @given(st.floats(100, 5000), st.floats(0.5, 20), st.floats(0.01, 1.0))
    def test_radius_law(self, f, d, R):
        cam = Camera(f, [1000, 1000], np.eye(3), np.zeros(3), 2000, 2000)
        roi = initial_roi(cam, [0, 0, d], R)
        assert roi.half_width * d == pytest.approx(f * R, rel=1e-9)


def _instance(view, center, half=20.0):
    kp = np.tile(np.asarray(center, dtype=float), (21, 1))
    return PartInstance(
        view_id=view,
        box=RoI(np.asarray(center, dtype=float), half, half, view, BETA),
        keypoints_detected=kp,
        confidences=np.ones(21),
        regressed={"left": kp, "right": kp},
        gesture={"left": np.zeros(3), "right": np.zeros(3)},
    )


class TestRefine:
    def test_single_hand_passthrough(self):
        det = PrecomputedDetector({0: [_instance(0, (100, 100))]})
        (beta,) = refine_roi(det, RoI(np.array([100.0, 100.0]), 50, 50, 0), "left")
        np.testing.assert_array_equal(beta.center, [100, 100])
        assert beta.half_width == 20 and beta.stage == BETA

    def test_two_hands_in_one_alpha(self):
        det = PrecomputedDetector({0: [_instance(0, (80, 100)), _instance(0, (125, 100))]})
        betas = refine_roi(det, RoI(np.array([100.0, 100.0]), 50, 50, 0), "right")
        assert len(betas) == 2

    def test_results_clipped_into_alpha(self):
        det = PrecomputedDetector({0: [_instance(0, (140, 100))]})
        alpha = RoI(np.array([100.0, 100.0]), 50, 50, 0)
        (beta,) = refine_roi(det, alpha, "left")
        assert beta.bounds[2] <= alpha.bounds[2]

    def test_empty_alpha(self):
        det = PrecomputedDetector({0: [_instance(0, (500, 500))]})
        assert refine_roi(det, RoI(np.array([100.0, 100.0]), 50, 50, 0), "left") == []

    def test_missing_chirality_output(self):
        inst = _instance(0, (100, 100))
        det = PrecomputedDetector({0: [PartInstance(0, inst.box, inst.keypoints_detected, inst.confidences, {}, {})]})
        with pytest.raises(DetectorFailure):
            refine_roi(det, RoI(np.array([100.0, 100.0]), 50, 50, 0), "left")


class TestConsistency:
    def test_identity(self):
        kp = random_keypoints(np.random.default_rng(0))
        assert cross_modality_score(candidate(kp)) == 1.0

    def test_worked_value(self):
        kp = random_keypoints(np.random.default_rng(1))
        c = candidate(kp, kp + [30, 40])
        assert cross_modality_score(c) == pytest.approx(HALF_DIAG_VALUE, abs=1e-5)
        assert cross_modality_score(c) == pytest.approx(0.29289, abs=1e-5)

    def test_clamp(self):
        kp = random_keypoints(np.random.default_rng(2))
        assert cross_modality_score(candidate(kp, kp + [60, 60])) == 0.0

    def test_cross_scale_values(self):
        kp = random_keypoints(np.random.default_rng(3))
        c = candidate(kp)
        assert cross_scale_score(c, WristAnchor(kp[0], 0, "left", 0)) == 1.0
        assert cross_scale_score(c, WristAnchor(kp[0] + [30, 40], 0, "left", 0)) == pytest.approx(0.29289, abs=1e-5)
        assert cross_scale_score(c, WristAnchor(kp[0] + [100, 0], 0, "left", 0)) == 0.0

    def test_view_mismatch(self):
        c = candidate(random_keypoints(np.random.default_rng(4)))
        with pytest.raises(ViewMismatch):
            cross_scale_score(c, WristAnchor(np.zeros(2), 0, "left", 1))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 200))
    def test_range(self, seed, spread):
        rng = np.random.default_rng(seed)
        kp = random_keypoints(rng)
        c = candidate(kp, kp + rng.normal(0, spread, kp.shape))
        z = cross_modality_score(c)
        x = cross_scale_score(c, WristAnchor(kp[0] + rng.normal(0, spread, 2), 0, "left", 0))
        assert 0.0 <= z <= 1.0 and 0.0 <= x <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, s):
        rng = np.random.default_rng(seed)
        kp = random_keypoints(rng)
        reg = kp + rng.normal(0, 20, kp.shape)
        wrist = kp[0] + rng.normal(0, 20, 2)
        a = candidate(kp, reg, center=(3, -2), half=50)
        b = candidate(s * kp, s * reg, center=(3 * s, -2 * s), half=50 * s)
        assert cross_modality_score(b) == pytest.approx(cross_modality_score(a), abs=1e-9)
        assert cross_scale_score(b, WristAnchor(s * wrist, 0, "left", 0)) == pytest.approx(
            cross_scale_score(a, WristAnchor(wrist, 0, "left", 0)), abs=1e-9
        )

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 5.0))
    def test_monotone_under_inflation(self, seed, k):
        rng = np.random.default_rng(seed)
        kp = random_keypoints(rng)
        off = rng.normal(0, 15, kp.shape)
        assert cross_modality_score(candidate(kp, kp + k * off)) <= cross_modality_score(candidate(kp, kp + off))

    def test_unity_only_at_identity(self):
        kp = random_keypoints(np.random.default_rng(5))
        reg = kp.copy()
        reg[7] += [1e-3, 0]
        assert cross_modality_score(candidate(kp, reg)) < 1.0


class TestIou:
    def test_values(self):
        a = RoI(np.array([5.0, 5.0]), 5, 5, 0)
        assert iou(a, a) == 1.0
        assert iou(a, RoI(np.array([50.0, 5.0]), 5, 5, 0)) == 0.0
        assert iou(a, RoI(np.array([10.0, 5.0]), 5, 5, 0)) == pytest.approx(1 / 3)


class TestNms:
    def scored(self, score, center=(0, 0), person=0, side="left", depth=0.0):
        c = candidate(np.zeros((21, 2)), center=center, person=person, side=side, depth=depth)
        return ScoredCandidate(c, score / 2, score / 2)

    def test_single(self):
        out = nms_associate([self.scored(0.3)])
        assert list(out) == [(0, "left", 0)]

    def test_best_survives_overlap(self):
        good = self.scored(1.8, person=0)
        bad = self.scored(0.6, center=(5, 0), person=1, side="right")
        out = nms_associate([bad, good])
        assert list(out.values()) == [good]

    def test_disjoint_both_kept(self):
        out = nms_associate([self.scored(1.0), self.scored(0.5, center=(300, 0), person=1)])
        assert len(out) == 2

    def test_tie_goes_to_nearer_anchor(self):
        far = self.scored(1.0, person=0, depth=4.0)
        near = self.scored(1.0, person=1, depth=2.0)
        assert list(nms_associate([far, near]).values()) == [near]

    def test_one_per_source(self):
        out = nms_associate([self.scored(1.0), self.scored(0.9, center=(300, 0))])
        assert len(out) == 1 and out[(0, "left", 0)].score == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_no_overlapping_survivors(self, seed, n):
        rng = np.random.default_rng(seed)
        cands = []
        for i in range(n):
            c = candidate(
                np.zeros((21, 2)),
                center=rng.uniform(0, 200, 2),
                half=rng.uniform(10, 60),
                view=int(rng.integers(0, 2)),
                person=i,
            )
            cands.append(ScoredCandidate(c, rng.uniform(), rng.uniform()))
        kept = list(nms_associate(cands).values())
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.candidate.view_id == b.candidate.view_id:
                    assert iou(a.candidate.roi, b.candidate.roi) <= 0.5


def test_roi_rejects_nonpositive_extent():
    with pytest.raises(BootstrapError):
        RoI(np.zeros(2), 0.0, 1.0, 0)


def test_roi_law_on_look_at_camera():
    cam = look_at([0, 0, 5], [0, 0, 0], focal=1200, width=1000, height=1000)
    roi = initial_roi(cam, [0.1, 0.2, 0.0], 0.15)
    assert roi.half_width * 5.0 == pytest.approx(1200 * 0.15, rel=1e-9)
