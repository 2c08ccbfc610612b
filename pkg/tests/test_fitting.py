from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totalcap.association import Skeleton3D
from totalcap.body_model import forward_kinematics, get_gesture
from totalcap.config import FitWeights
from totalcap.fitting import (
    TERMS,
    FaceObservation,
    FitProblem,
    HandObservation,
    SingularNormalEquations,
    TooFewJoints,
    energy_report,
    full_residuals,
    gauss_newton,
    hand_reprojection_error,
    select_initial_gesture,
    stage1_outcome,
    stage2_outcome,
)
from totalcap.skeleton import SIDES


def truth_params(topo, rng):
    p = topo.zero_params()
    p.global_rotation = rng.normal(0, 0.2, 3)
    p.global_translation = np.array([0.0, 1.0, 0.0]) + rng.normal(0, 0.05, 3)
    body = topo.param_slice("body")
    hands = topo.param_slice("hands")
    x = p.to_vector()
    x[body] = rng.normal(0, 0.2, body.size)
    x[hands] = rng.normal(0, 0.15, hands.size)
    x[topo.param_slice("beta")] = rng.normal(0, 0.2, 8)
    return type(p).from_vector(x, topo.n_groups)


def make_problem(topo, cams, truth, noise=0.0, seed=0, with_face=False, **kw):
    rng = np.random.default_rng(seed)
    land = forward_kinematics(topo, truth)
    skel = Skeleton3D(0, land[:15].copy(), np.ones(15))
    hands = []
    for cam in cams:
        for side in SIDES:
            uv = cam.project_many(land[topo.landmark_slice(f"{side}_hand")])
            hands.append(
                HandObservation(
                    cam.id, side, uv + rng.normal(0, noise, uv.shape), np.ones(21), 1.0, 1.0,
                    get_gesture(topo, truth, side), uv.copy(),
                )
            )
    faces = []
    if with_face:
        for cam in cams:
            uv = cam.project_many(land[topo.landmark_slice("face")])
            faces.append(FaceObservation(cam.id, uv, np.ones(len(uv))))
    return FitProblem(
        target_skeleton=skel, cameras={c.id: c for c in cams}, hand_obs=hands, face_obs=faces, topology=topo, **kw
    )


@pytest.fixture
def truth(topo):
    return truth_params(topo, np.random.default_rng(11))


class TestGaussNewton:
    def test_rosenbrock(self):
        res = gauss_newton(
            lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]]),
            lambda x: np.array([[-20 * x[0], 10.0], [-1.0, 0.0]]),
            np.array([-1.2, 1.0]),
            iterations=200,
        )
        assert np.linalg.norm(res.x - [1, 1]) < 1e-6

    def test_linear_least_squares_in_one_step(self):
        rng = np.random.default_rng(0)
        A, b = rng.normal(size=(20, 5)), rng.normal(size=20)
        res = gauss_newton(lambda x: A @ x - b, lambda x: A, np.zeros(5), iterations=10)
        np.testing.assert_allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-10)
        assert res.accepted == 1

    def test_zero_residual_returns_init(self):
        x0 = np.array([3.0, -1.0])
        res = gauss_newton(lambda x: np.zeros(2), lambda x: np.eye(2), x0)
        np.testing.assert_array_equal(res.x, x0)
        assert res.converged

    def test_non_finite_jacobian(self):
        with pytest.raises(SingularNormalEquations):
            gauss_newton(lambda x: x + 1, lambda x: np.full((2, 2), np.nan), np.zeros(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_trace_is_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=3)
        res = gauss_newton(
            lambda x: np.concatenate([np.sin(x) - a, 0.1 * x**2]),
            lambda x: np.vstack([np.diag(np.cos(x)), np.diag(0.2 * x)]),
            rng.normal(0, 2, 3),
            iterations=30,
        )
        assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


class TestGestureSelection:
    def obs(self, score, value):
        return HandObservation(0, "left", np.zeros((21, 2)), np.ones(21), score / 2, score / 2, np.full(48, value))

    def test_single(self):
        assert select_initial_gesture([self.obs(0.2, 3.0)])[0] == 3.0

    def test_argmax(self):
        g = select_initial_gesture([self.obs(1.7, 1.0), self.obs(0.9, 2.0), self.obs(1.2, 3.0)])
        assert g[0] == 1.0

    def test_empty(self):
        assert not select_initial_gesture([]).any()


class TestStage1:
    def test_recovers_perturbed_pose(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth)
        init = truth.copy()
        body = topo.param_slice("body")
        x = init.to_vector()
        x[body] += 0.1 * np.random.default_rng(1).choice([-1, 1], body.size)
        out = stage1_outcome(problem, type(init).from_vector(x, topo.n_groups))
        est = forward_kinematics(topo, out.params)[:15]
        err = np.linalg.norm(est - problem.target_skeleton.joints, axis=1).mean()
        assert err < 5e-3
        assert out.result.trace[-1] <= out.result.trace[0]

    def test_fixed_point(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth)
        first = stage1_outcome(problem).params
        again = stage1_outcome(problem, first).params
        np.testing.assert_allclose(again.to_vector(), first.to_vector(), atol=1e-8)

    def test_too_few_joints(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth)
        joints = np.full((15, 3), np.nan)
        joints[:3] = problem.target_skeleton.joints[:3]
        problem = replace(problem, target_skeleton=Skeleton3D(0, joints, np.ones(15)))
        with pytest.raises(TooFewJoints):
            stage1_outcome(problem)

    def test_takes_best_gesture(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth)
        out = stage1_outcome(problem).params
        np.testing.assert_array_equal(get_gesture(topo, out, "left"), get_gesture(topo, truth, "left"))


class TestStage2:
    def test_noise_free_reprojection(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth)
        s1 = stage1_outcome(problem, select_gesture=False).params
        out = stage2_outcome(problem, s1)
        assert hand_reprojection_error(problem, out.params) < 0.5
        assert hand_reprojection_error(problem, out.params) < hand_reprojection_error(problem, s1)
        trace = out.result.trace
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_zero_data_weights_fixed_point(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth, weights=FitWeights(lambda_h2d=0.0, lambda_f2d=0.0))
        s1 = stage1_outcome(problem, select_gesture=False).params
        out = stage2_outcome(problem, s1).params
        np.testing.assert_allclose(out.to_vector(), s1.to_vector(), atol=1e-8)

    def test_no_observations_keeps_stage1(self, topo, ring, truth):
        problem = replace(make_problem(topo, ring, truth), hand_obs=[])
        s1 = stage1_outcome(problem).params
        np.testing.assert_allclose(stage2_outcome(problem, s1).params.to_vector(), s1.to_vector(), atol=1e-8)

    def test_view_weight_scaling_keeps_solution(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth, noise=1.0, seed=4)
        halved = replace(problem, hand_obs=[replace(o, zeta=0.5 * o.zeta, xi=0.5 * o.xi) for o in problem.hand_obs])
        s1 = stage1_outcome(problem).params
        a = forward_kinematics(topo, stage2_outcome(problem, s1).params)
        b = forward_kinematics(topo, stage2_outcome(halved, s1).params)
        assert np.abs(a - b).max() < 1e-3


class TestEnergy:
    def test_zero_at_truth(self, topo, ring, truth):
        rep = energy_report(make_problem(topo, ring, truth, with_face=True), truth)
        for term in ("E_b3d", "E_h2d", "E_f2d"):
            assert rep[term] < 1e-10

    def test_total_is_sum(self, topo, ring, truth):
        rep = energy_report(make_problem(topo, ring, truth, noise=2.0, with_face=True), truth)
        assert rep["E_total"] == pytest.approx(sum(rep[t] for t in TERMS), rel=1e-12)
        assert all(rep[t] >= 0 for t in TERMS)

    def offset_problem(self, topo, ring, truth, **kw):
        problem = make_problem(topo, ring, truth, **kw)
        o = problem.hand_obs[0]
        kp = o.keypoints.copy()
        kp[5] += [6.0, 8.0]
        return replace(problem, hand_obs=[replace(o, keypoints=kp)])

    def test_single_offset(self, topo, ring, truth):
        rep = energy_report(self.offset_problem(topo, ring, truth), truth)
        assert rep["E_h2d"] == pytest.approx(1e-4 * 100, rel=1e-9)

    def test_single_offset_huber(self, topo, ring, truth):
        rep = energy_report(self.offset_problem(topo, ring, truth, robustifier="huber"), truth)
        assert rep["E_h2d"] == pytest.approx(1e-4 * (2 * 5 * 10 - 25), rel=1e-9)

    def test_zero_weight_view(self, topo, ring, truth):
        problem = self.offset_problem(topo, ring, truth)
        problem = replace(problem, hand_obs=[replace(problem.hand_obs[0], zeta=0.0, xi=0.0)])
        assert energy_report(problem, truth)["E_h2d"] == 0.0

    def test_doubling_lambda(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth, noise=2.0)
        a = energy_report(problem, truth)["E_h2d"]
        b = energy_report(replace(problem, weights=FitWeights(lambda_h2d=2e-4)), truth)["E_h2d"]
        assert b == 2 * a

    def test_unweighted_report(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth, noise=2.0)
        raw = energy_report(problem, truth, weighted=False)
        assert raw["E_h2d"] * 1e-4 == pytest.approx(energy_report(problem, truth)["E_h2d"])

    def test_residual_norm_is_total(self, topo, ring, truth):
        problem = make_problem(topo, ring, truth, noise=2.0, with_face=True)
        r, _ = full_residuals(problem, truth.to_vector(), with_jac=False)
        assert r @ r == pytest.approx(energy_report(problem, truth)["E_total"], rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_jacobian_matches_finite_differences(self, topo, ring, seed):
        rng = np.random.default_rng(seed)
        truth = truth_params(topo, rng)
        problem = make_problem(topo, ring, truth, noise=3.0, seed=seed, with_face=True)
        x = truth.to_vector() + rng.normal(0, 0.05, topo.n_params)
        _, jac = full_residuals(problem, x)
        h = 1e-6
        fd = np.empty_like(jac)
        for k in range(len(x)):
            e = np.zeros_like(x)
            e[k] = h
            fd[:, k] = (full_residuals(problem, x + e, False)[0] - full_residuals(problem, x - e, False)[0]) / (2 * h)
        assert np.abs(jac - fd).max() / np.abs(fd).max() < 1e-4
