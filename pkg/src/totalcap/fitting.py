"""Two-stage model fitting.

Stage 1 fits the global transform, body articulation and shape to a
triangulated body skeleton, then copies in the regressed hand gesture of the
best-scoring view. Stage 2 refines every parameter against the 3D skeleton
and the 2D hand and face keypoints of all views.

All energies are sums of squared residuals, so each stage is a nonlinear
least-squares problem solved by :func:`gauss_newton`. 2D residuals are in
pixels and 3D residuals in meters; the term weights absorb the unit mix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .body_model import (
    GESTURE_DIM,
    BodyParams,
    ModelTopology,
    default_topology,
    forward_kinematics,
    jacobian,
    with_gesture,
)
from .bootstrap import ScoredCandidate
from .config import FittingConfig, FitWeights
from .geometry import Camera
from .skeleton import J, SIDES

TERMS = ("E_b3d", "E_h2d", "E_f2d", "E_pri", "E_beta", "E_theta_h", "E_eps")
_LAMBDA = {
    "E_b3d": "lambda_b3d",
    "E_h2d": "lambda_h2d",
    "E_f2d": "lambda_f2d",
    "E_pri": "lambda_pri",
    "E_beta": "lambda_beta",
    "E_theta_h": "lambda_theta_h",
    "E_eps": "lambda_eps",
}


class FittingError(ValueError):
    pass


class TooFewJoints(FittingError):
    pass


class SingularNormalEquations(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class HandObservation:
    view_id: int
    side: str
    keypoints: np.ndarray  # (21, 2) detected
    confidences: np.ndarray  # (21,)
    zeta: float
    xi: float
    gesture: np.ndarray  # regressed gesture, GESTURE_DIM values
    regressed: np.ndarray | None = None  # (21, 2)

    @property
    def weight(self) -> float:
        return 0.5 * (self.zeta + self.xi)

    @classmethod
    def from_scored(cls, sc: ScoredCandidate) -> "HandObservation":
        c = sc.candidate
        return cls(
            c.view_id, c.source_side, c.keypoints_detected, c.confidences, sc.zeta, sc.xi,
            np.asarray(c.gesture_params, dtype=float), c.keypoints_regressed,
        )


@dataclass(frozen=True, eq=False)
class FaceObservation:
    view_id: int
    keypoints: np.ndarray  # (12, 2)
    confidences: np.ndarray
    weight: float = 1.0


class PosePrior(Protocol):
    def residuals(self, theta_body: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Residual vector and its Jacobian w.r.t. the flattened body articulation."""


class L2Prior:
    """Diagonal penalty on body articulation about the rest pose."""

    def residuals(self, theta_body):
        return theta_body.copy(), np.eye(theta_body.size)


@dataclass
class FitProblem:
    target_skeleton: object  # Skeleton3D
    cameras: Mapping[int, Camera]
    hand_obs: Sequence[HandObservation] = ()
    face_obs: Sequence[FaceObservation] = ()
    weights: FitWeights = field(default_factory=FitWeights)
    iterations: int = 20
    stage1_iterations: int = 20
    topology: ModelTopology | None = None
    robustifier: str = "squared"
    huber_delta: float = 5.0
    initial_damping: float = 1e-3
    prior: PosePrior = field(default_factory=L2Prior)

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.stage1_iterations < 1:
            raise FittingError("iterations must be >= 1")
        if self.robustifier not in ("squared", "huber"):
            raise FittingError(f"unknown robustifier {self.robustifier!r}")
        if self.topology is None:
            self.topology = _default_topology()

    @classmethod
    def from_config(cls, cfg: FittingConfig, **kwargs) -> "FitProblem":
        return cls(
            weights=cfg.weights,
            iterations=cfg.iterations,
            stage1_iterations=cfg.stage1_iterations,
            robustifier=cfg.robustifier,
            huber_delta=cfg.huber_delta,
            initial_damping=cfg.initial_damping,
            **kwargs,
        )

    def hands_for(self, side: str) -> list[HandObservation]:
        return [o for o in self.hand_obs if o.side == side]

    def with_regressed_keypoints(self) -> "FitProblem":
        """Same problem with regressed keypoints standing in for detections."""
        obs = [replace(o, keypoints=o.regressed) for o in self.hand_obs if o.regressed is not None]
        return replace(self, hand_obs=obs)


_TOPOLOGY_CACHE: list[ModelTopology] = []


def _default_topology() -> ModelTopology:
    if not _TOPOLOGY_CACHE:
        _TOPOLOGY_CACHE.append(default_topology())
    return _TOPOLOGY_CACHE[0]


# ---------------------------------------------------------------- solver


@dataclass
class GNResult:
    x: np.ndarray
    energy: float
    trace: list[float]  # energy after each accepted step, starting at the initial energy
    iterations: int
    accepted: int
    converged: bool


def gauss_newton(
    residual: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    iterations: int = 20,
    damping: float = 1e-3,
    max_damping: float = 1e12,
    tol: float = 1e-15,
    rtol: float = 1e-13,
) -> GNResult:
    """Minimize ``|residual(x)|^2`` with Levenberg-damped Gauss-Newton.

    Each iteration first tries the plain Gauss-Newton step; if that fails to
    lower the energy, the damped system ``(J^T J + mu I)`` is solved with
    ``mu`` growing tenfold per rejection and shrinking tenfold on acceptance.
    Once ``mu`` passes ``max_damping`` without progress the current point is
    returned as converged, as it is when the best step only improves the
    energy by less than ``rtol`` relative (rounding noise). Raises :class:`SingularNormalEquations` if no
    finite step can be formed at all.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = residual(x)
    energy = float(r @ r)
    trace = [energy]
    mu = damping
    accepted = 0
    it = 0
    converged = False
    while it < iterations:
        it += 1
        if energy <= tol:
            converged = True
            break
        Jm = jac(x)
        g = Jm.T @ r
        H = Jm.T @ Jm
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise SingularNormalEquations("non-finite normal equations")
        if np.max(np.abs(g)) <= tol:
            converged = True
            break
        step_found = False
        candidates = [0.0]
        while True:
            lam = candidates.pop(0) if candidates else mu
            try:
                delta = np.linalg.solve(H + lam * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                step_found = True
                x_new = x + delta
                r_new = residual(x_new)
                e_new = float(r_new @ r_new)
                if np.isfinite(e_new) and e_new < energy:
                    if energy - e_new <= rtol * energy and lam == 0.0:
                        converged = True
                        break
                    x, r, energy = x_new, r_new, e_new
                    trace.append(energy)
                    accepted += 1
                    if lam > 0:
                        mu = max(mu / 10.0, 1e-12)
                    break
            if lam > 0:
                mu *= 10.0
                if mu > max_damping:
                    if not step_found:
                        raise SingularNormalEquations("no finite step up to maximum damping")
                    converged = True
                    break
        if converged:
            break
    return GNResult(x, energy, trace, it, accepted, converged)


# ---------------------------------------------------------------- energies


def _robust(s: np.ndarray, kind: str, delta: float) -> np.ndarray:
    if kind == "huber":
        return np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)
    return s * s


class _Energy:
    """Residual builder for a subset of energy terms and free parameters."""

    def __init__(self, problem: FitProblem, terms: Sequence[str], free: np.ndarray | None = None):
        self.p = problem
        self.topo = problem.topology
        self.terms = tuple(terms)
        self.free = free
        topo = self.topo
        skel = problem.target_skeleton
        present = np.flatnonzero(~np.isnan(skel.joints[:, 0]))
        self.body_idx = present
        self.body_target = skel.joints[present]
        self.body_groups = topo.param_slice("body")
        self.hand_groups = topo.param_slice("hands")
        self.beta_idx = topo.param_slice("beta")
        self.eps_idx = np.concatenate([topo.param_slice("epsilon"), topo.param_slice("jaw")])
        self.hand_lm = {s: np.arange(topo.landmark_slice(f"{s}_hand").start, topo.landmark_slice(f"{s}_hand").stop) for s in SIDES}
        face = topo.landmark_slice("face")
        self.face_lm = np.arange(face.start, face.stop)

    # raw residual blocks: list of (term, residual (k,), jacobian (k, n) or None)
    def _blocks(self, x: np.ndarray, with_jac: bool):
        p, topo = self.p, self.topo
        n = topo.n_params
        if with_jac:
            pos, Jl = jacobian(topo, x)
        else:
            pos, Jl = forward_kinematics(topo, x), None
        out = []
        if "E_b3d" in self.terms and len(self.body_idx):
            r = (pos[self.body_idx] - self.body_target).reshape(-1)
            out.append(("E_b3d", r, None if Jl is None else Jl[self.body_idx].reshape(-1, n), None))
        if "E_h2d" in self.terms:
            for o in p.hand_obs:
                lm = self.hand_lm[o.side]
                w = o.weight * np.asarray(o.confidences, dtype=float)
                out.append(("E_h2d", *self._reproj(p.cameras[o.view_id], pos, Jl, lm, o.keypoints), w))
        if "E_f2d" in self.terms:
            for o in p.face_obs:
                w = o.weight * np.asarray(o.confidences, dtype=float)
                out.append(("E_f2d", *self._reproj(p.cameras[o.view_id], pos, Jl, self.face_lm, o.keypoints), w))
        for term, idx in (
            ("E_beta", self.beta_idx),
            ("E_theta_h", self.hand_groups),
            ("E_eps", self.eps_idx),
        ):
            if term in self.terms:
                Jr = None
                if with_jac:
                    Jr = np.zeros((len(idx), n))
                    Jr[np.arange(len(idx)), idx] = 1.0
                out.append((term, x[idx].copy(), Jr, None))
        if "E_pri" in self.terms:
            r, Jp = p.prior.residuals(x[self.body_groups])
            Jr = None
            if with_jac:
                Jr = np.zeros((len(r), n))
                Jr[:, self.body_groups] = Jp
            out.append(("E_pri", r, Jr, None))
        return out

    @staticmethod
    def _reproj(cam: Camera, pos, Jl, lm, target):
        P = pos[lm]
        pc = P @ cam.rotation.T + cam.translation
        z = pc[:, 2]
        uv = cam.focal * pc[:, :2] / z[:, None] + cam.principal_point
        r = (uv - np.asarray(target, dtype=float)).reshape(-1)
        if Jl is None:
            return r, None
        # d(uv)/d(world point) = f/z [[1, 0, -x/z], [0, 1, -y/z]] R
        D = np.zeros((len(lm), 2, 3))
        D[:, 0, 0] = D[:, 1, 1] = cam.focal / z
        D[:, 0, 2] = -cam.focal * pc[:, 0] / z**2
        D[:, 1, 2] = -cam.focal * pc[:, 1] / z**2
        D = D @ cam.rotation
        Jr = np.einsum("lij,ljn->lin", D, Jl[lm]).reshape(-1, Jl.shape[-1])
        return r, Jr

    def _scaled(self, x: np.ndarray, with_jac: bool):
        """Weighted residuals whose squared norm is the weighted energy."""
        wts = self.p.weights
        rs, Js = [], []
        for term, r, Jr, w in self._blocks(x, with_jac):
            lam = getattr(wts, _LAMBDA[term])
            if w is None:
                scale = np.full(len(r), np.sqrt(lam))
            else:
                s = np.linalg.norm(r.reshape(-1, 2), axis=1)
                rho = _robust(s, self.p.robustifier, self.p.huber_delta)
                with np.errstate(divide="ignore", invalid="ignore"):
                    f = np.where(s > 0, np.sqrt(rho) / s, 1.0)
                scale = np.repeat(np.sqrt(lam * w) * f, 2)
            rs.append(scale * r)
            if with_jac:
                Js.append(scale[:, None] * Jr)
        r = np.concatenate(rs) if rs else np.zeros(0)
        if not with_jac:
            return r, None
        Jm = np.vstack(Js) if Js else np.zeros((0, self.topo.n_params))
        return r, Jm

    def raw_terms(self, x: np.ndarray) -> dict[str, float]:
        out = {t: 0.0 for t in TERMS}
        for term, r, _, w in self._blocks(x, False):
            if w is None:
                out[term] += float(r @ r)
            else:
                s = np.linalg.norm(r.reshape(-1, 2), axis=1)
                out[term] += float(np.sum(w * _robust(s, self.p.robustifier, self.p.huber_delta)))
        return out

    # solver plumbing over the free subset
    def solve(self, x0: np.ndarray, iterations: int) -> GNResult:
        free = np.arange(len(x0)) if self.free is None else self.free
        base = np.asarray(x0, dtype=float).copy()

        def full(z):
            x = base.copy()
            x[free] = z
            return x

        res = gauss_newton(
            lambda z: self._scaled(full(z), False)[0],
            lambda z: self._scaled(full(z), True)[1][:, free],
            base[free],
            iterations=iterations,
            damping=self.p.initial_damping,
        )
        res.x = full(res.x)
        return res


def energy_report(
    problem: FitProblem, params: BodyParams | np.ndarray, weighted: bool = True
) -> dict[str, float]:
    """Per-term energies and their sum ``E_total``.

    Terms are reported as their weighted contributions (lambda times the
    raw sum of squares) so that ``E_total`` is their plain sum; pass
    ``weighted=False`` for the raw sums, ``E_total`` is weighted either way.
    """
    x = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=float)
    raw = _Energy(problem, TERMS).raw_terms(x)
    contrib = {t: getattr(problem.weights, _LAMBDA[t]) * raw[t] for t in TERMS}
    out = dict(contrib) if weighted else dict(raw)
    out["E_total"] = float(sum(contrib.values()))
    return out


def full_residuals(problem: FitProblem, x: np.ndarray, with_jac: bool = True):
    """Stage-2 weighted residual vector and Jacobian."""
    return _Energy(problem, TERMS)._scaled(np.asarray(x, dtype=float), with_jac)


# ---------------------------------------------------------------- stages


def select_initial_gesture(hand_obs: Sequence[HandObservation]) -> np.ndarray:
    """Regressed gesture of the view with the largest zeta + xi; rest pose if none."""
    if not hand_obs:
        return np.zeros(GESTURE_DIM)
    best = max(enumerate(hand_obs), key=lambda t: (t[1].zeta + t[1].xi, -t[0]))[1]
    return np.asarray(best.gesture, dtype=float).copy()


_TORSO = ("mid_hip", "neck", "l_shoulder", "r_shoulder", "l_hip", "r_hip", "nose")


def initial_params_from_skeleton(topology: ModelTopology, skeleton) -> BodyParams:
    """Rest pose rigidly aligned (Kabsch) to the skeleton's torso joints."""
    params = topology.zero_params()
    rest = forward_kinematics(topology, params)
    idx = [J[n] for n in _TORSO if not np.isnan(skeleton.joints[J[n], 0])]
    if len(idx) < 3:
        idx = list(np.flatnonzero(~np.isnan(skeleton.joints[:, 0])))
    if len(idx) < 3:
        raise TooFewJoints("need at least 3 joints to place the model")
    A = rest[idx]
    B = skeleton.joints[idx]
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    rot, _ = Rotation.align_vectors(B - cb, A - ca)
    params.global_rotation = rot.as_rotvec()
    params.global_translation = cb - rot.apply(ca)
    return params


@dataclass
class FitOutcome:
    params: BodyParams
    result: GNResult
    energies: dict[str, float]


def _stage1_free(topology: ModelTopology) -> np.ndarray:
    wrists = {topology.group_sets[f"{s}_gesture"][0] for s in SIDES}
    groups = [g for g in topology.group_sets["body"] if g not in wrists]
    idx = [np.arange(6)] + [6 + 3 * g + np.arange(3) for g in groups] + [topology.param_slice("beta")]
    return np.concatenate(idx).astype(int)


def stage1_outcome(
    problem: FitProblem, init: BodyParams | None = None, select_gesture: bool = True
) -> FitOutcome:
    topo = problem.topology
    if int(np.sum(~np.isnan(problem.target_skeleton.joints[:, 0]))) < 4:
        raise TooFewJoints("stage 1 needs at least 4 present body joints")
    if init is None:
        init = initial_params_from_skeleton(topo, problem.target_skeleton)
    params = init.copy()
    for side in SIDES:
        gesture = select_initial_gesture(problem.hands_for(side)) if select_gesture else np.zeros(GESTURE_DIM)
        params = with_gesture(topo, params, side, gesture)
    energy = _Energy(problem, ("E_b3d", "E_pri", "E_beta"), free=_stage1_free(topo))
    res = energy.solve(params.to_vector(), problem.stage1_iterations)
    out = BodyParams.from_vector(res.x, topo.n_groups)
    return FitOutcome(out, res, energy_report(problem, out))


def stage1_fit(problem: FitProblem, init: BodyParams | None = None, select_gesture: bool = True) -> BodyParams:
    return stage1_outcome(problem, init, select_gesture).params


def stage2_outcome(problem: FitProblem, init: BodyParams) -> FitOutcome:
    energy = _Energy(problem, TERMS)
    res = energy.solve(init.to_vector(), problem.iterations)
    out = BodyParams.from_vector(res.x, problem.topology.n_groups)
    return FitOutcome(out, res, energy_report(problem, out))


def stage2_fit(problem: FitProblem, init: BodyParams) -> BodyParams:
    return stage2_outcome(problem, init).params


def hand_reprojection_error(problem: FitProblem, params: BodyParams | np.ndarray) -> float:
    """Mean pixel distance between projected model hand landmarks and the
    observed keypoints, over observations with positive view weight."""
    x = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=float)
    pos = forward_kinematics(problem.topology, x)
    topo = problem.topology
    errs = []
    for o in problem.hand_obs:
        if o.weight <= 0:
            continue
        sl = topo.landmark_slice(f"{o.side}_hand")
        uv = problem.cameras[o.view_id].project_many(pos[sl])
        errs.append(np.linalg.norm(uv - o.keypoints, axis=1))
    if not errs:
        return 0.0
    return float(np.mean(np.concatenate(errs)))
