"""Frame-by-frame capture pipeline.

association (feedback-weighted from the previous frame) -> triangulation ->
hand/face bootstrapping -> stage-1 fit -> stage-2 fit -> silhouette masks
for the next frame.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..association import AssociationResult, Detection2D, Skeleton3D, apply_feedback, build_graph, solve
from ..body_model import BodyParams, ModelTopology, default_topology, forward_kinematics
from ..bootstrap import HandDetector, PrecomputedDetector, bootstrap_faces, bootstrap_hands
from ..config import Config
from ..feedback import SoftMask, detection_occupancy, person_masks
from ..fitting import FaceObservation, FittingError, FitProblem, HandObservation, stage1_outcome, stage2_outcome
from ..geometry import Camera, GeometryError

log = logging.getLogger(__name__)

MIN_FIT_JOINTS = 4


@dataclass
class FrameInput:
    body: Mapping[int, Sequence[Detection2D]]
    hands: HandDetector | None = None
    faces: HandDetector | None = None


@dataclass
class FrameResult:
    frame: int
    skeletons: list[Skeleton3D]
    assignments: dict[int, dict[int, dict[int, int]]]
    params: dict[int, BodyParams] = field(default_factory=dict)
    energies: dict[int, dict[str, float]] = field(default_factory=dict)
    traces: dict[int, dict[str, list[float]]] = field(default_factory=dict)
    hand_views: dict[int, dict[str, list[int]]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    masks: dict[tuple[int, int], SoftMask] = field(default_factory=dict, repr=False)
    hand_obs: dict[int, list[HandObservation]] = field(default_factory=dict, repr=False)
    problems: dict[int, FitProblem] = field(default_factory=dict, repr=False)
    stage1_params: dict[int, BodyParams] = field(default_factory=dict, repr=False)

    def landmarks(self, topology: ModelTopology) -> dict[int, np.ndarray]:
        return {pid: forward_kinematics(topology, p) for pid, p in self.params.items()}

    def body_joints(self) -> dict[int, np.ndarray]:
        return {s.person_id: s.joints for s in self.skeletons}

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "frame": self.frame,
            "skeletons": [s.to_dict() for s in self.skeletons],
            "assignments": {
                str(p): {str(v): {str(j): i for j, i in js.items()} for v, js in views.items()}
                for p, views in self.assignments.items()
            },
            "params": {str(p): v.to_dict() for p, v in self.params.items()},
            "energies": {str(p): e for p, e in self.energies.items()},
            "traces": {str(p): t for p, t in self.traces.items()},
            "hand_views": {str(p): h for p, h in self.hand_views.items()},
        }
        if timings:
            d["timings"] = self.timings
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameResult":
        return cls(
            frame=int(d["frame"]),
            skeletons=[Skeleton3D.from_dict(s) for s in d["skeletons"]],
            assignments={
                int(p): {int(v): {int(j): int(i) for j, i in js.items()} for v, js in views.items()}
                for p, views in d["assignments"].items()
            },
            params={int(p): BodyParams.from_dict(v) for p, v in d["params"].items()},
            energies={int(p): e for p, e in d["energies"].items()},
            traces={int(p): t for p, t in d["traces"].items()},
            hand_views={int(p): h for p, h in d.get("hand_views", {}).items()},
            timings=d.get("timings", {}),
        )


def _camera_map(cameras) -> dict[int, Camera]:
    return dict(cameras) if isinstance(cameras, Mapping) else {c.id: c for c in cameras}


class Pipeline:
    """Stateful driver; :meth:`step` consumes one frame."""

    def __init__(
        self,
        cameras: Mapping[int, Camera] | Sequence[Camera],
        config: Config | None = None,
        topology: ModelTopology | None = None,
        feedback: bool | None = None,
    ):
        self.cameras = _camera_map(cameras)
        self.cfg = config or Config()
        self.topology = topology or default_topology()
        self.feedback = self.cfg.feedback.enabled if feedback is None else feedback
        self.prev: list[Skeleton3D] = []
        self.prev_params: dict[int, BodyParams] = {}
        self.masks: dict[tuple[int, int], SoftMask] = {}
        self.next_id = 0
        self.frame = 0

    def step(self, inp: FrameInput) -> FrameResult:
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        graph = build_graph(inp.body, self.prev, self.cameras, self.cfg.association)
        if self.feedback and self.masks and self.prev:
            occ = detection_occupancy(self.masks, graph.detections, [s.person_id for s in self.prev])
            graph = apply_feedback(graph, occ)
        assoc: AssociationResult = solve(graph, self.cfg.association, self.next_id)
        if assoc.assignments:
            self.next_id = max(self.next_id, max(assoc.assignments) + 1)
        timings["association"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        dets = graph.detections
        hands = faces = None
        if inp.hands is not None:
            hands = bootstrap_hands(assoc.skeletons, assoc.assignments, dets, self.cameras, inp.hands, self.cfg.bootstrap)
        if inp.faces is not None:
            faces = bootstrap_faces(assoc.skeletons, assoc.assignments, dets, self.cameras, inp.faces, self.cfg.bootstrap)
        timings["bootstrap"] = time.perf_counter() - t0

        result = FrameResult(self.frame, assoc.skeletons, assoc.assignments)
        t_s1 = t_s2 = 0.0
        for skel in assoc.skeletons:
            pid = skel.person_id
            if int(skel.present.sum()) < MIN_FIT_JOINTS:
                continue
            hand_obs = [
                HandObservation.from_scored(sc)
                for (p, _side, _v), sc in sorted((hands.assignments if hands else {}).items())
                if p == pid
            ]
            face_obs = [
                FaceObservation(sc.candidate.view_id, sc.candidate.keypoints_detected, sc.candidate.confidences, sc.score / 2)
                for (p, _side, _v), sc in sorted((faces.assignments if faces else {}).items())
                if p == pid
            ]
            problem = FitProblem.from_config(
                self.cfg.fitting,
                target_skeleton=skel,
                cameras=self.cameras,
                hand_obs=hand_obs,
                face_obs=face_obs,
                topology=self.topology,
            )
            try:
                a = time.perf_counter()
                s1 = stage1_outcome(problem, self.prev_params.get(pid))
                b = time.perf_counter()
                s2 = stage2_outcome(problem, s1.params)
                t_s1 += b - a
                t_s2 += time.perf_counter() - b
            except (FittingError, GeometryError, ArithmeticError) as exc:
                log.warning("frame %d person %d: fit failed (%s)", self.frame, pid, exc)
                continue
            result.params[pid] = s2.params
            result.energies[pid] = s2.energies
            result.traces[pid] = {"stage1": s1.result.trace, "stage2": s2.result.trace}
            result.hand_obs[pid] = hand_obs
            result.problems[pid] = problem
            result.stage1_params[pid] = s1.params
            result.hand_views[pid] = {
                side: sorted(o.view_id for o in hand_obs if o.side == side) for side in ("left", "right")
            }
        timings["stage1"] = t_s1
        timings["stage2"] = t_s2

        t0 = time.perf_counter()
        self.masks = (
            person_masks(self.topology, result.params, self.cameras, self.cfg.feedback) if self.feedback else {}
        )
        result.masks = self.masks
        timings["feedback"] = time.perf_counter() - t0
        result.timings = timings

        self.prev = [_fill_from_model(s, result.params.get(s.person_id), self.topology) for s in assoc.skeletons]
        self.prev_params = dict(result.params)
        self.frame += 1
        return result


def _fill_from_model(skel: Skeleton3D, params: BodyParams | None, topology: ModelTopology) -> Skeleton3D:
    """Tracking target for the next frame: triangulated joints, with joints
    that could not be triangulated taken from the fitted model."""
    if params is None or skel.present.all():
        return skel
    joints = skel.joints.copy()
    model = forward_kinematics(topology, params)[: len(joints)]
    missing = ~skel.present
    joints[missing] = model[missing]
    return Skeleton3D(skel.person_id, joints, skel.per_joint_confidence)


def run_pipeline(
    cameras,
    frames: Iterable[FrameInput],
    config: Config | None = None,
    topology: ModelTopology | None = None,
    feedback: bool | None = None,
) -> list[FrameResult]:
    pipe = Pipeline(cameras, config, topology, feedback)
    return [pipe.step(f) for f in frames]


def frame_inputs(data) -> list[FrameInput]:
    """Pipeline inputs for a :class:`~totalcap.harness.synthetic.SyntheticData`."""
    return [FrameInput(f.body, PrecomputedDetector(f.hands), PrecomputedDetector(f.faces)) for f in data.frames]
