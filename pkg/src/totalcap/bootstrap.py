"""Skeleton-guided hand and face localization and association.

Coarse regions come from a 3D bounding sphere around the extrapolated hand
(or head) center, projected into each view where the anchor joint was
detected. A pluggable detector refines each coarse region into zero or more
tight regions with two keypoint sets: heatmap detections (chirality
invariant) and pose-regression output (only valid for the assumed
chirality). Candidates are then de-duplicated per view with an NMS whose
confidence is the sum of the cross-modality and cross-scale scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .config import BootstrapConfig
from .geometry import Camera, depth
from .skeleton import ELBOW, FACE_ANCHOR, HAND_JOINT_COUNT, HAND_WRIST, J, SIDES, WRIST

ALPHA = "alpha"
BETA = "beta"


class BootstrapError(ValueError):
    pass


class CoincidentJoints(BootstrapError):
    pass


class ViewMismatch(BootstrapError):
    pass


class DetectorFailure(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RoI:
    center: np.ndarray
    half_width: float
    half_height: float
    view_id: int
    stage: str = ALPHA

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        if not (self.half_width > 0 and self.half_height > 0):
            raise BootstrapError("RoI half extents must be positive")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return cx - self.half_width, cy - self.half_height, cx + self.half_width, cy + self.half_height

    @property
    def area(self) -> float:
        return 4.0 * self.half_width * self.half_height

    @property
    def diagonal(self) -> float:
        return float(np.hypot(2.0 * self.half_width, 2.0 * self.half_height))

    def contains(self, point) -> bool:
        x0, y0, x1, y1 = self.bounds
        return bool(x0 <= point[0] <= x1 and y0 <= point[1] <= y1)

    def clip(self, other: "RoI", stage: str | None = None) -> "RoI | None":
        """Intersection with ``other`` as a new RoI, None if empty."""
        return from_bounds(_intersect(self.bounds, other.bounds), self.view_id, stage or self.stage)

    def clip_to_image(self, camera: Camera) -> "RoI | None":
        return from_bounds(
            _intersect(self.bounds, (0.0, 0.0, camera.width - 1.0, camera.height - 1.0)),
            self.view_id,
            self.stage,
        )

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "half_width": self.half_width,
            "half_height": self.half_height,
            "view_id": self.view_id,
            "stage": self.stage,
        }


def _intersect(a, b):
    return max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])


def from_bounds(bounds, view_id: int, stage: str = BETA) -> RoI | None:
    x0, y0, x1, y1 = bounds
    if x1 <= x0 or y1 <= y0:
        return None
    return RoI(np.array([(x0 + x1) / 2, (y0 + y1) / 2]), (x1 - x0) / 2, (y1 - y0) / 2, view_id, stage)


@dataclass(frozen=True, eq=False)
class PartDetection:
    """One refined region as returned by a detector."""

    roi: RoI
    keypoints_detected: np.ndarray  # (n, 2)
    confidences: np.ndarray  # (n,)
    keypoints_regressed: np.ndarray  # (n, 2)
    gesture_params: np.ndarray


@dataclass(frozen=True, eq=False)
class HandCandidate:
    roi: RoI
    keypoints_detected: np.ndarray
    confidences: np.ndarray
    keypoints_regressed: np.ndarray
    gesture_params: np.ndarray
    chirality: str | None
    source_person: int
    source_side: str
    anchor_depth: float = 0.0
    part: str = "hand"

    def __post_init__(self) -> None:
        kd = np.asarray(self.keypoints_detected, dtype=float)
        kr = np.asarray(self.keypoints_regressed, dtype=float)
        conf = np.asarray(self.confidences, dtype=float)
        object.__setattr__(self, "keypoints_detected", kd)
        object.__setattr__(self, "keypoints_regressed", kr)
        object.__setattr__(self, "confidences", conf)
        if kd.shape != kr.shape or kd.shape[1:] != (2,) or conf.shape != kd.shape[:1]:
            raise BootstrapError("detected/regressed keypoints must be matching (n, 2) arrays")
        if self.part == "hand" and kd.shape[0] != HAND_JOINT_COUNT:
            raise BootstrapError(f"hand candidates carry {HAND_JOINT_COUNT} joints")
        if np.any((conf < 0) | (conf > 1)):
            raise BootstrapError("confidences must lie in [0, 1]")

    @property
    def view_id(self) -> int:
        return self.roi.view_id

    @property
    def key(self) -> tuple[int, str, int]:
        return self.source_person, self.source_side, self.roi.view_id


@dataclass(frozen=True, eq=False)
class WristAnchor:
    position_2d: np.ndarray
    person: int
    side: str
    view_id: int


@dataclass(frozen=True, eq=False)
class ScoredCandidate:
    candidate: HandCandidate
    zeta: float
    xi: float

    @property
    def score(self) -> float:
        return self.zeta + self.xi


class HandDetector(Protocol):
    def detect(self, view_id: int, alpha: RoI, chirality: str | None) -> list[PartDetection]:
        """Refine a coarse region; ``chirality`` is the hand side the regressor assumes."""


def extrapolate_hand_center(wrist, elbow, gamma: float = 0.25) -> np.ndarray:
    wrist = np.asarray(wrist, dtype=float)
    elbow = np.asarray(elbow, dtype=float)
    if np.linalg.norm(wrist - elbow) < 1e-12:
        raise CoincidentJoints("wrist and elbow coincide")
    return wrist + gamma * (wrist - elbow)


def face_center(nose, neck) -> np.ndarray:
    return 0.5 * (np.asarray(nose, dtype=float) + np.asarray(neck, dtype=float))


def initial_roi(camera: Camera, center, radius: float, margin: float = 0.0) -> RoI | None:
    """Square around the projected sphere, half-width ``f * R / d``.

    None when the sphere center is behind the camera or projects further
    than one radius outside the image.
    """
    if radius <= 0:
        raise BootstrapError("sphere radius must be positive")
    d = depth(camera, center)
    if d <= 0:
        return None
    o = camera.project_many(np.asarray(center, dtype=float))
    r = camera.focal * radius / d + margin
    if o[0] < -r or o[1] < -r or o[0] > camera.width - 1 + r or o[1] > camera.height - 1 + r:
        return None
    return RoI(o, r, r, camera.id, ALPHA)


def refine_roi(detector: HandDetector, alpha: RoI, chirality: str | None = None) -> list[RoI]:
    return [d.roi for d in _refine(detector, alpha, chirality)]


def _refine(detector: HandDetector, alpha: RoI, chirality: str | None) -> list[PartDetection]:
    out = []
    for det in detector.detect(alpha.view_id, alpha, chirality):
        roi = det.roi.clip(alpha, stage=BETA)
        if roi is None:
            continue
        out.append(
            PartDetection(roi, det.keypoints_detected, det.confidences, det.keypoints_regressed, det.gesture_params)
        )
    return out


def _consistency(a: np.ndarray, b: np.ndarray, roi: RoI) -> np.ndarray:
    dist = np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), axis=-1)
    return np.maximum(0.0, 1.0 - 2.0 * dist / roi.diagonal)


def cross_modality_score(cand: HandCandidate) -> float:
    """Mean per-joint agreement of regressed vs detected keypoints."""
    return float(np.mean(_consistency(cand.keypoints_regressed, cand.keypoints_detected, cand.roi)))


def cross_scale_score(cand: HandCandidate, anchor: WristAnchor, anchor_index: int = HAND_WRIST) -> float:
    if anchor.view_id != cand.view_id:
        raise ViewMismatch(f"anchor view {anchor.view_id} != candidate view {cand.view_id}")
    return float(_consistency(anchor.position_2d, cand.keypoints_detected[anchor_index], cand.roi))


def iou(a: RoI, b: RoI) -> float:
    x0, y0, x1, y1 = _intersect(a.bounds, b.bounds)
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def nms_associate(
    candidates: Iterable[ScoredCandidate], iou_threshold: float = 0.5
) -> dict[tuple[int, str, int], ScoredCandidate]:
    """Double-check NMS, per view over all persons' proposals.

    Candidates are visited by descending ``zeta + xi``; ties go to the
    source whose anchor joint is nearer the camera. A candidate survives if
    it overlaps no survivor above ``iou_threshold``. Survivors are then
    assigned to their source (person, side, view), best first.
    """
    ordered = sorted(
        enumerate(candidates),
        key=lambda t: (-t[1].score, t[1].candidate.anchor_depth, t[0]),
    )
    kept: dict[int, list[ScoredCandidate]] = {}
    out: dict[tuple[int, str, int], ScoredCandidate] = {}
    for _, sc in ordered:
        view = sc.candidate.view_id
        survivors = kept.setdefault(view, [])
        if any(iou(sc.candidate.roi, k.candidate.roi) > iou_threshold for k in survivors):
            continue
        survivors.append(sc)
        out.setdefault(sc.candidate.key, sc)
    return out


@dataclass
class BootstrapResult:
    candidates: list[ScoredCandidate] = field(default_factory=list)
    assignments: dict[tuple[int, str, int], ScoredCandidate] = field(default_factory=dict)


def bootstrap_hands(
    skeletons,
    assignments: Mapping[int, Mapping[int, Mapping[int, int]]],
    detections,
    cameras: Mapping[int, Camera],
    detector: HandDetector,
    cfg: BootstrapConfig | None = None,
) -> BootstrapResult:
    """Localize and associate hands for every person and view.

    A coarse region is produced only where the person's wrist has an
    assigned body detection in that view; that detection is the anchor
    for the cross-scale score.
    """
    cfg = cfg or BootstrapConfig()
    jobs = []
    for skel in skeletons:
        for side in SIDES:
            w, e = skel.joints[WRIST[side]], skel.joints[ELBOW[side]]
            if np.isnan(w[0]) or np.isnan(e[0]):
                continue
            try:
                center = extrapolate_hand_center(w, e, cfg.hand_extrapolation)
            except CoincidentJoints:
                continue
            jobs.append((skel.person_id, side, center, w, WRIST[side], side))
    return _bootstrap(jobs, assignments, detections, cameras, detector, cfg.hand_radius, cfg, HAND_WRIST)


def bootstrap_faces(
    skeletons,
    assignments,
    detections,
    cameras: Mapping[int, Camera],
    detector: HandDetector,
    cfg: BootstrapConfig | None = None,
) -> BootstrapResult:
    cfg = cfg or BootstrapConfig()
    jobs = []
    for skel in skeletons:
        nose, neck = skel.joints[J["nose"]], skel.joints[J["neck"]]
        if np.isnan(nose[0]) or np.isnan(neck[0]):
            continue
        jobs.append((skel.person_id, "face", face_center(nose, neck), nose, J["nose"], None))
    return _bootstrap(jobs, assignments, detections, cameras, detector, cfg.face_radius, cfg, FACE_ANCHOR)


def _bootstrap(jobs, assignments, detections, cameras, detector, radius, cfg, anchor_index):
    result = BootstrapResult()
    for person, side, center, anchor3d, anchor_joint, chirality in jobs:
        for view, per_joint in sorted(assignments.get(person, {}).items()):
            if anchor_joint not in per_joint:
                continue
            cam = cameras[view]
            alpha = initial_roi(cam, center, radius, cfg.roi_margin)
            if alpha is None:
                continue
            alpha = alpha.clip_to_image(cam)
            if alpha is None:
                continue
            anchor = WristAnchor(detections[view][per_joint[anchor_joint]].position, person, side, view)
            for det in _refine(detector, alpha, chirality):
                cand = HandCandidate(
                    roi=det.roi,
                    keypoints_detected=det.keypoints_detected,
                    confidences=det.confidences,
                    keypoints_regressed=det.keypoints_regressed,
                    gesture_params=det.gesture_params,
                    chirality=chirality,
                    source_person=person,
                    source_side=side,
                    anchor_depth=depth(cam, anchor3d),
                    part="face" if chirality is None else "hand",
                )
                result.candidates.append(
                    ScoredCandidate(cand, cross_modality_score(cand), cross_scale_score(cand, anchor, anchor_index))
                )
    result.assignments = nms_associate(result.candidates, cfg.iou_threshold)
    return result


@dataclass(frozen=True, eq=False)
class PartInstance:
    """A precomputed detector output for one physical hand or face.

    ``regressed`` and ``gesture`` are keyed by the chirality the regressor
    was run with (``"left"``/``"right"``, or ``"face"``).
    """

    view_id: int
    box: RoI
    keypoints_detected: np.ndarray
    confidences: np.ndarray
    regressed: Mapping[str, np.ndarray]
    gesture: Mapping[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "box": [*self.box.center.tolist(), self.box.half_width, self.box.half_height],
            "detected": np.asarray(self.keypoints_detected).tolist(),
            "conf": np.asarray(self.confidences).tolist(),
            "regressed": {k: np.asarray(v).tolist() for k, v in self.regressed.items()},
            "gesture": {k: np.asarray(v).tolist() for k, v in self.gesture.items()},
        }

    @classmethod
    def from_dict(cls, view_id: int, d: dict) -> "PartInstance":
        cx, cy, hw, hh = d["box"]
        return cls(
            view_id=view_id,
            box=RoI(np.array([cx, cy]), hw, hh, view_id, BETA),
            keypoints_detected=np.asarray(d["detected"], dtype=float),
            confidences=np.asarray(d["conf"], dtype=float),
            regressed={k: np.asarray(v, dtype=float) for k, v in d["regressed"].items()},
            gesture={k: np.asarray(v, dtype=float) for k, v in d["gesture"].items()},
        )


class PrecomputedDetector:
    """Detector backed by per-view precomputed instances.

    Returns every instance whose box center falls inside the coarse region,
    with the regression output matching the requested chirality.
    """

    def __init__(self, instances: Mapping[int, Sequence[PartInstance]]):
        self.instances = {v: list(items) for v, items in instances.items()}

    def detect(self, view_id: int, alpha: RoI, chirality: str | None) -> list[PartDetection]:
        key = chirality or "face"
        out = []
        for inst in self.instances.get(view_id, []):
            if not alpha.contains(inst.box.center):
                continue
            if key not in inst.regressed:
                raise DetectorFailure(f"no regression output for chirality {key!r}")
            out.append(
                PartDetection(
                    inst.box,
                    inst.keypoints_detected,
                    inst.confidences,
                    inst.regressed[key],
                    inst.gesture[key],
                )
            )
        return out
