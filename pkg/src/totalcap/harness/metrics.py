"""Pose accuracy metrics: MPJPE and PCP.

Estimates and truth are given per frame as ``{person_id: (N, 3) array}``
with NaN rows for joints that were not reconstructed. Estimated persons are
paired with ground-truth persons greedily by root distance.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..skeleton import BODY_BONES

ROOT = 0
MATCH_THRESHOLD = 0.5  # m

# index ranges into the full landmark layout (body, left hand, right hand, face)
SUBSETS = {
    "body": range(0, 15),
    "lhand": range(15, 36),
    "rhand": range(36, 57),
    "head": range(57, 69),
}


class NoCorrespondence(ValueError):
    pass


Frame = Mapping[int, np.ndarray]


def match_persons(
    est: Frame, gt: Frame, threshold: float = MATCH_THRESHOLD, root: int = ROOT
) -> dict[int, int]:
    """gt person -> estimated person, closest root pairs first."""
    pairs = []
    for g, gl in gt.items():
        for e, el in est.items():
            d = np.linalg.norm(np.asarray(el)[root] - np.asarray(gl)[root])
            if np.isfinite(d) and d <= threshold:
                pairs.append((d, g, e))
    pairs.sort()
    out: dict[int, int] = {}
    used: set[int] = set()
    for _, g, e in pairs:
        if g in out or e in used:
            continue
        out[g] = e
        used.add(e)
    return out


def _frames(x) -> list[Frame]:
    if isinstance(x, np.ndarray):
        return [{0: x}]
    if isinstance(x, Mapping):
        return [x]
    return list(x)


def _subset(subset) -> np.ndarray:
    if subset is None:
        return None
    if isinstance(subset, str):
        return np.asarray(SUBSETS[subset])
    return np.asarray(list(subset), dtype=int)


def mpjpe(estimated, ground_truth, subset=None) -> float:
    """Mean per-joint position error in millimeters.

    Accepts a single (N, 3) array pair, one frame dict, or a sequence of
    frame dicts. Joints missing on either side are skipped.
    """
    idx = _subset(subset)
    if idx is not None and len(idx) == 0:
        raise NoCorrespondence("empty joint subset")
    errs = []
    for est, gt in zip(_frames(estimated), _frames(ground_truth), strict=True):
        for g, e in match_persons(est, gt).items():
            a, b = np.asarray(est[e], dtype=float), np.asarray(gt[g], dtype=float)
            if idx is not None:
                a, b = a[idx], b[idx]
            d = np.linalg.norm(a - b, axis=1)
            errs.append(d[np.isfinite(d)])
    errs = np.concatenate(errs) if errs else np.zeros(0)
    if errs.size == 0:
        raise NoCorrespondence("no matched joints to compare")
    return float(1000.0 * errs.mean())


def pcp(estimated, ground_truth, bones: Sequence[tuple[int, int]] = BODY_BONES) -> float:
    """Percentage of limbs whose two endpoints both lie within half the
    ground-truth limb length of the truth. Unmatched ground-truth persons
    and missing endpoints count as incorrect limbs."""
    total = correct = 0
    for est, gt in zip(_frames(estimated), _frames(ground_truth), strict=True):
        match = match_persons(est, gt)
        for g, gl in gt.items():
            gl = np.asarray(gl, dtype=float)
            el = np.asarray(est[match[g]], dtype=float) if g in match else None
            for a, b in bones:
                total += 1
                if el is None:
                    continue
                half = 0.5 * np.linalg.norm(gl[a] - gl[b])
                ea = np.linalg.norm(el[a] - gl[a])
                eb = np.linalg.norm(el[b] - gl[b])
                if ea <= half and eb <= half:  # NaN compares False
                    correct += 1
    if total == 0:
        raise NoCorrespondence("no ground-truth limbs")
    return 100.0 * correct / total


def association_accuracy(
    assignments: Mapping[int, Mapping[int, Mapping[int, int]]],
    estimated: Frame,
    detections: Mapping[int, Sequence],
    truth: Frame,
    cameras: Mapping,
) -> float:
    """Fraction of detections given to the right person.

    A detection's true owner is the person whose projected joint of the
    same type is nearest to it; an estimated person stands for the truth
    person it is matched to by root distance. Unassigned detections count
    as wrong.
    """
    match = {e: g for g, e in match_persons(estimated, truth).items()}
    owner = {}
    for pid, views in assignments.items():
        for view, joints in views.items():
            for idx in joints.values():
                owner[(view, idx)] = pid
    total = correct = 0
    for view, dets in detections.items():
        cam = cameras[view]
        for i, det in enumerate(dets):
            total += 1
            dist = {
                g: np.linalg.norm(cam.project_many(np.asarray(gl)[det.joint_id]) - det.position)
                for g, gl in truth.items()
            }
            true_owner = min(dist, key=dist.get)
            est = owner.get((view, i))
            if est is not None and match.get(est) == true_owner:
                correct += 1
    if total == 0:
        raise NoCorrespondence("no detections")
    return correct / total
