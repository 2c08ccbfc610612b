"""Per-frame association of 2D body detections into persons.

Graph nodes are the detections of the current frame plus the skeletons of
the previous frame. Three edge families connect them:

* parsing edges: same view, bone-adjacent joints, scored by a 2D bone-length
  plausibility bound;
* matching edges: same joint across two views, ``exp(-epipolar / sigma_e)``;
* tracking edges: detection to previous person, ``exp(-reprojection / sigma_t)``.

The tracking kernel is our own choice of z^k(c); the original solver this
stands in for does not spell one out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .config import AssociationConfig
from .geometry import (
    Camera,
    DegenerateRays,
    fundamental_matrix,
    reprojection_errors,
    triangulate,
)
from .skeleton import BODY_TOPOLOGY, SkeletonTopology

DetKey = tuple[int, int]  # (view_id, index within that view's list)


class AssociationError(ValueError):
    pass


class UnknownView(AssociationError):
    pass


class OccupancyOutOfRange(AssociationError):
    pass


@dataclass(frozen=True, eq=False)
class Detection2D:
    position: np.ndarray
    confidence: float
    joint_id: int
    view_id: int

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=float).reshape(2)
        object.__setattr__(self, "position", pos)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not np.all(np.isfinite(pos)):
            raise ValueError("detection position must be finite")


@dataclass(eq=False)
class Skeleton3D:
    person_id: int
    joints: np.ndarray  # (J, 3), NaN rows for absent joints
    per_joint_confidence: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.joints[:, 0])

    def to_dict(self) -> dict:
        return {
            "person_id": self.person_id,
            "joints": [None if np.isnan(p[0]) else p.tolist() for p in self.joints],
            "confidence": self.per_joint_confidence.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton3D":
        joints = np.array([[np.nan] * 3 if p is None else p for p in d["joints"]], dtype=float)
        return cls(int(d["person_id"]), joints, np.asarray(d["confidence"], dtype=float))


@dataclass(frozen=True)
class ParsingEdge:
    view: int
    a: int
    b: int
    score: float


@dataclass(frozen=True)
class MatchingEdge:
    a: DetKey
    b: DetKey
    score: float
    support: int = 0  # other views with a same-joint detection near the pair's 3D point


@dataclass(frozen=True)
class TrackingEdge:
    det: DetKey
    person: int
    score: float


@dataclass(frozen=True, eq=False)
class AssociationGraph:
    detections: Mapping[int, Sequence[Detection2D]]
    prev: Sequence[Skeleton3D]
    cameras: Mapping[int, Camera]
    parsing_edges: tuple[ParsingEdge, ...] = ()
    matching_edges: tuple[MatchingEdge, ...] = ()
    tracking_edges: tuple[TrackingEdge, ...] = ()
    topology: SkeletonTopology = BODY_TOPOLOGY

    def detection(self, key: DetKey) -> Detection2D:
        return self.detections[key[0]][key[1]]

    @property
    def edge_count(self) -> int:
        return len(self.parsing_edges) + len(self.matching_edges) + len(self.tracking_edges)


@dataclass
class AssociationResult:
    assignments: dict[int, dict[int, dict[int, int]]]  # person -> view -> joint -> det index
    skeletons: list[Skeleton3D]

    def owner_of(self) -> dict[DetKey, int]:
        out = {}
        for person, views in self.assignments.items():
            for view, joints in views.items():
                for idx in joints.values():
                    out[(view, idx)] = person
        return out


def _camera_map(cameras) -> dict[int, Camera]:
    if isinstance(cameras, Mapping):
        return dict(cameras)
    return {c.id: c for c in cameras}


def build_graph(
    detections: Mapping[int, Sequence[Detection2D]],
    prev: Sequence[Skeleton3D],
    cameras: Mapping[int, Camera] | Sequence[Camera],
    cfg: AssociationConfig | None = None,
    topology: SkeletonTopology = BODY_TOPOLOGY,
) -> AssociationGraph:
    cfg = cfg or AssociationConfig()
    cams = _camera_map(cameras)
    for view in detections:
        if view not in cams:
            raise UnknownView(f"no camera for view {view}")

    views = sorted(detections)
    by_joint: dict[int, dict[int, list[int]]] = {
        v: {j: [] for j in range(topology.joint_count)} for v in views
    }
    for v in views:
        for i, det in enumerate(detections[v]):
            if det.view_id != v:
                raise AssociationError(f"detection listed under view {v} claims view {det.view_id}")
            by_joint[v][det.joint_id].append(i)

    parsing = []
    hi_ratio = cfg.bone_window[1]
    for v in views:
        cam = cams[v]
        dets = detections[v]
        for (pj, cj), rest in zip(topology.bones, topology.rest_lengths):
            hi = cam.focal * hi_ratio * rest / cfg.parsing_min_depth
            for a in by_joint[v][pj]:
                for b in by_joint[v][cj]:
                    length = float(np.linalg.norm(dets[a].position - dets[b].position))
                    score = 1.0 if length <= hi else float(np.exp(-(length - hi) / cfg.sigma_epipolar))
                    parsing.append(ParsingEdge(v, a, b, score))

    matching = []
    for ia, va in enumerate(views):
        for vb in views[ia + 1 :]:
            F = fundamental_matrix(cams[va], cams[vb])
            for j in range(topology.joint_count):
                A = by_joint[va][j]
                B = by_joint[vb][j]
                if not A or not B:
                    continue
                pa = np.array([np.append(detections[va][i].position, 1.0) for i in A])
                pb = np.array([np.append(detections[vb][i].position, 1.0) for i in B])
                lb = pa @ F.T  # epipolar lines in b
                la = pb @ F  # epipolar lines in a
                d_b = np.abs(lb @ pb.T) / np.hypot(lb[:, 0], lb[:, 1])[:, None]
                d_a = np.abs(pa @ la.T) / np.hypot(la[:, 0], la[:, 1])[None, :]
                dist = 0.5 * (d_a + d_b)
                for r, i in enumerate(A):
                    for s, k in enumerate(B):
                        score = float(np.exp(-dist[r, s] / cfg.sigma_epipolar))
                        support = 0
                        if score >= cfg.min_edge_score:
                            support = _support(cams, detections, by_joint, views, j, (va, i), (vb, k), cfg)
                        matching.append(MatchingEdge((va, i), (vb, k), score, support))

    tracking = []
    for skel in prev:
        for v in views:
            cam = cams[v]
            for j in range(topology.joint_count):
                if not by_joint[v][j] or np.isnan(skel.joints[j, 0]):
                    continue
                pc = cam.to_camera(skel.joints[j])
                if pc[2] <= 0:
                    continue
                uv = cam.project_many(skel.joints[j])
                for i in by_joint[v][j]:
                    dist = float(np.linalg.norm(detections[v][i].position - uv))
                    tracking.append(
                        TrackingEdge((v, i), skel.person_id, float(np.exp(-dist / cfg.sigma_tracking)))
                    )

    return AssociationGraph(
        detections={v: list(detections[v]) for v in views},
        prev=list(prev),
        cameras=cams,
        parsing_edges=tuple(parsing),
        matching_edges=tuple(matching),
        tracking_edges=tuple(tracking),
        topology=topology,
    )


def _support(cams, detections, by_joint, views, joint, a: DetKey, b: DetKey, cfg) -> int:
    """Number of third views holding a detection of ``joint`` within
    ``max_reprojection_px`` of the point triangulated from ``a`` and ``b``."""
    da, db = detections[a[0]][a[1]], detections[b[0]][b[1]]
    try:
        X = triangulate([(cams[a[0]], da.position, 1.0), (cams[b[0]], db.position, 1.0)])
    except DegenerateRays:
        return 0
    count = 0
    for v in views:
        if v in (a[0], b[0]) or not by_joint[v][joint]:
            continue
        pc = cams[v].to_camera(X)
        if pc[2] <= 0:
            continue
        uv = cams[v].project_many(X)
        near = min(np.linalg.norm(detections[v][i].position - uv) for i in by_joint[v][joint])
        if near <= cfg.max_reprojection_px:
            count += 1
    return count


def apply_feedback(
    graph: AssociationGraph, occupancy: Mapping[tuple[int, int, int], float]
) -> AssociationGraph:
    """Reweight tracking edges by normalized occupancy.

    ``occupancy`` maps ``(view, det_index, person_id)`` to tau in [0, 1].
    Detections with no occupancy entries, or whose entries sum to zero,
    keep their original tracking scores.
    """
    totals: dict[DetKey, float] = {}
    for (view, idx, _person), tau in occupancy.items():
        if not 0.0 <= tau <= 1.0 or not np.isfinite(tau):
            raise OccupancyOutOfRange(f"tau={tau} for detection {(view, idx)}")
        totals[(view, idx)] = totals.get((view, idx), 0.0) + tau

    edges = []
    for e in graph.tracking_edges:
        total = totals.get(e.det, 0.0)
        if total > 0.0:
            tau = occupancy.get((e.det[0], e.det[1], e.person), 0.0)
            e = replace(e, score=tau / total * e.score)
        edges.append(e)
    return replace(graph, tracking_edges=tuple(edges))


@dataclass
class _Cluster:
    members: dict[tuple[int, int], int] = field(default_factory=dict)  # (view, joint) -> det index
    person: int | None = None
    points: dict[int, np.ndarray] = field(default_factory=dict)  # triangulated joints
    match_scores: list[float] = field(default_factory=list)

    def views(self) -> set[int]:
        return {v for v, _ in self.members}

    def joints(self) -> set[int]:
        return {j for _, j in self.members}


class _Solver:
    def __init__(self, graph: AssociationGraph, cfg: AssociationConfig):
        self.g = graph
        self.cfg = cfg
        self.topo = graph.topology
        self.clusters: dict[int, _Cluster] = {}
        self.owner: dict[DetKey, int] = {}
        self.person_cluster: dict[int, int] = {}
        self._next = 0
        for skel in graph.prev:
            cid = self._new_cluster()
            self.clusters[cid].person = skel.person_id
            self.person_cluster[skel.person_id] = cid

    def _new_cluster(self) -> int:
        cid = self._next
        self._next += 1
        self.clusters[cid] = _Cluster()
        return cid

    def cluster_of(self, key: DetKey) -> int:
        cid = self.owner.get(key)
        if cid is None:
            cid = self._new_cluster()
            det = self.g.detection(key)
            self.clusters[cid].members[(key[0], det.joint_id)] = key[1]
            self.owner[key] = cid
        return cid

    def _observations(self, members: Mapping[tuple[int, int], int], joint: int):
        obs = []
        for (view, j), idx in members.items():
            if j == joint:
                det = self.g.detections[view][idx]
                obs.append((self.g.cameras[view], det.position, det.confidence))
        return obs

    def _triangulate(self, members, joint) -> np.ndarray | None:
        """Triangulated joint, None if under-observed, False if inconsistent."""
        obs = self._observations(members, joint)
        if len(obs) < 2:
            return None
        try:
            p = triangulate(obs)
        except DegenerateRays:
            return False
        if reprojection_errors(obs, p).max() > self.cfg.max_reprojection_px:
            return False
        return p

    def merge(self, ca: int, cb: int) -> bool:
        A, B = self.clusters[ca], self.clusters[cb]
        if A.person is not None and B.person is not None and A.person != B.person:
            return False
        if A.members.keys() & B.members.keys():
            return False
        members = {**A.members, **B.members}
        points = {**A.points, **B.points}
        changed = B.joints()
        for j in changed:
            if j in A.joints() and j in B.joints():
                p = self._triangulate(members, j)
            else:
                p = A.points.get(j) if j in A.joints() else B.points.get(j)
                if p is None:
                    p = self._triangulate(members, j)
            if p is False:
                return False
            if p is None:
                points.pop(j, None)
            else:
                points[j] = p
        lo, hi = self.cfg.bone_window
        for j in changed:
            if j not in points:
                continue
            for other, b in self.topo.neighbors[j]:
                if other not in points:
                    continue
                ratio = np.linalg.norm(points[j] - points[other]) / self.topo.rest_lengths[b]
                if not lo <= ratio <= hi:
                    return False
        # commit: fold the smaller-id cluster's bookkeeping into the bound one
        keep, drop = (ca, cb) if A.person is not None or B.person is None else (cb, ca)
        K, D = self.clusters[keep], self.clusters[drop]
        K.members = members
        K.points = points
        K.match_scores = K.match_scores + D.match_scores
        for (view, _j), idx in D.members.items():
            self.owner[(view, idx)] = keep
        del self.clusters[drop]
        for pid, cid in list(self.person_cluster.items()):
            if cid == drop:
                self.person_cluster[pid] = keep
        return True

    def _match(self, e: MatchingEdge, floor: float) -> None:
        if e.score < floor:
            return
        ca, cb = self.cluster_of(e.a), self.cluster_of(e.b)
        if ca != cb and self.merge(ca, cb):
            self.clusters[self.owner[e.a]].match_scores.append(e.score)

    def _bone_plausibility(self, e: ParsingEdge) -> float:
        """|log(length / rest)| of the 3D bone between the two detections'
        current groups; inf when either end is not triangulated."""
        ja = self.g.detections[e.view][e.a].joint_id
        jb = self.g.detections[e.view][e.b].joint_id
        pa = self.clusters[self.owner[(e.view, e.a)]].points.get(ja) if (e.view, e.a) in self.owner else None
        pb = self.clusters[self.owner[(e.view, e.b)]].points.get(jb) if (e.view, e.b) in self.owner else None
        if pa is None or pb is None:
            return np.inf
        bone = next((b for other, b in self.topo.neighbors[ja] if other == jb), None)
        length = np.linalg.norm(pa - pb)
        if bone is None or length == 0:
            return np.inf
        return abs(float(np.log(length / self.topo.rest_lengths[bone])))

    def run(self, next_person_id: int) -> AssociationResult:
        floor = self.cfg.min_edge_score
        matching = self.g.matching_edges
        corroborated = sorted(
            (i for i, e in enumerate(matching) if e.support > 0),
            key=lambda i: (-matching[i].support, -matching[i].score, i),
        )
        tracking = sorted(
            range(len(self.g.tracking_edges)), key=lambda i: (-self.g.tracking_edges[i].score, i)
        )
        lone = sorted(
            (i for i, e in enumerate(matching) if e.support == 0),
            key=lambda i: (-matching[i].score, i),
        )
        # pass 1a: cross-view groups corroborated by further views
        for i in corroborated:
            self._match(matching[i], floor)
        # pass 1b: bind groups to previous persons
        for i in tracking:
            e = self.g.tracking_edges[i]
            if e.score < floor:
                break
            if e.person not in self.person_cluster:
                continue
            c = self.cluster_of(e.det)
            target = self.person_cluster[e.person]
            if c == target or self.clusters[c].person is not None:
                continue
            self.merge(target, c)
        # pass 1c: pairwise matches nobody else corroborates
        for i in lone:
            if matching[i].score < floor:
                break
            self._match(matching[i], floor)

        # pass 2: parsing edges link joint groups into bodies; among equal
        # scores, pairs whose triangulated bone is closest to rest length go first
        plaus = [self._bone_plausibility(e) for e in self.g.parsing_edges]
        parsing = sorted(
            range(len(self.g.parsing_edges)), key=lambda i: (-self.g.parsing_edges[i].score, plaus[i], i)
        )
        for i in parsing:
            e = self.g.parsing_edges[i]
            if e.score < floor:
                break
            ca, cb = self.cluster_of((e.view, e.a)), self.cluster_of((e.view, e.b))
            if ca != cb:
                self.merge(ca, cb)

        assignments: dict[int, dict[int, dict[int, int]]] = {}
        for pid, cid in self.person_cluster.items():
            if self.clusters[cid].members:
                assignments[pid] = _as_assignment(self.clusters[cid].members)
        for cid in sorted(self.clusters):
            c = self.clusters[cid]
            if c.person is not None or not c.members:
                continue
            if len(c.views()) < self.cfg.spawn_min_views or not c.match_scores:
                continue
            if np.mean(c.match_scores) < self.cfg.spawn_min_matching:
                continue
            if len(c.joints()) < self.cfg.spawn_min_joints:
                continue
            c.person = next_person_id
            assignments[next_person_id] = _as_assignment(c.members)
            next_person_id += 1

        skeletons = [
            triangulate_assignment(self.g, pid, assignments[pid]) for pid in sorted(assignments)
        ]
        return AssociationResult(assignments, skeletons)


def _as_assignment(members: Mapping[tuple[int, int], int]) -> dict[int, dict[int, int]]:
    out: dict[int, dict[int, int]] = {}
    for (view, joint), idx in sorted(members.items()):
        out.setdefault(view, {})[joint] = idx
    return out


def triangulate_assignment(
    graph: AssociationGraph, person_id: int, assignment: Mapping[int, Mapping[int, int]]
) -> Skeleton3D:
    n = graph.topology.joint_count
    joints = np.full((n, 3), np.nan)
    conf = np.zeros(n)
    obs: dict[int, list] = {}
    for view, per_joint in assignment.items():
        for joint, idx in per_joint.items():
            det = graph.detections[view][idx]
            obs.setdefault(joint, []).append((graph.cameras[view], det.position, det.confidence))
    for joint, o in obs.items():
        if len(o) < 2:
            continue
        try:
            joints[joint] = triangulate(o)
        except DegenerateRays:
            continue
        conf[joint] = float(np.mean([c for _, _, c in o]))
    return Skeleton3D(person_id, joints, conf)


def solve(
    graph: AssociationGraph,
    cfg: AssociationConfig | None = None,
    next_person_id: int | None = None,
) -> AssociationResult:
    """Greedy association in four score-ordered passes.

    Matching edges corroborated by third views go first (most supporting
    views, then highest score), building multi-view joint groups. Tracking
    edges then bind groups to previous persons, uncorroborated matching
    edges follow, and parsing edges link joint groups into bodies last,
    once groups carry 3D evidence; parsing edges of equal score are taken
    in order of how close their triangulated bone is to its rest length.
    An edge is accepted only if the merged group keeps at most
    one detection per (view, joint), every multi-view joint still
    triangulates within ``max_reprojection_px`` and every bone with both
    ends triangulated stays inside ``bone_window`` times its rest length.
    Unbound groups seen in enough views become new persons.
    """
    cfg = cfg or AssociationConfig()
    if next_person_id is None:
        next_person_id = max((s.person_id for s in graph.prev), default=-1) + 1
    return _Solver(graph, cfg).run(next_person_id)


def check_uniqueness(graph: AssociationGraph, result: AssociationResult) -> bool:
    seen: set[DetKey] = set()
    for views in result.assignments.values():
        for view, per_joint in views.items():
            for joint, idx in per_joint.items():
                if (view, idx) in seen or graph.detections[view][idx].joint_id != joint:
                    return False
                seen.add((view, idx))
    return True
