"""Synthetic multi-view scenes with exact ground truth.

A scene is a set of per-frame model parameters for each person plus a camera
rig. :func:`generate` turns it into what a real front end would produce:
body keypoint detections, hand and face detector outputs, and the truth
needed for scoring. All randomness comes from one Philox stream keyed by the
scene seed, consumed in a fixed order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..association import Detection2D
from ..body_model import BodyParams, ModelTopology, default_topology, forward_kinematics, get_gesture, with_gesture
from ..bootstrap import BETA, PartInstance, RoI
from ..geometry import Camera, look_at
from ..skeleton import BODY_JOINTS, HAND_JOINT_COUNT, J, SIDES

PARTS = ("left_hand", "right_hand", "face")


class SpecInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Occlusion:
    frame: int
    view: int
    person: int
    joints: tuple[str, ...]  # body joint names and/or "left_hand", "right_hand", "face"

    def __post_init__(self) -> None:
        for name in self.joints:
            if name not in J and name not in PARTS:
                raise SpecInvalid(f"unknown joint or part {name!r}")


@dataclass(frozen=True)
class ChiralityFlip:
    """The hand regressor runs on a mirrored crop for this hand and view."""

    frame: int
    view: int
    person: int
    side: str


@dataclass
class RigSpec:
    n_cameras: int = 6
    radius: float = 3.5
    height: float = 1.6
    target: tuple[float, float, float] = (0.0, 1.0, 0.0)
    focal: float = 2000.0
    width: int = 2048
    image_height: int = 2048
    azimuth: float = 0.0  # radians, rotates the whole ring


@dataclass
class SceneSpec:
    n_persons: int = 2
    n_frames: int = 30
    rig: RigSpec = field(default_factory=RigSpec)
    noise: float = 0.0  # px std on every 2D keypoint
    seed: int = 0
    path_radius: float = 0.9
    step: float = 0.05  # radians of path angle per frame
    body_amplitude: float = 0.12
    finger_amplitude: float = 0.3
    shape_std: float = 0.05
    gesture_noise: float = 0.05  # rad std of the regressed gesture
    box_pad: float = 0.1  # tight box margin as a fraction of the hand extent
    box_jitter: float = 0.0  # px std on box center and half-size
    occlusions: list[Occlusion] = field(default_factory=list)
    ambiguity: list[ChiralityFlip] = field(default_factory=list)

    def validate(self) -> None:
        if self.rig.n_cameras < 2:
            raise SpecInvalid("at least 2 cameras are required")
        if self.n_persons < 0 or self.n_frames < 1:
            raise SpecInvalid("need a non-negative person count and at least one frame")
        if self.noise < 0 or self.gesture_noise < 0 or self.box_jitter < 0:
            raise SpecInvalid("noise levels must be non-negative")
        for ev in [*self.occlusions, *self.ambiguity]:
            if not (0 <= ev.frame < self.n_frames and 0 <= ev.view < self.rig.n_cameras):
                raise SpecInvalid(f"event outside the scene: {ev}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["occlusions"] = [dataclasses.asdict(o) for o in self.occlusions]
        d["ambiguity"] = [dataclasses.asdict(a) for a in self.ambiguity]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecInvalid(f"unknown scene keys {sorted(unknown)}")
        rig = RigSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("rig", {}).items()})
        occ = [Occlusion(o["frame"], o["view"], o["person"], tuple(o["joints"])) for o in d.pop("occlusions", [])]
        amb = [ChiralityFlip(**a) for a in d.pop("ambiguity", [])]
        spec = cls(rig=rig, occlusions=occ, ambiguity=amb, **d)
        spec.validate()
        return spec


@dataclass
class SyntheticScene:
    trajectories: list[list[BodyParams]]  # [person][frame]
    cameras: list[Camera]
    spec: SceneSpec
    topology: ModelTopology


@dataclass
class FrameData:
    body: dict[int, list[Detection2D]]
    hands: dict[int, list[PartInstance]]
    faces: dict[int, list[PartInstance]]
    truth: dict[int, np.ndarray]  # person -> (L, 3) landmarks
    params: dict[int, BodyParams]


@dataclass
class SyntheticData:
    cameras: list[Camera]
    frames: list[FrameData]
    spec: SceneSpec


def camera_ring(rig: RigSpec) -> list[Camera]:
    cams = []
    for i in range(rig.n_cameras):
        a = rig.azimuth + 2.0 * np.pi * i / rig.n_cameras
        eye = np.array([rig.radius * np.sin(a), rig.height, rig.radius * np.cos(a)])
        cams.append(
            look_at(eye, rig.target, focal=rig.focal, width=rig.width, height=rig.image_height, id=i)
        )
    return cams


def _finger_flex(topology: ModelTopology, side: str, amount: np.ndarray) -> np.ndarray:
    """Gesture vector curling the 15 finger groups by ``amount`` (15,) radians."""
    sign = 1.0 if side == "left" else -1.0
    g = np.zeros((16, 3))
    g[1:, 2] = -sign * np.asarray(amount)
    return g.reshape(-1)


def walking_trajectories(spec: SceneSpec, topology: ModelTopology, rng: np.random.Generator):
    """People strolling around a shared circle with swinging limbs."""
    out = []
    body = topology.group_sets["body"]
    gname = topology.group_names
    for k in range(spec.n_persons):
        phase0 = 2.0 * np.pi * k / max(spec.n_persons, 1)
        beta = rng.normal(0.0, spec.shape_std, 8)
        limb_phase = rng.uniform(0, 2 * np.pi, len(body))
        finger_phase = rng.uniform(0, 2 * np.pi, (2, 15))
        traj = []
        for t in range(spec.n_frames):
            a = phase0 + spec.step * t
            p = topology.zero_params()
            p.global_translation = np.array(
                [spec.path_radius * np.sin(a), 0.95, spec.path_radius * np.cos(a)]
            )
            p.global_rotation = np.array([0.0, a + np.pi / 2, 0.0])
            p.beta = beta.copy()
            p.epsilon = 0.3 * np.sin(0.2 * t + np.arange(4) + k)
            amp = spec.body_amplitude
            for gi, ph in zip(body, limb_phase):
                s = np.sin(0.3 * t + ph)
                name = gname[gi]
                if name.endswith(("shoulder", "hip")):
                    p.theta[gi] = [amp * s, 0.0, 0.3 * amp * np.cos(0.3 * t + ph)]
                elif name.endswith(("elbow", "knee")):
                    p.theta[gi] = [amp * (0.8 + 0.5 * s), 0.0, 0.0]
                else:
                    p.theta[gi] = 0.4 * amp * np.array([s, np.cos(0.3 * t + ph), 0.5 * s])
            for si, side in enumerate(SIDES):
                flex = spec.finger_amplitude * 0.5 * (1.0 + np.sin(0.25 * t + finger_phase[si]))
                gesture = _finger_flex(topology, side, flex).reshape(16, 3)
                gesture[0] = p.theta[topology.group_sets[f"{side}_gesture"][0]]
                idx = list(topology.group_sets[f"{side}_gesture"])
                p.theta[idx] = gesture
            p.theta[topology.group_sets["jaw"][0]] = [0.1 * (1 + np.sin(0.2 * t + k)), 0.0, 0.0]
            traj.append(p)
        out.append(traj)
    return out


def build_scene(spec: SceneSpec, topology: ModelTopology | None = None) -> SyntheticScene:
    spec.validate()
    topology = topology or default_topology()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    traj = walking_trajectories(spec, topology, rng)
    return SyntheticScene(traj, camera_ring(spec.rig), spec, topology)


def _tight_box(uv: np.ndarray, view: int, pad: float, jitter: np.ndarray) -> RoI:
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    half = 0.5 * max(hi[0] - lo[0], hi[1] - lo[1]) * (1.0 + pad) + jitter[2]
    return RoI(0.5 * (lo + hi) + jitter[:2], max(half, 1.0), max(half, 1.0), view, BETA)


def mirror_about(uv: np.ndarray, box: RoI) -> np.ndarray:
    out = np.array(uv, dtype=float)
    out[:, 0] = 2.0 * box.center[0] - out[:, 0]
    return out


def generate(scene: SyntheticScene | SceneSpec) -> SyntheticData:
    """Per-frame detections and truth for a scene.

    Draw order per frame is fixed (views ascending, persons ascending), so
    the output depends only on the scene and its seed.
    """
    if isinstance(scene, SceneSpec):
        scene = build_scene(scene)
    spec, topo = scene.spec, scene.topology
    if len(scene.cameras) < 2:
        raise SpecInvalid("at least 2 cameras are required")
    rng = np.random.Generator(np.random.Philox(key=spec.seed + 1))
    hidden: dict[tuple[int, int, int], set[str]] = {}
    for o in spec.occlusions:
        hidden.setdefault((o.frame, o.view, o.person), set()).update(o.joints)
    flips = {(a.frame, a.view, a.person, a.side) for a in spec.ambiguity}

    n_frames = min(len(t) for t in scene.trajectories) if scene.trajectories else spec.n_frames
    frames = []
    for t in range(n_frames):
        params = {k: traj[t] for k, traj in enumerate(scene.trajectories)}
        truth = {k: forward_kinematics(topo, p) for k, p in params.items()}
        body: dict[int, list[Detection2D]] = {}
        hands: dict[int, list[PartInstance]] = {}
        faces: dict[int, list[PartInstance]] = {}
        for cam in scene.cameras:
            v = cam.id
            dets: list[Detection2D] = []
            hands[v], faces[v] = [], []
            for k in sorted(truth):
                land = truth[k]
                hid = hidden.get((t, v, k), set())
                depth = cam.to_camera(land)[:, 2]
                uv = cam.project_many(land)
                noisy = uv + rng.normal(0.0, spec.noise, uv.shape) if spec.noise > 0 else uv.copy()
                ok = (depth > 0) & cam.in_image(uv)
                for j, name in enumerate(BODY_JOINTS):
                    if ok[j] and name not in hid:
                        dets.append(Detection2D(noisy[j], 1.0, j, v))
                for side in SIDES:
                    sl = topo.landmark_slice(f"{side}_hand")
                    if f"{side}_hand" in hid or not ok[sl].all():
                        continue
                    hands[v].append(
                        _hand_instance(topo, cam, params[k], side, uv[sl], noisy[sl], spec, rng, (t, v, k, side) in flips)
                    )
                sl = topo.landmark_slice("face")
                if "face" not in hid and ok[sl].all():
                    box = _tight_box(uv[sl], v, spec.box_pad, _jitter(rng, spec))
                    faces[v].append(
                        PartInstance(v, box, noisy[sl], np.ones(len(noisy[sl])), {"face": noisy[sl]}, {"face": params[k].epsilon.copy()})
                    )
            order = rng.permutation(len(dets))
            body[v] = [dets[i] for i in order]
        frames.append(FrameData(body, hands, faces, truth, {k: p.copy() for k, p in params.items()}))
    return SyntheticData(list(scene.cameras), frames, spec)


def _jitter(rng, spec) -> np.ndarray:
    return rng.normal(0.0, spec.box_jitter, 3) if spec.box_jitter > 0 else np.zeros(3)


def _hand_instance(topo, cam, params, side, uv, noisy, spec, rng, flipped) -> PartInstance:
    """Detector output for one visible hand.

    The regressor's keypoints come from the model posed with a perturbed
    gesture, so they agree with the detections only approximately. Running
    it with the wrong chirality yields the mirror image of that output.
    """
    box = _tight_box(uv, cam.id, spec.box_pad, _jitter(rng, spec))
    true_g = get_gesture(topo, params, side)
    g = true_g + (rng.normal(0.0, spec.gesture_noise, true_g.shape) if spec.gesture_noise > 0 else 0.0)
    land = forward_kinematics(topo, with_gesture(topo, params, side, g))
    reg = cam.project_many(land[topo.landmark_slice(f"{side}_hand")])
    other = "right" if side == "left" else "left"
    if flipped:
        reg = mirror_about(reg, box)
    regressed = {side: reg, other: mirror_about(reg, box)}
    gesture = {side: g, other: -g}
    assert len(noisy) == HAND_JOINT_COUNT
    return PartInstance(cam.id, box, noisy, np.ones(HAND_JOINT_COUNT), regressed, gesture)
