"""Landmark-only parametric body model with hands and a jaw.

The model is a kinematic tree of nodes. Every node carries a rest offset
from its parent (expressed in the parent's frame), a linear shape basis and
an optional expression basis. A subset of nodes owns an axis-angle rotation
that is applied to everything below it. Landmarks are an ordered selection
of node positions: 15 body joints, 21 per hand, 12 face points.

Parameter vector layout (see :class:`BodyParams`)::

    [global_rotation(3), global_translation(3), theta(G*3), beta(8), epsilon(4)]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .skeleton import BODY_JOINTS, FACE_LANDMARKS, FINGERS, HAND_JOINT_COUNT

N_SHAPE = 8
N_EXPR = 4
GESTURE_DIM = 3 * 16  # wrist rotation + 15 finger groups


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrices for axis-angle vectors of shape (..., 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    s = np.where(small, 1.0, np.sin(safe) / safe)
    c = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + s * K + c * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_axes(w: np.ndarray) -> np.ndarray:
    """Columns v_i with (dR/dw_i) R^T = skew(v_i), for w of shape (..., 3).

    Returned shape is (..., 3, 3) with v_i in column i.
    """
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)[..., None, None]
    small = theta2 < 1e-12
    R = rodrigues(w)
    K = skew(w)
    outer = w[..., :, None] * w[..., None, :]
    exact = (outer + K @ (np.eye(3) - R)) / np.where(small, 1.0, theta2)
    series = np.eye(3) + 0.5 * K
    return np.where(small, series, exact)


@dataclass
class BodyParams:
    global_rotation: np.ndarray
    global_translation: np.ndarray
    theta: np.ndarray  # (G, 3)
    beta: np.ndarray
    epsilon: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.global_rotation,
                self.global_translation,
                self.theta.reshape(-1),
                self.beta,
                self.epsilon,
            ]
        ).astype(float)

    @classmethod
    def from_vector(cls, x: np.ndarray, n_groups: int) -> "BodyParams":
        x = np.asarray(x, dtype=float)
        k = 6 + 3 * n_groups
        return cls(
            global_rotation=x[0:3].copy(),
            global_translation=x[3:6].copy(),
            theta=x[6:k].reshape(n_groups, 3).copy(),
            beta=x[k : k + N_SHAPE].copy(),
            epsilon=x[k + N_SHAPE : k + N_SHAPE + N_EXPR].copy(),
        )

    def copy(self) -> "BodyParams":
        return BodyParams.from_vector(self.to_vector(), len(self.theta))

    def to_dict(self) -> dict:
        return {
            "global_rotation": self.global_rotation.tolist(),
            "global_translation": self.global_translation.tolist(),
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "epsilon": self.epsilon.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(
            global_rotation=np.asarray(d["global_rotation"], dtype=float),
            global_translation=np.asarray(d["global_translation"], dtype=float),
            theta=np.asarray(d["theta"], dtype=float).reshape(-1, 3),
            beta=np.asarray(d["beta"], dtype=float),
            epsilon=np.asarray(d["epsilon"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class ModelTopology:
    names: tuple[str, ...]
    parents: tuple[int, ...]
    offsets: np.ndarray  # (N, 3)
    shape_basis: np.ndarray  # (N, 3, N_SHAPE)
    expression_basis: np.ndarray  # (N, 3, N_EXPR)
    rot_node: tuple[int, ...]  # node index per rotation group
    group_names: tuple[str, ...]
    landmarks: dict[str, tuple[int, ...]] = field(default_factory=dict)
    group_sets: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for i, p in enumerate(self.parents):
            if i == 0:
                if p != -1:
                    raise ValueError("node 0 must be the root")
            elif not 0 <= p < i:
                raise ValueError("nodes must be topologically ordered")
        lengths = np.linalg.norm(self.offsets[1:], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("rest bone lengths must be positive")

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    @property
    def n_groups(self) -> int:
        return len(self.rot_node)

    @property
    def n_params(self) -> int:
        return 6 + 3 * self.n_groups + N_SHAPE + N_EXPR

    @cached_property
    def node_group(self) -> np.ndarray:
        g = -np.ones(self.n_nodes, dtype=int)
        for gi, n in enumerate(self.rot_node):
            g[n] = gi
        return g

    @cached_property
    def subtree(self) -> np.ndarray:
        """subtree[a, d] is True when d is a or a descendant of a."""
        m = np.eye(self.n_nodes, dtype=bool)
        for n in range(self.n_nodes - 1, 0, -1):
            m[self.parents[n]] |= m[n]
        return m

    @cached_property
    def landmark_index(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.landmarks[k], dtype=int) for k in LANDMARK_ORDER]
        )

    def landmark_slice(self, name: str) -> slice:
        start = 0
        for k in LANDMARK_ORDER:
            n = len(self.landmarks[k])
            if k == name:
                return slice(start, start + n)
            start += n
        raise KeyError(name)

    def param_slice(self, name: str) -> np.ndarray:
        """Indices into the parameter vector for a named block."""
        k = 6 + 3 * self.n_groups
        if name == "global":
            return np.arange(6)
        if name == "beta":
            return np.arange(k, k + N_SHAPE)
        if name == "epsilon":
            return np.arange(k + N_SHAPE, k + N_SHAPE + N_EXPR)
        groups = self.group_sets[name]
        return np.concatenate([6 + 3 * g + np.arange(3) for g in groups]).astype(int)

    def zero_params(self) -> BodyParams:
        return BodyParams(
            np.zeros(3), np.zeros(3), np.zeros((self.n_groups, 3)), np.zeros(N_SHAPE), np.zeros(N_EXPR)
        )

    def rest_bone_length(self, a: str, b: str) -> float:
        land = forward_kinematics(self, self.zero_params())
        ia = BODY_JOINTS.index(a)
        ib = BODY_JOINTS.index(b)
        return float(np.linalg.norm(land[ia] - land[ib]))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "expression_basis": self.expression_basis.tolist(),
            "rot_node": list(self.rot_node),
            "group_names": list(self.group_names),
            "landmarks": {k: list(v) for k, v in self.landmarks.items()},
            "group_sets": {k: list(v) for k, v in self.group_sets.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelTopology":
        return cls(
            names=tuple(d["names"]),
            parents=tuple(int(p) for p in d["parents"]),
            offsets=np.asarray(d["offsets"], dtype=float),
            shape_basis=np.asarray(d["shape_basis"], dtype=float),
            expression_basis=np.asarray(d["expression_basis"], dtype=float),
            rot_node=tuple(int(n) for n in d["rot_node"]),
            group_names=tuple(d["group_names"]),
            landmarks={k: tuple(v) for k, v in d["landmarks"].items()},
            group_sets={k: tuple(v) for k, v in d["group_sets"].items()},
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "ModelTopology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


LANDMARK_ORDER = ("body", "left_hand", "right_hand", "face")

# Finger offsets for a left hand pointing along +x, palm facing -y and the
# thumb toward +z. Each entry is (base offset from wrist, three phalanx offsets).
_FINGER_GEOMETRY = {
    "thumb": ((0.025, -0.01, 0.025), ((0.03, 0.0, 0.02), (0.028, 0.0, 0.01), (0.024, 0.0, 0.005))),
    "index": ((0.09, 0.0, 0.028), ((0.04, 0.0, 0.002), (0.025, 0.0, 0.0), (0.02, 0.0, 0.0))),
    "middle": ((0.095, 0.0, 0.008), ((0.045, 0.0, 0.0), (0.028, 0.0, 0.0), (0.022, 0.0, 0.0))),
    "ring": ((0.09, 0.0, -0.012), ((0.04, 0.0, -0.002), (0.026, 0.0, 0.0), (0.02, 0.0, 0.0))),
    "pinky": ((0.08, 0.0, -0.03), ((0.032, 0.0, -0.004), (0.02, 0.0, 0.0), (0.018, 0.0, 0.0))),
}

ARM_DROP = np.deg2rad(50.0)


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def default_topology() -> ModelTopology:
    """The in-repo model: y up, z forward, x toward the person's left.

    Rest pose has the arms lowered 50 degrees from horizontal (an A-pose) so
    that everyday poses sit close to zero articulation.
    """
    names: list[str] = []
    parents: list[int] = []
    offsets: list[np.ndarray] = []
    shape_modes: list[set[int]] = []
    expr: dict[int, np.ndarray] = {}
    rot_node: list[int] = []
    group_names: list[str] = []

    def add(name, parent, offset, modes=(), rotates=False):
        names.append(name)
        parents.append(-1 if parent is None else names.index(parent))
        offsets.append(np.asarray(offset, dtype=float))
        shape_modes.append(set(modes) | {0})
        if rotates:
            rot_node.append(len(names) - 1)
            group_names.append(name)
        return len(names) - 1

    arm_l = _rot_z(-ARM_DROP) @ np.array([1.0, 0.0, 0.0])
    arm_r = arm_l * np.array([-1.0, 1.0, 1.0])

    add("mid_hip", None, (0.0, 0.0, 0.0))
    add("spine", "mid_hip", (0.0, 0.25, 0.0), modes=(1,), rotates=True)
    add("neck", "spine", (0.0, 0.25, 0.0), modes=(1,), rotates=True)
    add("nose", "neck", (0.0, 0.10, 0.09), modes=(6,))
    add("l_shoulder", "spine", (0.18, 0.20, 0.0), modes=(4,), rotates=True)
    add("l_elbow", "l_shoulder", 0.28 * arm_l, modes=(2,), rotates=True)
    add("l_wrist", "l_elbow", 0.25 * arm_l, modes=(2,), rotates=True)
    add("r_shoulder", "spine", (-0.18, 0.20, 0.0), modes=(4,), rotates=True)
    add("r_elbow", "r_shoulder", 0.28 * arm_r, modes=(2,), rotates=True)
    add("r_wrist", "r_elbow", 0.25 * arm_r, modes=(2,), rotates=True)
    add("l_hip", "mid_hip", (0.10, -0.05, 0.0), modes=(5,), rotates=True)
    add("l_knee", "l_hip", (0.0, -0.42, 0.0), modes=(3,), rotates=True)
    add("l_ankle", "l_knee", (0.0, -0.40, 0.0), modes=(3,))
    add("r_hip", "mid_hip", (-0.10, -0.05, 0.0), modes=(5,), rotates=True)
    add("r_knee", "r_hip", (0.0, -0.42, 0.0), modes=(3,), rotates=True)
    add("r_ankle", "r_knee", (0.0, -0.40, 0.0), modes=(3,))
    body_groups = list(range(len(rot_node)))

    add("jaw", "neck", (0.0, 0.06, 0.03), modes=(6,), rotates=True)
    jaw_group = [len(rot_node) - 1]
    face_offsets = {
        "l_eye": ("neck", (0.032, 0.14, 0.085)),
        "r_eye": ("neck", (-0.032, 0.14, 0.085)),
        "l_ear": ("neck", (0.075, 0.11, 0.0)),
        "r_ear": ("neck", (-0.075, 0.11, 0.0)),
        "l_brow": ("neck", (0.035, 0.165, 0.09)),
        "r_brow": ("neck", (-0.035, 0.165, 0.09)),
        "upper_lip": ("neck", (0.0, 0.065, 0.10)),
        "mouth_l": ("neck", (0.025, 0.06, 0.09)),
        "mouth_r": ("neck", (-0.025, 0.06, 0.09)),
        "lower_lip": ("jaw", (0.0, -0.015, 0.07)),
        "chin": ("jaw", (0.0, -0.05, 0.06)),
    }
    for name, (parent, off) in face_offsets.items():
        add(name, parent, off, modes=(6,))

    # expression modes: smile, brow raise, pucker, squint
    expr[names.index("mouth_l")] = np.array(
        [[0.010, -0.008, 0.0, 0.0], [0.006, 0.0, 0.0, 0.002], [-0.003, 0.004, 0.0, 0.0]]
    )
    expr[names.index("mouth_r")] = np.array(
        [[-0.010, 0.008, 0.0, 0.0], [0.006, 0.0, 0.0, 0.002], [-0.003, 0.004, 0.0, 0.0]]
    )
    for brow in ("l_brow", "r_brow"):
        expr[names.index(brow)] = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.010, -0.004], [0.0, 0.0, 0.0, 0.0]])
    for lip in ("upper_lip", "lower_lip"):
        expr[names.index(lip)] = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.010, 0.0, 0.0]])
    for eye in ("l_eye", "r_eye"):
        expr[names.index(eye)] = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, -0.004], [0.0, 0.0, 0.0, 0.0]])

    hand_nodes: dict[str, list[int]] = {}
    hand_groups: dict[str, list[int]] = {}
    for side, wrist, mirror in (("left", "l_wrist", 1.0), ("right", "r_wrist", -1.0)):
        R = np.diag([mirror, 1.0, 1.0]) @ _rot_z(-ARM_DROP)
        prefix = side[0]
        nodes = [names.index(wrist)]
        groups = []
        for finger in FINGERS:
            base, phalanges = _FINGER_GEOMETRY[finger]
            parent = wrist
            chain = [base, *phalanges]
            for k, off in enumerate(chain):
                name = f"{prefix}_{finger}{k + 1}"
                rotates = k < 3
                add(name, parent, R @ np.asarray(off), modes=(7,), rotates=rotates)
                nodes.append(len(names) - 1)
                if rotates:
                    groups.append(len(rot_node) - 1)
                parent = name
        hand_nodes[side] = nodes
        hand_groups[side] = groups

    n = len(names)
    offs = np.array(offsets)
    S = np.zeros((n, 3, N_SHAPE))
    for i, modes in enumerate(shape_modes):
        for m in modes:
            if m == 4:
                S[i, 0, m] = 0.1 * offs[i, 0]
            else:
                S[i, :, m] = 0.1 * offs[i]
    E = np.zeros((n, 3, N_EXPR))
    for i, basis in expr.items():
        E[i] = basis

    body = tuple(names.index(j) for j in BODY_JOINTS)
    face = tuple(names.index(f) for f in FACE_LANDMARKS)
    wrist_group = {"left": rot_node.index(names.index("l_wrist")), "right": rot_node.index(names.index("r_wrist"))}
    group_sets = {
        "body": tuple(body_groups),
        "jaw": tuple(jaw_group),
        "left_hand": tuple(hand_groups["left"]),
        "right_hand": tuple(hand_groups["right"]),
        "hands": tuple(hand_groups["left"] + hand_groups["right"]),
        "left_gesture": (wrist_group["left"], *hand_groups["left"]),
        "right_gesture": (wrist_group["right"], *hand_groups["right"]),
    }
    assert len(hand_nodes["left"]) == HAND_JOINT_COUNT
    return ModelTopology(
        names=tuple(names),
        parents=tuple(parents),
        offsets=offs,
        shape_basis=S,
        expression_basis=E,
        rot_node=tuple(rot_node),
        group_names=tuple(group_names),
        landmarks={
            "body": body,
            "left_hand": tuple(hand_nodes["left"]),
            "right_hand": tuple(hand_nodes["right"]),
            "face": face,
        },
        group_sets=group_sets,
    )


@dataclass(frozen=True)
class _Pose:
    positions: np.ndarray  # (N, 3) node positions
    rotations: np.ndarray  # (N, 3, 3) world rotation of each node's frame
    parent_rot: np.ndarray  # (N, 3, 3) world rotation in which the offset is expressed
    local_rot: np.ndarray  # (G, 3, 3)


def _pose(topology: ModelTopology, x: np.ndarray) -> _Pose:
    p = BodyParams.from_vector(x, topology.n_groups)
    local = rodrigues(p.theta)
    eff = (
        topology.offsets
        + topology.shape_basis @ p.beta
        + topology.expression_basis @ p.epsilon
    )
    n = topology.n_nodes
    pos = np.empty((n, 3))
    rot = np.empty((n, 3, 3))
    prot = np.empty((n, 3, 3))
    Rg = rodrigues(p.global_rotation)
    group = topology.node_group
    prot[0] = Rg
    pos[0] = p.global_translation + Rg @ eff[0]
    rot[0] = Rg
    for i in range(1, n):
        par = topology.parents[i]
        prot[i] = rot[par]
        pos[i] = pos[par] + rot[par] @ eff[i]
        g = group[i]
        rot[i] = rot[par] @ local[g] if g >= 0 else rot[par]
    return _Pose(pos, rot, prot, local)


def forward_kinematics(topology: ModelTopology, params: BodyParams | np.ndarray) -> np.ndarray:
    """All landmark positions, ordered body, left hand, right hand, face."""
    x = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=float)
    return _pose(topology, x).positions[topology.landmark_index]


def node_positions(topology: ModelTopology, params: BodyParams | np.ndarray) -> np.ndarray:
    x = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=float)
    return _pose(topology, x).positions


def jacobian(
    topology: ModelTopology,
    params: BodyParams | np.ndarray,
    landmarks: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Landmark positions and d(landmarks)/d(params).

    Returns ``(positions (L, 3), jac (L, 3, n_params))`` for the requested
    landmark subset (indices into the full landmark list).
    """
    x = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=float)
    pose = _pose(topology, x)
    lm = topology.landmark_index if landmarks is None else topology.landmark_index[np.asarray(landmarks)]
    pos = pose.positions[lm]
    sub = topology.subtree[:, lm]  # (N, L)
    L = len(lm)
    J = np.zeros((L, 3, topology.n_params))

    J[:, :, 3:6] = np.eye(3)
    # global rotation pivots about the root translation
    Vg = rotation_axes(x[0:3])
    d = pos - x[3:6]
    J[:, :, 0:3] = np.cross(Vg.T[None, :, :], d[:, None, :]).transpose(0, 2, 1)

    G = topology.n_groups
    theta = x[6 : 6 + 3 * G].reshape(G, 3)
    V = rotation_axes(theta)  # (G, 3, 3)
    nodes = np.asarray(topology.rot_node)
    U = pose.parent_rot[nodes] @ V  # world axes in columns
    # a node's own rotation does not move the node itself
    mask = sub[nodes].copy()
    own = lm[None, :] == nodes[:, None]
    mask &= ~own
    D = pos[None, :, :] - pose.positions[nodes][:, None, :]  # (G, L, 3)
    # cross(u_i, D) for each axis i -> (G, L, 3, 3[i])
    C = np.cross(U.transpose(0, 2, 1)[:, None, :, :], D[:, :, None, :])
    C = C * mask[:, :, None, None]
    J[:, :, 6 : 6 + 3 * G] = C.transpose(1, 3, 0, 2).reshape(L, 3, 3 * G)

    k = 6 + 3 * G
    Bw = pose.parent_rot @ topology.shape_basis  # (N, 3, 8)
    J[:, :, k : k + N_SHAPE] = np.einsum("nl,nkm->lkm", sub, Bw)
    Ew = pose.parent_rot @ topology.expression_basis
    J[:, :, k + N_SHAPE :] = np.einsum("nl,nkm->lkm", sub, Ew)
    return pos, J


def get_gesture(topology: ModelTopology, params: BodyParams, side: str) -> np.ndarray:
    return params.theta[list(topology.group_sets[f"{side}_gesture"])].reshape(-1).copy()


def with_gesture(
    topology: ModelTopology, params: BodyParams, side: str, gesture: np.ndarray
) -> BodyParams:
    out = params.copy()
    out.theta[list(topology.group_sets[f"{side}_gesture"])] = np.asarray(gesture, dtype=float).reshape(-1, 3)
    return out
