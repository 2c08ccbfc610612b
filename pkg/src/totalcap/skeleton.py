"""Joint naming and bone topology shared by association, fitting and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

BODY_JOINTS = (
    "mid_hip",
    "neck",
    "nose",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
)
J = {name: i for i, name in enumerate(BODY_JOINTS)}

BODY_BONES = (
    (J["mid_hip"], J["neck"]),
    (J["neck"], J["nose"]),
    (J["neck"], J["l_shoulder"]),
    (J["l_shoulder"], J["l_elbow"]),
    (J["l_elbow"], J["l_wrist"]),
    (J["neck"], J["r_shoulder"]),
    (J["r_shoulder"], J["r_elbow"]),
    (J["r_elbow"], J["r_wrist"]),
    (J["mid_hip"], J["l_hip"]),
    (J["l_hip"], J["l_knee"]),
    (J["l_knee"], J["l_ankle"]),
    (J["mid_hip"], J["r_hip"]),
    (J["r_hip"], J["r_knee"]),
    (J["r_knee"], J["r_ankle"]),
)

# Hand landmarks follow the 21-point convention: wrist, then 4 per finger
# from thumb to pinky, base to tip.
HAND_JOINT_COUNT = 21
HAND_WRIST = 0
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

FACE_LANDMARKS = (
    "nose",
    "l_eye",
    "r_eye",
    "l_ear",
    "r_ear",
    "l_brow",
    "r_brow",
    "upper_lip",
    "mouth_l",
    "mouth_r",
    "lower_lip",
    "chin",
)
FACE_ANCHOR = 0

SIDES = ("left", "right")
WRIST = {"left": J["l_wrist"], "right": J["r_wrist"]}
ELBOW = {"left": J["l_elbow"], "right": J["r_elbow"]}


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    rest_lengths: tuple[float, ...]
    root: int = 0

    def __post_init__(self) -> None:
        if len(self.bones) != len(self.rest_lengths):
            raise ValueError("one rest length per bone required")
        if any(length <= 0 for length in self.rest_lengths):
            raise ValueError("rest lengths must be positive")
        children = [c for _, c in self.bones]
        if len(set(children)) != len(children) or self.root in children:
            raise ValueError("bones must form a tree rooted at the root joint")
        if set(children) | {self.root} != set(range(len(self.joint_names))):
            raise ValueError("every non-root joint needs exactly one parent")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @cached_property
    def neighbors(self) -> dict[int, list[tuple[int, int]]]:
        """joint -> [(other joint, bone index)]"""
        out: dict[int, list[tuple[int, int]]] = {j: [] for j in range(self.joint_count)}
        for b, (p, c) in enumerate(self.bones):
            out[p].append((c, b))
            out[c].append((p, b))
        return out


# Rest lengths in meters; must agree with the default body model.
BODY_TOPOLOGY = SkeletonTopology(
    joint_names=BODY_JOINTS,
    bones=BODY_BONES,
    rest_lengths=(0.50, 0.1345, 0.1868, 0.28, 0.25, 0.1868, 0.28, 0.25, 0.1118, 0.42, 0.40, 0.1118, 0.42, 0.40),
)
