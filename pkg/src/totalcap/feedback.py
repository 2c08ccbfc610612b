"""Silhouette feedback for next-frame tracking.

Each fitted person is rendered into every view as a union of tapered
capsules (one per bone), the binary mask is softened with an exact
Euclidean distance transform, and the resulting occupancy is sampled at
detection locations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .body_model import BodyParams, ModelTopology, forward_kinematics
from .config import FeedbackConfig
from .geometry import Camera
from .skeleton import BODY_BONES, FINGERS, J

NEAR = 1e-6  # m, endpoints closer than this to the camera plane are dropped

_TORSO_BONES = {
    (J["mid_hip"], J["neck"]),
    (J["neck"], J["l_shoulder"]),
    (J["neck"], J["r_shoulder"]),
    (J["mid_hip"], J["l_hip"]),
    (J["mid_hip"], J["r_hip"]),
}
_HEAD_BONES = {(J["neck"], J["nose"])}


def hand_bones() -> list[tuple[int, int]]:
    bones = []
    for f in range(len(FINGERS)):
        base = 1 + 4 * f
        bones.append((0, base))
        bones += [(base + k, base + k + 1) for k in range(3)]
    return bones


def capsules(topology: ModelTopology, cfg: FeedbackConfig) -> tuple[np.ndarray, np.ndarray]:
    """Landmark index pairs and radii (m) of the capsule proxy."""
    pairs, radii = [], []
    for a, b in BODY_BONES:
        pairs.append((a, b))
        if (a, b) in _TORSO_BONES:
            radii.append(cfg.radius_torso)
        elif (a, b) in _HEAD_BONES:
            radii.append(cfg.radius_head)
        else:
            radii.append(cfg.radius_limb)
    for side in ("left_hand", "right_hand"):
        off = topology.landmark_slice(side).start
        for a, b in hand_bones():
            pairs.append((off + a, off + b))
            radii.append(cfg.radius_finger)
    return np.asarray(pairs, dtype=int), np.asarray(radii, dtype=float)


def rasterize_capsules(
    width: int, height: int, ends: np.ndarray, radii: np.ndarray
) -> np.ndarray:
    """Binary (height, width) grid of tapered 2D capsules.

    ``ends`` is (K, 2, 2) pixel endpoints and ``radii`` (K, 2) pixel radii at
    each end; a pixel center is inside when its distance to the segment is
    at most the radius interpolated at the closest point.
    """
    grid = np.zeros((height, width), dtype=bool)
    for (p, q), (ra, rb) in zip(np.asarray(ends, dtype=float), np.asarray(radii, dtype=float)):
        rmax = max(ra, rb)
        x0 = max(int(np.floor(min(p[0], q[0]) - rmax)), 0)
        x1 = min(int(np.ceil(max(p[0], q[0]) + rmax)), width - 1)
        y0 = max(int(np.floor(min(p[1], q[1]) - rmax)), 0)
        y1 = min(int(np.ceil(max(p[1], q[1]) + rmax)), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        px = np.arange(x0, x1 + 1, dtype=float)[None, :] - p[0]
        py = np.arange(y0, y1 + 1, dtype=float)[:, None] - p[1]
        dx, dy = q - p
        L2 = dx * dx + dy * dy
        t = np.zeros((len(py), px.shape[1])) if L2 == 0 else np.clip((px * dx + py * dy) / L2, 0.0, 1.0)
        ex = px - t * dx
        ey = py - t * dy
        r = ra + t * (rb - ra)
        grid[y0 : y1 + 1, x0 : x1 + 1] |= ex * ex + ey * ey <= r * r
    return grid


def render_mask(
    topology: ModelTopology,
    params: BodyParams,
    camera: Camera,
    cfg: FeedbackConfig | None = None,
) -> np.ndarray:
    """Binary silhouette of the capsule proxy in ``camera``'s image."""
    cfg = cfg or FeedbackConfig()
    land = forward_kinematics(topology, params)
    pairs, radii = capsules(topology, cfg)
    pc = camera.to_camera(land)
    ends, rpx = [], []
    for (a, b), r in zip(pairs, radii):
        za, zb = pc[a, 2], pc[b, 2]
        if za <= NEAR or zb <= NEAR:
            continue
        ends.append([camera.focal * pc[a, :2] / za, camera.focal * pc[b, :2] / zb])
        rpx.append([camera.focal * r / za, camera.focal * r / zb])
    if not ends:
        return np.zeros((camera.height, camera.width), dtype=bool)
    ends = np.asarray(ends) + camera.principal_point
    return rasterize_capsules(camera.width, camera.height, ends, np.asarray(rpx))


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Occupancy field around a binary mask.

    Only a window holding the mask plus ``falloff`` is stored; everything
    outside it is 0. The softened window is computed on first use, while
    single-pixel lookups search the pixel's own neighborhood, which gives
    the same exact distance without transforming the whole window.
    """

    view_id: int
    person_id: int
    falloff: float
    width: int
    height: int
    origin: tuple[int, int]  # (x, y) of binary[0, 0]
    binary: np.ndarray  # cropped mask

    @cached_property
    def window(self) -> np.ndarray:
        if self.binary.size == 0:
            return np.zeros((0, 0))
        dist = distance_transform_edt(~self.binary)
        out = np.maximum(0.0, 1.0 - dist / self.falloff)
        out[self.binary] = 1.0
        return out

    @property
    def grid(self) -> np.ndarray:
        out = np.zeros((self.height, self.width))
        x, y = self.origin
        h, w = self.window.shape
        out[y : y + h, x : x + w] = self.window
        return out

    def value(self, x: int, y: int) -> float:
        wx, wy = x - self.origin[0], y - self.origin[1]
        h, w = self.binary.shape
        if not (0 <= wx < w and 0 <= wy < h):
            return 0.0
        if "window" in self.__dict__:
            return float(self.window[wy, wx])
        if self.binary[wy, wx]:
            return 1.0
        r = int(np.ceil(self.falloff))
        ys, xs = np.nonzero(self.binary[max(wy - r, 0) : wy + r + 1, max(wx - r, 0) : wx + r + 1])
        if len(xs) == 0:
            return 0.0
        d2 = (xs + max(wx - r, 0) - wx) ** 2 + (ys + max(wy - r, 0) - wy) ** 2
        return float(max(0.0, 1.0 - np.sqrt(float(d2.min())) / self.falloff))


def soften(binary: np.ndarray, falloff: float, view_id: int = 0, person_id: int = 0) -> SoftMask:
    """Inside 1, outside ``max(0, 1 - d / falloff)`` with d the exact EDT."""
    if falloff <= 0:
        raise ValueError("falloff must be positive")
    binary = np.asarray(binary, dtype=bool)
    height, width = binary.shape
    ys, xs = np.nonzero(binary)
    if len(xs) == 0:
        return SoftMask(view_id, person_id, falloff, width, height, (0, 0), np.zeros((0, 0), dtype=bool))
    m = int(np.ceil(falloff)) + 1
    x0, x1 = max(xs.min() - m, 0), min(xs.max() + m, width - 1)
    y0, y1 = max(ys.min() - m, 0), min(ys.max() + m, height - 1)
    crop = binary[y0 : y1 + 1, x0 : x1 + 1].copy()
    return SoftMask(view_id, person_id, falloff, width, height, (int(x0), int(y0)), crop)


def occupancy(mask: SoftMask, point) -> float:
    """Bilinear sample at a pixel position; 0 outside the image."""
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= mask.width - 1 and 0.0 <= y <= mask.height - 1):
        return 0.0
    xi, yi = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - xi, y - yi
    xj, yj = min(xi + 1, mask.width - 1), min(yi + 1, mask.height - 1)
    v = (
        (1 - fx) * (1 - fy) * mask.value(xi, yi)
        + fx * (1 - fy) * mask.value(xj, yi)
        + (1 - fx) * fy * mask.value(xi, yj)
        + fx * fy * mask.value(xj, yj)
    )
    return float(min(1.0, max(0.0, v)))


def person_masks(
    topology: ModelTopology,
    params: Mapping[int, BodyParams],
    cameras: Mapping[int, Camera],
    cfg: FeedbackConfig | None = None,
) -> dict[tuple[int, int], SoftMask]:
    """Soft masks keyed by (view, person)."""
    cfg = cfg or FeedbackConfig()
    out = {}
    for pid in sorted(params):
        for view in sorted(cameras):
            binary = render_mask(topology, params[pid], cameras[view], cfg)
            out[(view, pid)] = soften(binary, cfg.falloff, view, pid)
    return out


def detection_occupancy(
    masks: Mapping[tuple[int, int], SoftMask],
    detections: Mapping[int, Sequence],
    persons: Sequence[int],
) -> dict[tuple[int, int, int], float]:
    """tau for every (view, detection, person).

    Views where any of ``persons`` lacks a mask are skipped entirely, which
    leaves their tracking scores untouched.
    """
    out = {}
    for view, dets in detections.items():
        if not persons or any((view, p) not in masks for p in persons):
            continue
        for i, det in enumerate(dets):
            for p in persons:
                out[(view, i, p)] = occupancy(masks[(view, p)], det.position)
    return out


def write_pgm(path: str | Path, binary: np.ndarray) -> None:
    h, w = binary.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write((np.asarray(binary, dtype=np.uint8) * 255).tobytes())


def write_pfm(path: str | Path, grid: np.ndarray) -> None:
    """Single-channel little-endian PFM, bottom row first."""
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(grid[::-1], dtype="<f4").tobytes())
