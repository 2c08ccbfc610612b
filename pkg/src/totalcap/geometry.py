"""Pinhole cameras, projection, epipolar distance and weighted DLT triangulation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEGENERATE_CONDITION = 1e12


class GeometryError(ValueError):
    pass


class DepthNonPositive(GeometryError):
    pass


class InsufficientViews(GeometryError):
    pass


class DegenerateRays(GeometryError):
    pass


class IdenticalCameras(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    """Calibrated pinhole view. ``rotation``/``translation`` map world to camera."""

    focal: float
    principal_point: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    id: int = 0
    distortion: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        pp = np.asarray(self.principal_point, dtype=float).reshape(2)
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not self.focal > 0:
            raise GeometryError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise GeometryError("rotation is not orthonormal")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [
                [self.focal, 0.0, self.principal_point[0]],
                [0.0, self.focal, self.principal_point[1]],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix."""
        return self.K @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def project_many(self, points: np.ndarray) -> np.ndarray:
        """Project (..., 3) world points without depth checks; returns (..., 2)."""
        pc = self.to_camera(points)
        return self.focal * pc[..., :2] / pc[..., 2:3] + self.principal_point

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0)
            & (uv[..., 0] <= self.width - 1)
            & (uv[..., 1] >= 0)
            & (uv[..., 1] <= self.height - 1)
        )

    def to_dict(self) -> dict:
        d = {
            "id": int(self.id),
            "f": float(self.focal),
            "cx": float(self.principal_point[0]),
            "cy": float(self.principal_point[1]),
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
            "width": int(self.width),
            "height": int(self.height),
        }
        if self.distortion is not None:
            d["dist"] = list(self.distortion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            focal=float(d["f"]),
            principal_point=np.array([d["cx"], d["cy"]], dtype=float),
            rotation=np.asarray(d["R"], dtype=float).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=float),
            width=int(d["width"]),
            height=int(d["height"]),
            id=int(d.get("id", 0)),
            distortion=tuple(d["dist"]) if d.get("dist") is not None else None,
        )


def look_at(
    eye: Sequence[float],
    target: Sequence[float],
    up: Sequence[float] = (0.0, 1.0, 0.0),
    *,
    focal: float = 1000.0,
    width: int = 1000,
    height: int = 1000,
    id: int = 0,
) -> Camera:
    """Camera at ``eye`` with its optical axis through ``target``.

    Image y grows downward, so the world ``up`` maps to negative image y.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, -np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        raise GeometryError("up vector parallel to viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Camera(
        focal=focal,
        principal_point=np.array([(width - 1) / 2.0, (height - 1) / 2.0]),
        rotation=R,
        translation=-R @ eye,
        width=width,
        height=height,
        id=id,
    )


def depth(camera: Camera, p: np.ndarray) -> float:
    """Camera-frame z of ``p``."""
    p = np.asarray(p, dtype=float).reshape(3)
    return float(camera.rotation[2] @ p + camera.translation[2])


def project(camera: Camera, p: np.ndarray) -> np.ndarray:
    pc = camera.to_camera(np.asarray(p, dtype=float).reshape(3))
    if pc[2] <= 0:
        raise DepthNonPositive(f"point has camera-frame depth {pc[2]:.6g}")
    return camera.focal * pc[:2] / pc[2] + camera.principal_point


def triangulate(
    observations: Iterable[tuple[Camera, np.ndarray, float]],
) -> np.ndarray:
    """Confidence-weighted linear triangulation.

    Each observation contributes the two DLT rows in normalized image
    coordinates, scaled by its confidence. The inhomogeneous 3x3 normal
    system is solved directly so that parallel rays show up as an
    ill-conditioned matrix instead of a silently wrong point.
    """
    rows = []
    rhs = []
    n = 0
    for cam, uv, conf in observations:
        n += 1
        xn = (np.asarray(uv, dtype=float) - cam.principal_point) / cam.focal
        R, t = cam.rotation, cam.translation
        for k in range(2):
            a = xn[k] * R[2] - R[k]
            b = t[k] - xn[k] * t[2]
            rows.append(conf * a)
            rhs.append(conf * b)
    if n < 2:
        raise InsufficientViews(f"need at least 2 observations, got {n}")
    A = np.asarray(rows)
    b = np.asarray(rhs)
    N = A.T @ A
    if np.linalg.cond(N) > DEGENERATE_CONDITION:
        raise DegenerateRays("normal system is singular (parallel rays or zero weights)")
    return np.linalg.solve(N, A.T @ b)


def reprojection_errors(
    observations: Sequence[tuple[Camera, np.ndarray, float]], p: np.ndarray
) -> np.ndarray:
    out = []
    for cam, uv, _ in observations:
        pc = cam.to_camera(p)
        if pc[2] <= 0:
            out.append(np.inf)
            continue
        out.append(float(np.linalg.norm(cam.project_many(p) - np.asarray(uv))))
    return np.asarray(out)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_matrix(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    """F such that x_b^T F x_a = 0 for pixel coordinates."""
    R = cam_b.rotation @ cam_a.rotation.T
    t = cam_b.translation - R @ cam_a.translation
    if np.linalg.norm(cam_a.center - cam_b.center) < 1e-12:
        raise IdenticalCameras("cameras share a center; epipolar geometry undefined")
    E = _skew(t) @ R
    return np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)


def _line_distance(cam_src: Camera, p_src, cam_dst: Camera, p_dst) -> float:
    F = fundamental_matrix(cam_src, cam_dst)
    line = F @ np.array([p_src[0], p_src[1], 1.0])
    return abs(line[0] * p_dst[0] + line[1] * p_dst[1] + line[2]) / np.hypot(line[0], line[1])


def epipolar_distance(cam_a: Camera, p_a, cam_b: Camera, p_b) -> float:
    """Mean of the two point-to-epipolar-line distances, in pixels."""
    return 0.5 * (
        _line_distance(cam_a, p_a, cam_b, p_b) + _line_distance(cam_b, p_b, cam_a, p_a)
    )


def load_calibration(path: str | Path) -> list[Camera]:
    with open(path) as fh:
        data = json.load(fh)
    return [Camera.from_dict(d) for d in data]


def save_calibration(cameras: Sequence[Camera], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=1)
