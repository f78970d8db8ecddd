"""Rigid transforms, pinhole projection and rotation distances.

Conventions (fixed, BOP/OpenCV style): the camera looks along +z with x
right and y down, rotations map world/object coordinates into the camera
frame, translations are millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateView, NonPositiveDepth

_ORTHO_TOL = 1e-9
_MIN_DEPTH_MM = 1e-6


def _as_readonly(a, shape, name):
    out = np.array(a, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform: x_cam = rotation @ x + translation."""

    rotation: np.ndarray   # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,), mm

    def __post_init__(self):
        r = _as_readonly(self.rotation, (3, 3), "rotation")
        t = _as_readonly(self.translation, (3,), "translation")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err >= _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal: |R^T R - I|_inf = {err:.3e}")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def invert(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def transform_and_project(points: np.ndarray, pose: Pose,
                          K: CameraIntrinsics) -> np.ndarray:
    """Pinhole-project (N, 3) object points, mm, to (N, 2) pixel positions.

    Raises NonPositiveDepth if any transformed point has z <= 1e-6 mm.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pose.apply(pts)
    z = cam[:, 2]
    if np.any(z <= _MIN_DEPTH_MM):
        raise NonPositiveDepth(
            f"{int(np.sum(z <= _MIN_DEPTH_MM))} point(s) at or behind the camera")
    uv = np.empty((len(cam), 2))
    uv[:, 0] = K.fx * cam[:, 0] / z + K.cx
    uv[:, 1] = K.fy * cam[:, 1] / z + K.cy
    return uv


def look_at_pose(eye, target, up_hint=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at `eye` looking toward `target` (both world mm).

    The camera +z axis points from eye to target. If `up_hint` is within
    ~2.5 degrees of the view axis the world x-axis is substituted (and the
    world y-axis in the doubly-degenerate case), keeping the result
    deterministic for axial viewpoints.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm <= 1e-6:
        raise DegenerateView("eye and target coincide")
    forward /= norm

    up = np.asarray(up_hint, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if abs(forward @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])

    x_cam = np.cross(forward, up)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)

    rotation = np.stack([x_cam, y_cam, forward])
    # Orthonormalize to keep the Pose invariant airtight against rounding.
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return Pose(rotation, -rotation @ eye)


def rotation_angle_between(a: Pose, b: Pose) -> float:
    """Geodesic angle in radians between the two rotations, in [0, pi]."""
    cos = (np.trace(a.rotation.T @ b.rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)
