"""Camera model, rigid poses, bearing vectors, and correspondence labeling.

Bearing vectors put 2D pixels and 3D world points into the same 2D
normalized-plane representation: pixels through the inverse intrinsics,
world points through the camera pose followed by perspective division.
All geometry runs in float64; the scalar operations and their vectorized
batch counterparts use identical arithmetic so both paths agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Minimum camera-frame depth for a point to count as visible.
EPS_DEPTH = 1e-6
# Below this norm an edge direction carries no angle information.
DEGENERATE_NORM = 1e-12


class PointBehindCamera(Exception):
    """3D point has depth <= EPS_DEPTH in the camera frame."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera transform p_cam = R @ p_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not 1 within 1e-9")


def _check_color(color):
    c = np.array(color, dtype=np.float64).reshape(3)
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError(f"color components must lie in [0,1], got {c}")
    return c


@dataclass(frozen=True)
class Keypoint2D:
    u: float
    v: float
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "color", _check_color(self.color))


@dataclass(frozen=True)
class ScenePoint3D:
    position: np.ndarray
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "position", np.array(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", _check_color(self.color))


@dataclass(frozen=True)
class BearingVector:
    bx: float
    by: float

    def as_array(self) -> np.ndarray:
        return np.array([self.bx, self.by], dtype=np.float64)


@dataclass
class CorrespondenceSet:
    """(2D index, 3D index, score) triples; meaning of score depends on stage."""

    pairs: list

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def indices_2d(self):
        return [i for i, _, _ in self.pairs]

    def indices_3d(self):
        return [j for _, j, _ in self.pairs]

    def pair_set(self):
        return {(i, j) for i, j, _ in self.pairs}


def bearing_from_pixel(k: CameraIntrinsics, kp: Keypoint2D) -> BearingVector:
    """Remove the intrinsics from a pixel: ((u-cx)/fx, (v-cy)/fy)."""
    return BearingVector((kp.u - k.cx) / k.fx, (kp.v - k.cy) / k.fy)


def bearing_from_world(pose: RigidPose, p: ScenePoint3D) -> BearingVector:
    """Transform a world point into the camera and divide by depth."""
    R, t = pose.rotation, pose.translation
    x, y, z = p.position
    px = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    py = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    pz = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    if pz <= EPS_DEPTH:
        raise PointBehindCamera(f"camera-frame depth {pz:.3e} <= {EPS_DEPTH}")
    return BearingVector(px / pz, py / pz)


def project(k: CameraIntrinsics, pose: RigidPose, p: ScenePoint3D):
    """Pixel coordinates of a world point; raises PointBehindCamera."""
    b = bearing_from_world(pose, p)
    return (k.fx * b.bx + k.cx, k.fy * b.by + k.cy)


def neighbor_cosine(a, b) -> float:
    """Cosine of the angle between two 2-vectors; 0 if either is degenerate."""
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    na = math.sqrt(ax * ax + ay * ay)
    nb = math.sqrt(bx * bx + by * by)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0
    # Clamp the last-ulp overshoot so the result is a true cosine.
    return min(1.0, max(-1.0, (ax * bx + ay * by) / (na * nb)))


def pixel_bearings(k: CameraIntrinsics, keypoints) -> np.ndarray:
    """(N,2) bearings for a list of Keypoint2D; matches bearing_from_pixel bitwise."""
    uv = np.array([[kp.u, kp.v] for kp in keypoints], dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(uv)
    out[:, 0] = (uv[:, 0] - k.cx) / k.fx
    out[:, 1] = (uv[:, 1] - k.cy) / k.fy
    return out


def world_bearings(pose: RigidPose, points, allow_behind=False):
    """(N,2) bearings plus visibility mask for a list of ScenePoint3D.

    With allow_behind=False any point at depth <= EPS_DEPTH raises; with
    allow_behind=True such points get a False mask entry and zero bearing.
    """
    P = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
    R, t = pose.rotation, pose.translation
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    px = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    py = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    pz = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    visible = pz > EPS_DEPTH
    if not allow_behind and not np.all(visible):
        raise PointBehindCamera(f"{int((~visible).sum())} points at depth <= {EPS_DEPTH}")
    out = np.zeros((len(P), 2), dtype=np.float64)
    safe = np.where(visible, pz, 1.0)
    out[:, 0] = np.where(visible, px / safe, 0.0)
    out[:, 1] = np.where(visible, py / safe, 0.0)
    return out, visible


def label_ground_truth(keypoints, points, pose: RigidPose, k: CameraIntrinsics,
                       tol: float = 1e-3) -> CorrespondenceSet:
    """Label (i,j) pairs whose bearing distance is below tol.

    Each keypoint takes its nearest in-tolerance 3D point (smaller index on
    exact ties); points behind the camera are never matched.
    """
    if tol <= 0.0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    if not keypoints or not points:
        return CorrespondenceSet([])
    bk = pixel_bearings(k, keypoints)
    bp, visible = world_bearings(pose, points, allow_behind=True)
    dx = bk[:, 0][:, None] - bp[:, 0][None, :]
    dy = bk[:, 1][:, None] - bp[:, 1][None, :]
    dist = np.sqrt(dx * dx + dy * dy)
    dist[:, ~visible] = np.inf
    pairs = []
    for i in range(len(keypoints)):
        j = int(np.argmin(dist[i]))
        if dist[i, j] < tol:
            pairs.append((i, j, 1.0))
    return CorrespondenceSet(pairs)
