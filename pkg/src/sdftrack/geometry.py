"""SE(3) / so(3) math, pinhole camera model, depth processing and robust-loss
primitives shared by every other module.

Conventions (global for the package):
  * The camera looks down +z; image x goes right, y goes down.
  * An object pose ``xi`` maps object coordinates to camera coordinates:
    ``p_cam = R @ p_obj + t``.
  * Twists are 6-vectors ordered (rotation, translation): ``twist[:3]`` is the
    so(3) rotation vector, ``twist[3:]`` the translation tangent.
  * Depth maps store the camera-frame z coordinate in meters; 0 marks missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for geometric precondition violations."""


class BehindCameraError(GeometryError):
    """Raised when projecting a point with non-positive depth."""


class InvalidDepthError(GeometryError):
    """Raised when backprojecting a missing or non-positive depth value."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation vector -> rotation matrix."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor keeps orthonormality to machine precision here
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> rotation vector on the principal branch.

    The angle-pi neighbourhood (within 1e-7 of pi) is handled through the
    dominant eigenvector of R + I, which is deterministic: the axis sign is
    fixed so that the largest-magnitude component is positive.
    """
    R = np.asarray(R, dtype=float)
    trace = float(np.trace(R))
    cos_theta = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    theta = math.acos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if math.pi - theta < 1e-7:
        # R ~ 2*aa^T - I; any column of R + I is parallel to the axis.
        M = R + np.eye(3)
        col = int(np.argmax(np.linalg.norm(M, axis=0)))
        axis = M[:, col]
        axis = axis / np.linalg.norm(axis)
        k = int(np.argmax(np.abs(axis)))
        if axis[k] < 0.0:
            axis = -axis
        return axis * theta
    scale = theta / (2.0 * math.sin(theta))
    return scale * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """V matrix coupling rotation and translation in the SE(3) exponential."""
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    A = (1.0 - math.cos(theta)) / t2
    B = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + A * K + B * (K @ K)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    coeff = (1.0 - cot) / (theta * theta)
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3); maps object coordinates to camera coordinates.

    ``rotation`` is orthonormal with determinant +1 (checked lazily via
    :meth:`is_valid`); arrays are frozen so composed poses can be shared.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack (n, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=float)
        return Pose(M[:3, :3], M[:3, 3])

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            return False
        return (np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(float(np.linalg.det(R)) - 1.0) <= tol)


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map se(3) -> SE(3); twist ordered (rotation, translation)."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ v
    return Pose(R, t)


def se3_log(pose: Pose) -> np.ndarray:
    """Principal-branch inverse of :func:`se3_exp`."""
    w = so3_log(pose.rotation)
    v = _so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, v])


def rotation_geodesic(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices."""
    cos_theta = 0.5 * (float(np.trace(R1.T @ R2)) - 1.0)
    return math.acos(min(1.0, max(-1.0, cos_theta)))


def geodesic_ignore_inplane(p1: Pose, p2: Pose) -> float:
    """Rotation distance between two object poses, quotiented by rotations
    about the camera optical axis (+z).

    Equal to the angle between the camera viewing directions expressed in the
    object frame, R1^T @ z and R2^T @ z; left-composing either pose with any
    rotation about +z leaves the value unchanged.
    """
    z = np.array([0.0, 0.0, 1.0])
    d1 = p1.rotation.T @ z
    d2 = p2.rotation.T @ z
    # atan2 keeps full precision near 0 and pi, unlike acos of the dot product
    return math.atan2(float(np.linalg.norm(np.cross(d1, d2))), float(np.dot(d1, d2)))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")


def project(points: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Camera-frame points (..., 3) -> pixel coordinates (..., 2).

    Raises :class:`BehindCameraError` if any point has z <= 1e-9.
    """
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    if np.any(z <= 1e-9):
        raise BehindCameraError("point at or behind the camera plane")
    u = intr.fx * pts[..., 0] / z + intr.cx
    v = intr.fy * pts[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(pixels: np.ndarray, depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pixel coordinates (..., 2) plus depth (...,) -> camera-frame points.

    Raises :class:`InvalidDepthError` on non-positive depth.
    """
    px = np.asarray(pixels, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0.0):
        raise InvalidDepthError("depth must be positive")
    x = (px[..., 0] - intr.cx) / intr.fx * d
    y = (px[..., 1] - intr.cy) / intr.fy * d
    return np.stack([x, y, d], axis=-1)


def backproject_map(depth: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Backproject a full depth map; holes are flagged, not raised.

    Returns (points (H, W, 3), valid (H, W) bool).
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    valid = depth > 0.0
    u = np.arange(w, dtype=float)[None, :].repeat(h, axis=0)
    v = np.arange(h, dtype=float)[:, None].repeat(w, axis=1)
    x = (u - intr.cx) / intr.fx * depth
    y = (v - intr.cy) / intr.fy * depth
    pts = np.stack([x, y, depth], axis=-1)
    pts[~valid] = 0.0
    return pts, valid


def compute_normals(depth: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit normals from central differences of backprojected points.

    A pixel is valid only if itself and its four axis neighbours carry depth;
    normals are oriented toward the camera (n . view < 0).

    Returns (normals (H, W, 3), valid (H, W) bool).
    """
    pts, valid = backproject_map(depth, intr)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
                      & valid[:-2, 1:-1] & valid[2:, 1:-1])
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du.reshape(-1, 3), dv.reshape(-1, 3)).reshape(h, w, 3)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n[ok] /= norm[ok][:, None]
    # flip so the normal faces the camera
    flip = np.einsum("hwc,hwc->hw", n, pts) > 0.0
    n[flip & ok] *= -1.0
    normals[ok] = n[ok]
    return normals, ok


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    """Huber loss: r^2/2 inside the knee, delta*(|r| - delta/2) beyond."""
    if delta <= 0:
        raise GeometryError("huber delta must be positive")
    a = np.abs(np.asarray(r, dtype=float))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_weight(r: np.ndarray, delta: float) -> np.ndarray:
    """IRLS companion weight: 1 inside the knee, delta/|r| beyond."""
    if delta <= 0:
        raise GeometryError("huber delta must be positive")
    a = np.abs(np.asarray(r, dtype=float))
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


@dataclass
class Frame:
    """One RGBD observation plus derived normal map.

    ``rgb`` is H x W x 3 in [0, 1], ``depth`` H x W meters with 0 = missing,
    ``mask`` H x W bool (object), ``normals`` H x W x 3 unit vectors valid
    where ``normals_valid`` is set.
    """

    id: int
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    normals: np.ndarray = field(repr=False, default=None)
    normals_valid: np.ndarray = field(repr=False, default=None)

    @staticmethod
    def create(frame_id: int, rgb: np.ndarray, depth: np.ndarray, mask: np.ndarray,
               intr: Intrinsics) -> "Frame":
        rgb = np.asarray(rgb, dtype=float)
        depth = np.asarray(depth, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        if rgb.shape[:2] != depth.shape or mask.shape != depth.shape:
            raise GeometryError("rgb, depth and mask must share H x W")
        if (depth.shape[0], depth.shape[1]) != (intr.height, intr.width):
            raise GeometryError("image size does not match intrinsics")
        normals, ok = compute_normals(depth, intr)
        return Frame(frame_id, rgb, depth, mask, intr, normals, ok)

    def valid_object_pixels(self) -> np.ndarray:
        """(n, 2) integer pixel coordinates (u, v) with mask and valid depth."""
        vs, us = np.nonzero(self.mask & (self.depth > 0.0))
        return np.stack([us, vs], axis=1)

    def object_points_cam(self, max_points: int | None = None,
                          with_normals: bool = False):
        """Backprojected masked points in camera coordinates.

        With ``with_normals`` only pixels carrying a valid normal are used and
        (points, normals) is returned. ``max_points`` subsamples with a
        deterministic stride.
        """
        sel = self.mask & (self.depth > 0.0)
        if with_normals:
            sel = sel & self.normals_valid
        vs, us = np.nonzero(sel)
        if max_points is not None and len(vs) > max_points:
            stride = int(math.ceil(len(vs) / max_points))
            vs, us = vs[::stride], us[::stride]
        d = self.depth[vs, us]
        pts = backproject(np.stack([us, vs], axis=1).astype(float), d, self.intrinsics)
        if with_normals:
            return pts, self.normals[vs, us]
        return pts
