"""Rigid poses, pinhole projection and pose error metrics.

Poses follow the world-to-camera convention: a world point ``y`` maps to the
camera frame as ``R @ y + t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_DEPTH = 1e-6
ORTHO_TOL = 1e-9


class PointBehindCamera(ValueError):
    """Raised when a point has camera-frame depth <= MIN_DEPTH."""


class InvalidRotation(ValueError):
    pass


def check_rotation(m, tol: float = ORTHO_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidRotation(f"rotation must be 3x3, got {m.shape}")
    if not np.all(np.abs(m.T @ m - np.eye(3)) <= tol):
        raise InvalidRotation("rotation is not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise InvalidRotation("rotation determinant is not +1")
    return m


def project_to_so3(m) -> np.ndarray:
    """Closest rotation matrix in Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def transform(self, points) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        # (self @ other)(y) = self(other(y))
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def invert_pose(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def project(k: Intrinsics, pose: Pose, y) -> np.ndarray:
    """Project world point(s) ``y`` of shape (3,) or (N, 3) to pixels.

    Raises PointBehindCamera if any depth is <= MIN_DEPTH.
    """
    cam = pose.transform(y)
    z = cam[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise PointBehindCamera(f"camera-frame depth {np.min(z):.3g} <= {MIN_DEPTH}")
    u = k.fx * cam[..., 0] / z + k.cx
    v = k.fy * cam[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def project_unchecked(k: Intrinsics, pose: Pose, y) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection returning (pixels, depths) without raising."""
    cam = pose.transform(y)
    z = cam[..., 2]
    safe = np.where(z > MIN_DEPTH, z, np.nan)
    uv = np.stack([k.fx * cam[..., 0] / safe + k.cx,
                   k.fy * cam[..., 1] / safe + k.cy], axis=-1)
    return uv, z


def reprojection_residual(p, k: Intrinsics, pose: Pose, y):
    """Pixel distance between observation ``p`` and the projection of ``y``."""
    d = np.asarray(p, dtype=np.float64) - project(k, pose, y)
    return np.linalg.norm(d, axis=-1)


def angle_error(r_gt, r_est) -> float:
    """Geodesic angle between two rotations, divided by pi (range [0, 1])."""
    r_gt = np.asarray(r_gt, dtype=np.float64)
    r_est = np.asarray(r_est, dtype=np.float64)
    cos = (np.trace(r_gt.T @ r_est) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)) / np.pi)


def angle_error_deg(r_gt, r_est) -> float:
    return angle_error(r_gt, r_est) * 180.0


def translation_error(t_gt, t_est) -> float:
    return float(np.linalg.norm(np.asarray(t_gt, dtype=np.float64)
                                - np.asarray(t_est, dtype=np.float64)))


def rotation_from_rotvec(rotvec) -> np.ndarray:
    """Rodrigues formula."""
    w = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-12:
        return np.eye(3) + W
    return (np.eye(3) + np.sin(theta) / theta * W
            + (1.0 - np.cos(theta)) / theta**2 * (W @ W))


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (via a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Pose(r, -r @ eye)
