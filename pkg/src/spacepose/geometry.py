"""Poses, quaternions, camera intrinsics and the pinhole projection.

Conventions used throughout the package:

* Quaternions are scalar-first, ``(w, x, y, z)``.
* ``quat_to_rotmat(q)`` maps object-frame coordinates into the camera frame,
  ``X_cam = R @ X_obj + t``.
* Pixel coordinates are continuous with the origin at the top-left corner of
  the image; pixel ``k`` (0-based) covers ``[k, k + 1)`` so its center sits at
  ``k + 0.5``. Under this convention rescaling an image rescales ``(u, v)`` by
  exactly the same factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

QUAT_EPS = 1e-12
UNIT_TOL = 1e-6


class GeometryError(ValueError):
    """Raised when a geometric precondition does not hold."""


class PixelCoord(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera after resampling the image by ``(sx, sy)``."""
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Pose:
    """Translation in meters (camera frame) plus a unit quaternion."""

    t: np.ndarray
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        if abs(float(q @ q) - 1.0) > UNIT_TOL:
            raise GeometryError(f"pose quaternion is not unit norm: {q}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.t, other.t) and np.array_equal(self.q, other.q)

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "q": self.q.tolist(), "quat_order": "wxyz"}


def project_center(t, K: CameraIntrinsics, sample: str | None = None) -> PixelCoord:
    """Pinhole projection of the object origin ``t`` into the image plane.

    No clamping: targets near the image edge may project outside the frame.
    """
    x, y, z = (float(c) for c in np.asarray(t, dtype=np.float64).reshape(3))
    if not z > 0:
        where = f" (sample {sample})" if sample else ""
        raise GeometryError(f"translation z must be positive, got z={z}{where}")
    return PixelCoord(K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def backproject_center(center: PixelCoord, z: float, K: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project_center` for a known depth."""
    u, v = center
    return np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])


def normalize_quaternion(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(raw))
    if not np.isfinite(n) or n <= QUAT_EPS:
        raise FloatingPointError(f"cannot normalize degenerate quaternion {raw.tolist()}")
    return raw / n


def _check_unit(q: np.ndarray, name: str = "q"):
    sq = np.sum(np.asarray(q) ** 2, axis=-1)
    if np.any(np.abs(sq - 1.0) > UNIT_TOL):
        raise GeometryError(f"{name} must have unit norm, got |{name}|^2={np.max(np.abs(sq - 1.0)) + 1.0}")


def quat_to_rotmat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    _check_unit(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    """Rotation matrix to scalar-first unit quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize_quaternion(q)
    return q if q[0] >= 0 else -q


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotate_about_optical_axis(q, phi):
    """Left-compose ``q`` with a rotation by ``phi`` about the camera z axis.

    Matches an image-plane rotation of the object's appearance by ``phi``
    (+u toward +v). Accepts numpy arrays or tensors of shape ``(..., 4)``.
    """
    lib = torch if torch.is_tensor(q) else np
    phi = phi if lib is torch else np.asarray(phi, dtype=np.float64)
    c, s = lib.cos(phi / 2), lib.sin(phi / 2)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return lib.stack([c * w - s * z, c * x - s * y, c * y + s * x, c * z + s * w], -1)


def geodesic_angle(qa, qb, clamp: float = 1.0) -> np.ndarray | float:
    """Rotation angle in radians separating two unit quaternions.

    Works on single quaternions or on ``(..., 4)`` batches. ``clamp`` bounds
    ``|<qa, qb>|`` before ``arccos``; the loss uses ``1 - 1e-7``.
    """
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    _check_unit(qa, "qa")
    _check_unit(qb, "qb")
    dot = np.abs(np.sum(qa * qb, axis=-1))
    angle = 2.0 * np.arccos(np.clip(dot, 0.0, clamp))
    return float(angle) if np.ndim(angle) == 0 else angle


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples on the rotation group via normalized 4D Gaussians."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def convert_quat_order(q, order: str) -> np.ndarray:
    """Convert a quaternion given in ``order`` (``"wxyz"`` or ``"xyzw"``) to scalar-first."""
    q = np.asarray(q, dtype=np.float64)
    if order == "wxyz":
        return q
    if order == "xyzw":
        return q[..., [3, 0, 1, 2]]
    raise ValueError(f"unknown quaternion order {order!r}")
