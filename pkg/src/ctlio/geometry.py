"""SO(3) and rigid-transform primitives.

Rotations are plain 3x3 orthonormal ``numpy`` arrays. Batched variants accept
a leading axis, e.g. ``(N, 3)`` tangent vectors map to ``(N, 3, 3)`` rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle exp/log switch to Taylor series.
SMALL_ANGLE = 1e-6


def hat(v):
    """Skew-symmetric matrix of a 3-vector (or a stack of them)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    """Inverse of :func:`hat`. The input is symmetrized first."""
    m = np.asarray(m, dtype=float)
    s = 0.5 * (m - np.swapaxes(m, -1, -2))
    return np.stack([s[..., 2, 1], s[..., 0, 2], s[..., 1, 0]], axis=-1)


def exp_so3(v):
    """Rodrigues exponential. Works on ``(3,)`` or ``(..., 3)`` input."""
    v = np.asarray(v, dtype=float)
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(v)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def _log_pi(R):
    # Angle at (or numerically at) pi: axis from the dominant diagonal entry.
    d = np.diag(R)
    i = int(np.argmax(d))
    axis = (R[:, i] + np.eye(3)[:, i]) / np.sqrt(2.0 * (1.0 + d[i]))
    axis /= np.linalg.norm(axis)
    # Sign convention: first nonzero component positive.
    nz = np.flatnonzero(np.abs(axis) > 1e-12)
    if nz.size and axis[nz[0]] < 0:
        axis = -axis
    return np.pi * axis


def log_so3(R):
    """Principal-branch logarithm, returns a tangent vector with norm <= pi.

    Angles exactly at pi are ambiguous in sign. The axis is read from the
    column of ``R + I`` with the largest diagonal entry and flipped so its first
    nonzero component is positive, e.g. a half turn about z gives ``(0, 0, pi)``.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim > 2:
        return np.stack([log_so3(r) for r in R.reshape(-1, 3, 3)]).reshape(R.shape[:-2] + (3,))
    cos = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    w = vee(R)
    sin = np.linalg.norm(w)
    theta = np.arctan2(sin, cos)
    if theta < SMALL_ANGLE:
        # theta/sin(theta) ~ 1 + theta^2/6
        return (1.0 + theta * theta / 6.0) * w
    if np.pi - theta < 1e-6:
        if sin < 1e-12:
            return _log_pi(R)
        # Near pi the antisymmetric part loses precision; use the symmetric part.
        v = _log_pi(R) * (theta / np.pi)
        if np.dot(v, w) < 0:
            v = -v
        return v
    return (theta / sin) * w


def log_so3_batch(R):
    """Vectorized logarithm for ``(N, 3, 3)`` input away from angle pi."""
    R = np.asarray(R, dtype=float)
    cos = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    w = vee(R)
    sin = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin, cos)
    if np.any(np.pi - theta < 1e-6):
        return log_so3(R)
    small = theta < SMALL_ANGLE
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, sin))
    return scale[..., None] * w


def normalize_rotation(R):
    """Project onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def rotation_from_quat(q):
    """Rotation matrix from ``(qx, qy, qz, qw)``."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotation(R):
    """``(qx, qy, qz, qw)`` with ``qw >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def rotation_angle(R):
    """Geodesic angle of ``R`` in radians."""
    return float(np.linalg.norm(log_so3(R)))


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform ``x_A = R x_B + t`` mapping frame {B} into {A}."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, x):
        """Transform a point ``(3,)`` or a cloud ``(N, 3)``."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def renormalized(self) -> "RigidTransform":
        return RigidTransform(normalize_rotation(self.rotation), self.translation)
