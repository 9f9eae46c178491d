"""Quaternion, rotation and rigid-transform primitives.

Quaternions are numpy arrays in ``(w, x, y, z)`` memory order and follow the
Hamilton convention: ``quat_to_rotmat(a ⊗ b) == quat_to_rotmat(a) @
quat_to_rotmat(b)`` and a quaternion maps body-frame vectors into the
reference frame.

Orientation kinematics are written as ``q̇ = ½ q ⊗ (0, ω)`` with ``ω`` the
body rate.  The JPL form ``q̇ = ½ Ω_JPL(ω) q`` found in the filtering
literature describes the same motion for a conjugated quaternion;
:func:`omega_matrix` returns the Hamilton matrix so that ``q̇ = ½ Ω(ω) q``
holds with the quaternions used here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
LOG_DOMAIN_MARGIN = 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class GeometryDomainError(ValueError):
    """Raised when a rotation is outside the domain of an operation."""


def skew(v):
    """Cross-product matrix ``[v]×`` so that ``skew(a) @ b == np.cross(a, b)``."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_normalize(q):
    """Unit-normalize and resolve the double cover to ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    n = np.sqrt(q @ q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryDomainError(f"cannot normalize quaternion {q}")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def qmul(a, b):
    """Raw Hamilton product without renormalization or sign canonicalization."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_multiply(a, b):
    """Hamilton product ``a ⊗ b``, renormalized."""
    return quat_normalize(qmul(a, b))


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


quat_inverse = quat_conjugate


def quat_to_rotmat(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def rotmat_to_quat(R):
    """Shepperd's method; returns a canonical unit quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
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
    return quat_normalize(q)


def quat_rotate(q, v):
    return quat_to_rotmat(q) @ np.asarray(v, dtype=float)


def omega_matrix(omega):
    """4×4 matrix with ``Ω(ω) q == q ⊗ (0, ω)`` for Hamilton quaternions."""
    wx, wy, wz = omega
    return np.array([
        [0.0, -wx, -wy, -wz],
        [wx, 0.0, wz, -wy],
        [wy, -wz, 0.0, wx],
        [wz, wy, -wx, 0.0],
    ])


def so3_exp(phi):
    """Rotation vector (rad) to unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    angle = np.sqrt(phi @ phi)
    if angle < SMALL_ANGLE:
        # second-order Taylor terms keep the map smooth through zero
        q = np.array([1.0 - angle * angle / 8.0, *(0.5 * phi)])
        return q / np.sqrt(q @ q)
    half = 0.5 * angle
    return np.array([np.cos(half), *(np.sin(half) / angle * phi)])


def so3_log(q):
    """Unit quaternion to rotation vector (rad).

    Raises GeometryDomainError when the rotation angle is within 1e-6 rad of
    pi, where the axis is ill-conditioned.
    """
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    v = q[1:]
    vn = np.sqrt(v @ v)
    angle = 2.0 * np.arctan2(vn, q[0])
    if angle > np.pi - LOG_DOMAIN_MARGIN:
        raise GeometryDomainError(f"so3_log undefined near pi (angle={angle:.9f})")
    if vn < 0.5 * SMALL_ANGLE:
        return 2.0 * v / q[0]
    return angle / vn * v


def quat_vec(q):
    """Imaginary part ``(x, y, z)``."""
    return np.asarray(q[1:], dtype=float).copy()


def quat_angle(q):
    """Rotation angle in [0, pi], defined everywhere."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))


def exp_rotmat(phi):
    return quat_to_rotmat(so3_exp(phi))


def right_jacobian(phi):
    """SO(3) right Jacobian: ``Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)``."""
    phi = np.asarray(phi, dtype=float)
    a = np.sqrt(phi @ phi)
    K = skew(phi)
    if a < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1.0 - np.cos(a)) / a**2 * K
            + (a - np.sin(a)) / a**3 * K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    a = np.sqrt(phi @ phi)
    K = skew(phi)
    if a < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / a**2 - (1.0 + np.cos(a)) / (2.0 * a * np.sin(a))
    return np.eye(3) + 0.5 * K + c * K @ K


def euler_from_quat(q):
    """Roll, pitch, yaw (rad) of a ZYX decomposition ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    R = quat_to_rotmat(q)
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def quat_from_euler(roll, pitch, yaw):
    qx = np.array([np.cos(roll / 2), np.sin(roll / 2), 0.0, 0.0])
    qy = np.array([np.cos(pitch / 2), 0.0, np.sin(pitch / 2), 0.0])
    qz = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
    return quat_multiply(quat_multiply(qz, qy), qx)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x ↦ R(rotation) x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        t = np.array(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(IDENTITY_QUAT, np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rotvec(cls, phi, t):
        return cls(so3_exp(phi), t)

    @property
    def R(self):
        return quat_to_rotmat(self.rotation)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(
            quat_multiply(self.rotation, other.rotation),
            self.translation + self.R @ other.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        Rt = self.R.T
        return PoseSE3(quat_conjugate(self.rotation), -Rt @ self.translation)

    def between(self, other: "PoseSE3") -> "PoseSE3":
        """``self⁻¹ ∘ other``: pose of ``other`` expressed in this frame."""
        return self.inverse().compose(other)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def angle(self) -> float:
        return quat_angle(self.rotation)

    def log(self):
        """(translation, rotation vector) pair, not the SE(3) twist."""
        return np.concatenate([self.translation, so3_log(self.rotation)])

    def allclose(self, other: "PoseSE3", atol=1e-9) -> bool:
        d = self.between(other)
        return d.angle() <= atol and np.linalg.norm(d.translation) <= atol

    def __repr__(self):
        return (f"PoseSE3(rotation={np.array2string(self.rotation, precision=6)}, "
                f"translation={np.array2string(self.translation, precision=6)})")
