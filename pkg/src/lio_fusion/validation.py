"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .geometry import PoseSE3, quat_normalize
from .lidar import RingedScan


def check_points(X, name="points") -> np.ndarray:
    """Finite ``(n, 3)`` float array."""
    X = check_array(X, dtype=float, ensure_2d=True, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {X.shape[1]}")
    return X


def check_scan(X, t=0.0) -> RingedScan:
    """A :class:`RingedScan` or an ``(n, 4)`` array of ``x, y, z, ring``."""
    if isinstance(X, RingedScan):
        check_points(X.points)
        return X
    X = check_array(X, dtype=float, ensure_2d=True, input_name="scan")
    if X.shape[1] != 4:
        raise ValueError(f"scan array must have columns x, y, z, ring; got {X.shape[1]} columns")
    rings = X[:, 3]
    if np.any(rings != np.round(rings)) or np.any(rings < 0):
        raise ValueError("ring indices must be non-negative integers")
    return RingedScan(t=float(t), points=X[:, :3], rings=rings.astype(int))


def check_quaternion(q, name="quaternion") -> np.ndarray:
    """Unit ``(w, x, y, z)`` quaternion; rejects near-zero norms."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError(f"{name} must be 4 finite numbers")
    if np.linalg.norm(q) < 1e-9:
        raise ValueError(f"{name} has zero norm")
    return quat_normalize(q)


def check_pose(pose, name="pose") -> PoseSE3:
    """:class:`PoseSE3`, 4x4 matrix or ``(x, y, z, qw, qx, qy, qz)`` vector."""
    if pose is None:
        return PoseSE3.identity()
    if isinstance(pose, PoseSE3):
        return pose
    a = np.asarray(pose, dtype=float)
    if a.shape == (4, 4):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} has non-finite entries")
        return PoseSE3.from_matrix(a)
    if a.shape == (7,):
        if not np.all(np.isfinite(a[:3])):
            raise ValueError(f"{name} has non-finite translation")
        return PoseSE3(check_quaternion(a[3:], name), a[:3].copy())
    raise ValueError(f"{name} must be a PoseSE3, a 4x4 matrix or a 7-vector")


def check_positive(value, name, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ValueError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_fraction(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not 0 < value <= 1:
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return float(value)


def check_times(times, name="times") -> np.ndarray:
    """Finite, strictly increasing 1-D timestamps."""
    t = np.asarray(times, dtype=float).reshape(-1)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} must be finite")
    if np.any(np.diff(t) <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    return t
