"""Rotations in three dimensions and the unit-quaternion double cover.

Conventions: quaternions are (w, x, y, z) with w the real part; rho(q) is the
rotation v -> q^-1 v q on imaginary quaternions, so rho(q) = rho(-q) and rho
is a 2-to-1 homomorphism onto the rotation group.
"""

from __future__ import annotations

import numpy as np

from .errors import CutLocusError


def hat(v) -> np.ndarray:
    """Cross-product matrix, batched over leading axes."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


def so3_exp(v) -> np.ndarray:
    """Rodrigues exponential of rotation vectors, batched."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < 1e-12
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, (1.0 - np.cos(th)) / (th * th))
    K = hat(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_angle(R) -> np.ndarray:
    """Bi-invariant angle of rotation matrices, in [0, pi], batched."""
    R = np.asarray(R, dtype=float)
    tr = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(tr)


def axis_angle(R) -> tuple:
    """(axis, angle) of a single rotation matrix; axis arbitrary at angle 0."""
    q = rotation_to_quaternion(R)
    angle = 2.0 * np.arccos(np.clip(abs(q[0]), 0.0, 1.0))
    v = q[1:] if q[0] >= 0 else -q[1:]
    n = np.linalg.norm(v)
    axis = v / n if n > 1e-15 else np.array([0.0, 0.0, 1.0])
    return axis, float(angle)


def quat_mul(p, q) -> np.ndarray:
    """Hamilton product, batched over leading axes."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w1, x1, y1, z1 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    w2, x2, y2, z2 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quaternion_to_rotation(q) -> np.ndarray:
    """Matrix of v -> q^-1 v q on imaginary quaternions, batched.

    Requires |q| = 1 to 1e-10.  Satisfies rho(q) = rho(-q) at the formula
    level (all entries are quadratic in q).
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1)
    if not np.allclose(norm, 1.0, atol=1e-10):
        raise ValueError("quaternion must be unit length to 1e-10")
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def rotation_to_quaternion(R) -> np.ndarray:
    """One of the two unit quaternions covering a rotation matrix (Shepperd)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([s / 4,
                         (R[2, 1] - R[1, 2]) / s,
                         (R[0, 2] - R[2, 0]) / s,
                         (R[1, 0] - R[0, 1]) / s])
    i = int(np.argmax(np.diag(R)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
    q = np.empty(4)
    q[0] = (R[k, j] - R[j, k]) / s
    q[1 + i] = s / 4
    q[1 + j] = (R[j, i] + R[i, j]) / s
    q[1 + k] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def sphere_angle(p, q) -> np.ndarray:
    """Great-circle angle between unit vectors of any common dimension, batched."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    dot = np.clip((p * q).sum(axis=-1), -1.0, 1.0)
    return np.arccos(dot)


def slerp(p, q, t, tol: float = 1e-6):
    """Constant-speed great-circle interpolation between unit vectors.

    Raises CutLocusError for (nearly) antipodal endpoints, where the minimal
    geodesic is not unique.  t may be a scalar or an array.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ang = float(sphere_angle(p, q))
    if ang > np.pi - tol:
        raise CutLocusError(f"endpoints at angle {ang:.6f} are too close to antipodal")
    t = np.asarray(t, dtype=float)
    if ang < 1e-12:
        out = np.broadcast_to(p, t.shape + p.shape).copy()
        return out if t.shape else p.copy()
    s = np.sin(ang)
    out = (np.sin((1.0 - t)[..., None] * ang) * p + np.sin(t[..., None] * ang) * q) / s
    return out / np.linalg.norm(out, axis=-1, keepdims=True)
