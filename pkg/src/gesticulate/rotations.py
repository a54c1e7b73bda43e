"""Rotation math shared by the motion modules.

Conventions: quaternions are (w, x, y, z) with non-negative w after
canonicalization; euler angles are intrinsic, applied in the order the
axes are listed (BVH channel order), in degrees at the API boundary.
"""

from __future__ import annotations

import numpy as np

_AXIS_INDEX = {"X": 0, "Y": 1, "Z": 2}
_EVEN_ORDERS = {"XYZ", "YZX", "ZXY"}


def _single_axis_matrix(axis: str, angles_rad: np.ndarray) -> np.ndarray:
    """Rotation matrices about a coordinate axis, shape (..., 3, 3)."""
    a = np.asarray(angles_rad, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    m = np.zeros(a.shape + (3, 3), dtype=np.float64)
    i = _AXIS_INDEX[axis]
    j, k = (i + 1) % 3, (i + 2) % 3
    m[..., i, i] = 1.0
    m[..., j, j] = c
    m[..., k, k] = c
    m[..., j, k] = -s
    m[..., k, j] = s
    return m


def euler_to_matrix(order: str, angles_deg: np.ndarray) -> np.ndarray:
    """Intrinsic euler angles (degrees, one per axis of `order`) to matrices."""
    if sorted(order) != ["X", "Y", "Z"]:
        raise ValueError(f"rotation order must permute XYZ, got {order!r}")
    ang = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    m = _single_axis_matrix(order[0], ang[..., 0])
    for pos in (1, 2):
        m = m @ _single_axis_matrix(order[pos], ang[..., pos])
    return m


def matrix_to_euler(order: str, mats: np.ndarray) -> np.ndarray:
    """Inverse of euler_to_matrix, degrees; middle angle clamped at gimbal lock."""
    if sorted(order) != ["X", "Y", "Z"]:
        raise ValueError(f"rotation order must permute XYZ, got {order!r}")
    m = np.asarray(mats, dtype=np.float64)
    i, j, k = (_AXIS_INDEX[a] for a in order)
    sign = 1.0 if order in _EVEN_ORDERS else -1.0
    theta2 = np.arcsin(np.clip(sign * m[..., i, k], -1.0, 1.0))
    theta1 = np.arctan2(-sign * m[..., j, k], m[..., k, k])
    theta3 = np.arctan2(-sign * m[..., i, j], m[..., i, i])
    return np.rad2deg(np.stack([theta1, theta2, theta3], axis=-1))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so w >= 0 (q and -q encode the same rotation).

    When w is (numerically) zero the sign is decided by the first component
    whose magnitude clears a small threshold, so 180-degree rotations get a
    stable canonical form too.
    """
    q = np.asarray(q, dtype=np.float64)
    eps = 1e-12
    sign = np.zeros(q.shape[:-1], dtype=np.float64)
    for c in range(4):
        comp = q[..., c]
        undecided = sign == 0.0
        sign = np.where(undecided & (comp > eps), 1.0, sign)
        sign = np.where(undecided & (comp < -eps), -1.0, sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by quaternions q (..., 4)."""
    qv = np.asarray(q, dtype=np.float64)[..., 1:]
    qw = np.asarray(q, dtype=np.float64)[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + qw * t + np.cross(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = (q[..., i] for i in range(4))
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrices to canonical (w >= 0) unit quaternions.

    Shepperd's branch selection: build the quaternion from the largest of
    (w, x, y, z) magnitudes so the division is always well conditioned.
    """
    m = np.asarray(m, dtype=np.float64)
    t = np.einsum("...ii->...i", m).sum(-1)
    cand = np.stack(
        [t, m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2],
         m[..., 1, 1] - m[..., 0, 0] - m[..., 2, 2],
         m[..., 2, 2] - m[..., 0, 0] - m[..., 1, 1]],
        axis=-1,
    )
    branch = np.argmax(cand, axis=-1)
    q = np.empty(m.shape[:-2] + (4,), dtype=np.float64)

    r = np.sqrt(np.maximum(1.0 + cand[..., 0], 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        mask = branch == 0
        s = 0.5 / np.where(r == 0, 1.0, r)
        qw = np.stack(
            [0.5 * r,
             (m[..., 2, 1] - m[..., 1, 2]) * s,
             (m[..., 0, 2] - m[..., 2, 0]) * s,
             (m[..., 1, 0] - m[..., 0, 1]) * s],
            axis=-1,
        )
        q = np.where(mask[..., None], qw, q)
        for axis, (a, b, c) in enumerate([(0, 1, 2), (1, 2, 0), (2, 0, 1)]):
            mask = branch == axis + 1
            r_a = np.sqrt(np.maximum(1.0 + cand[..., axis + 1], 0.0))
            s = 0.5 / np.where(r_a == 0, 1.0, r_a)
            comp = np.empty_like(qw)
            comp[..., 0] = (m[..., c, b] - m[..., b, c]) * s
            comp[..., 1 + a] = 0.5 * r_a
            comp[..., 1 + b] = (m[..., b, a] + m[..., a, b]) * s
            comp[..., 1 + c] = (m[..., c, a] + m[..., a, c]) * s
            q = np.where(mask[..., None], comp, q)
    return quat_canonical(quat_normalize(q))


def euler_to_quat(order: str, angles_deg: np.ndarray) -> np.ndarray:
    return matrix_to_quat(euler_to_matrix(order, angles_deg))


def quat_to_euler(order: str, q: np.ndarray) -> np.ndarray:
    return matrix_to_euler(order, quat_to_matrix(np.asarray(q, dtype=np.float64)))


def quat_from_axis_angle(axis, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * np.deg2rad(angle_deg)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def slerp(q0: np.ndarray, q1: np.ndarray, t) -> np.ndarray:
    """Shortest-arc spherical interpolation, t in [0, 1] (broadcastable)."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)[..., None]
    dot = (q0 * q1).sum(-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    small = theta < 1e-7
    sin_theta = np.where(small, 1.0, np.sin(theta))
    w0 = np.where(small, 1.0 - t, np.sin((1.0 - t) * theta) / sin_theta)
    w1 = np.where(small, t, np.sin(t * theta) / sin_theta)
    return quat_normalize(w0 * q0 + w1 * q1)


def quat_geodesic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation angle (radians) between quaternions, sign-invariant."""
    dot = np.abs((np.asarray(a) * np.asarray(b)).sum(-1))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


def matrix_to_sixd(m: np.ndarray) -> np.ndarray:
    """First two rotation-matrix columns, flattened to (..., 6)."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def sixd_to_matrix(v: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two 3-vectors back into an orthonormal rotation matrix."""
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:6]
    c0 = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b - (c0 * b).sum(-1, keepdims=True) * c0
    c1 = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)
