"""Rigid-body math: quaternions, SE(3) poses, SLERP/LERP, 6D rotations.

Quaternions are stored as ``(w, x, y, z)`` numpy arrays. Poses keep a unit
quaternion plus a translation; rotation matrices are built on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotation

# Below this |dot| gap SLERP falls back to normalized linear interpolation.
SLERP_DOT_THRESHOLD = 1.0 - 1e-8


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateRotation("cannot normalize a zero quaternion")
    return q / n


def quat_mul(a, b):
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
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
    q = normalize_quat(q)
    return -q if q[0] < 0 else q


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_exp(rotvec):
    """Rotation vector (axis * angle, radians) to unit quaternion."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return normalize_quat(np.concatenate([[1.0], 0.5 * v]))
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * v / theta])


def quat_log(q):
    """Unit quaternion to rotation vector; the angle lies in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    theta = 2.0 * np.arctan2(s, q[0])
    return theta * v / s


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v):
    """Cross-product matrices for ``(N, 3)`` vectors."""
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def rot_x(deg):
    return quat_to_matrix(quat_from_axis_angle([1, 0, 0], np.radians(deg)))


def rot_y(deg):
    return quat_to_matrix(quat_from_axis_angle([0, 1, 0], np.radians(deg)))


def rot_z(deg):
    return quat_to_matrix(quat_from_axis_angle([0, 0, 1], np.radians(deg)))


def euler_xyz_to_matrix(rx, ry, rz):
    """Rotation ``Rz @ Ry @ Rx`` from per-axis angles in radians."""
    return rot_z(np.degrees(rz)) @ rot_y(np.degrees(ry)) @ rot_x(np.degrees(rx))


def slerp(q0, q1, u):
    """Constant angular velocity interpolation along the shorter arc."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > SLERP_DOT_THRESHOLD:
        return normalize_quat(q0 + u * (q1 - q0))
    theta = np.arccos(dot)
    s = np.sin(theta)
    return normalize_quat((np.sin((1.0 - u) * theta) * q0 + np.sin(u * theta) * q1) / s)


def lerp(p0, p1, u):
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    return p0 + u * (p1 - p0)


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform mapping points from a local frame into a parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-15:
            q = normalize_quat(q)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"SE3Pose(q={q}, t={t})"


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    q = quat_mul(a.rotation, b.rotation)
    t = a.R @ b.translation + a.translation
    return SE3Pose(q, t)


def invert(a: SE3Pose) -> SE3Pose:
    qi = quat_conj(a.rotation)
    return SE3Pose(qi, -(quat_to_matrix(qi) @ a.translation))


@dataclass(frozen=True, eq=False)
class Rot6D:
    """Two unconstrained columns of a rotation matrix."""

    a1: np.ndarray
    a2: np.ndarray

    @classmethod
    def from_matrix(cls, R):
        R = np.asarray(R, dtype=float)
        return cls(R[:, 0].copy(), R[:, 1].copy())

    def as_vector(self):
        return np.concatenate([self.a1, self.a2])

    def matrix(self):
        return rot6d_decode(self)


def _gram_schmidt(a1, a2):
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise DegenerateRotation("first 6D column vanished")
    b1 = a1 / n1
    v = a2 - np.dot(b1, a2) * b1
    nv = np.linalg.norm(v)
    if nv < 1e-12 * max(1.0, np.linalg.norm(a2)):
        raise DegenerateRotation("6D columns are parallel")
    b2 = v / nv
    return b1, b2, np.cross(b1, b2), n1, nv, v


def rot6d_decode(r: Rot6D) -> np.ndarray:
    b1, b2, b3, *_ = _gram_schmidt(np.asarray(r.a1, float), np.asarray(r.a2, float))
    return np.stack([b1, b2, b3], axis=1)


def rot6d_decode_backward(r: Rot6D, grad_R):
    """Adjoint of :func:`rot6d_decode` given dLoss/dR; returns (g_a1, g_a2)."""
    a1 = np.asarray(r.a1, float)
    a2 = np.asarray(r.a2, float)
    b1, b2, b3, n1, nv, v = _gram_schmidt(a1, a2)
    g1, g2, g3 = grad_R[:, 0], grad_R[:, 1], grad_R[:, 2]
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gv = (gb2 - b2 * np.dot(b2, gb2)) / nv
    ga2 = gv - b1 * np.dot(b1, gv)
    gb1 = gb1 - (np.dot(b1, a2) * gv + a2 * np.dot(b1, gv))
    ga1 = (gb1 - b1 * np.dot(b1, gb1)) / n1
    return ga1, ga2


def rotation_geodesic_deg(Ra, Rb) -> float:
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    M = Ra.T @ Rb
    # atan2 form stays accurate near 0 where arccos loses half the digits
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def quat_geodesic_deg(qa, qb) -> float:
    """Angle between two unit quaternions; precise near 0 degrees."""
    rel = quat_mul(quat_conj(normalize_quat(qa)), normalize_quat(qb))
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))))


def chordal_quat_mean(quats):
    """Sign-aligned normalized average of quaternions."""
    quats = np.asarray(quats, dtype=float)
    ref = quats[0]
    aligned = np.where((quats @ ref)[:, None] < 0, -quats, quats)
    return normalize_quat(aligned.mean(axis=0))
