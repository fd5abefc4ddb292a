"""Rigid-transform algebra on unit quaternion + translation pairs.

Conventions, fixed repo-wide:
  * quaternion order is (w, x, y, z), Hamilton product;
  * ``compose(a, b)`` matches the 4x4 homogeneous matrix product M(a) @ M(b)
    (apply b first, then a);
  * translations are in meters; absolute poses are camera-to-world;
  * canonical quaternions live on the w >= 0 hemisphere.

All functions are pure and operate on immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateQuaternion, NotARotation

QUAT_NORM_EPS = 1e-12
ORTHONORMALITY_TOL = 1e-3


def canonicalize(q) -> np.ndarray:
    """Normalize a raw 4-vector to a unit quaternion on the canonical hemisphere.

    Canonical means w >= 0; when w == 0 the first nonzero component among
    (x, y, z) is >= 0. Scale-invariant, including negative scales.

    Raises:
        DegenerateQuaternion: if the input norm is <= 1e-12.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = float(np.linalg.norm(q))
    if not norm > QUAT_NORM_EPS:
        raise DegenerateQuaternion(f"quaternion norm {norm!r} <= {QUAT_NORM_EPS}")
    q = q / norm
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        nonzero = np.nonzero(q[1:])[0]
        if nonzero.size and q[1 + nonzero[0]] < 0.0:
            q = -q
    return q


@dataclass(frozen=True)
class Pose:
    """Unit quaternion (w, x, y, z) + translation (x, y, z) in meters.

    The constructor canonicalizes the quaternion, so every Pose satisfies
    ||q|| == 1 and the hemisphere convention.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = canonicalize(self.q)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    def as_vector(self) -> np.ndarray:
        """Pack as a 7-vector [tx, ty, tz, qw, qx, qy, qz]."""
        return np.concatenate([self.t, self.q])

    @staticmethod
    def from_vector(v) -> "Pose":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return Pose(q=v[3:], t=v[:3])


def identity() -> Pose:
    return Pose(q=np.array([1.0, 0.0, 0.0, 0.0]), t=np.zeros(3))


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def rotate_vector(q: np.ndarray, v) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion: q v q*."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    w = q[0]
    u = q[1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def compose(a: Pose, b: Pose) -> Pose:
    """Pose product: apply b first, then a. M(compose(a, b)) == M(a) @ M(b)."""
    return Pose(q=_hamilton(a.q, b.q), t=rotate_vector(a.q, b.t) + a.t)


def inverse(p: Pose) -> Pose:
    """Pose such that compose(p, inverse(p)) is the identity."""
    q_inv = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    return Pose(q=q_inv, t=-rotate_vector(q_inv, p.t))


def relative(a: Pose, b: Pose) -> Pose:
    """Transform aligning pose a to pose b: compose(relative(a, b), a) == b."""
    return compose(b, inverse(a))


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Geodesic rotation angle between two poses, in degrees, range [0, 180]."""
    dot = abs(float(np.dot(a.q, b.q)))
    return float(np.degrees(2.0 * np.arccos(min(dot, 1.0))))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix, canonical hemisphere.

    Branches on the largest of trace/diagonal for numerical stability.
    """
    m00, m01, m02 = r[0]
    m10, m11, m12 = r[1]
    m20, m21, m22 = r[2]
    trace = m00 + m11 + m22
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    return canonicalize(q)


def to_matrix(p: Pose) -> np.ndarray:
    """3x4 row-major rigid transform [R | t]."""
    m = np.empty((3, 4))
    m[:, :3] = quat_to_matrix(p.q)
    m[:, 3] = p.t
    return m


def from_matrix(m) -> Pose:
    """Pose from a 3x4 (or homogeneous 4x4) rigid-transform matrix.

    The rotation block is projected to the nearest rotation (polar
    decomposition) when within 1e-3 of orthonormal; reflections and grossly
    non-orthonormal blocks are rejected.

    Raises:
        NotARotation: if R'R deviates from identity beyond 1e-3 or det(R) < 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (4, 4):
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-6):
            raise NotARotation(f"bad homogeneous last row {m[3]!r}")
        m = m[:3]
    if m.shape != (3, 4):
        raise NotARotation(f"expected 3x4 or 4x4 matrix, got shape {m.shape}")
    r = m[:, :3]
    deviation = float(np.max(np.abs(r.T @ r - np.eye(3))))
    if deviation > ORTHONORMALITY_TOL:
        raise NotARotation(f"R'R deviates from identity by {deviation:.2e} > 1e-3")
    u, _, vt = np.linalg.svd(r)
    if np.linalg.det(u @ vt) < 0.0:
        raise NotARotation("rotation block has negative determinant (reflection)")
    return Pose(q=matrix_to_quat(u @ vt), t=m[:, 3])


def approx_equal(a: Pose, b: Pose, atol: float = 1e-9) -> bool:
    """Componentwise closeness, robust to the quaternion double cover."""
    dq = min(float(np.max(np.abs(a.q - b.q))), float(np.max(np.abs(a.q + b.q))))
    return dq <= atol and float(np.max(np.abs(a.t - b.t))) <= atol


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    """Uniformly random rotation (Gaussian 4-vector normalized) + Gaussian translation."""
    return Pose(q=rng.standard_normal(4), t=t_scale * rng.standard_normal(3))
