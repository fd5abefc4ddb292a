"""Differentiable quaternion / pose 7-vector operations (torch).

Raw pose layout everywhere is [tx, ty, tz, qw, qx, qy, qz]; quaternion
conventions mirror ``poses`` exactly (parity is pinned by tests). All ops
accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import torch

from .errors import DegenerateQuaternion
from .poses import QUAT_NORM_EPS


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    """Scale to unit norm. Raises DegenerateQuaternion on collapsed inputs."""
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if not bool((norm > QUAT_NORM_EPS).all()):
        raise DegenerateQuaternion(
            f"quaternion norm {float(norm.detach().min())} <= {QUAT_NORM_EPS}"
        )
    return q / norm


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a*b on (..., 4) tensors."""
    w1, x1, y1, z1 = a.unbind(-1)
    w2, x2, y2, z2 = b.unbind(-1)
    return torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )


def quat_conj(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([w, -x, -y, -z], dim=-1)


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate 3-vectors by unit quaternions: q v q*."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = torch.cross(u, v, dim=-1)
    return v + 2.0 * (w * uv + torch.cross(u, uv, dim=-1))


def pose7_compose(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Compose raw pose 7-vectors; quaternion parts get normalized first."""
    qa = quat_normalize(a[..., 3:])
    qb = quat_normalize(b[..., 3:])
    q = quat_mul(qa, qb)
    t = quat_rotate(qa, b[..., :3]) + a[..., :3]
    return torch.cat([t, q], dim=-1)


def pose7_inverse(a: torch.Tensor) -> torch.Tensor:
    q_inv = quat_conj(quat_normalize(a[..., 3:]))
    t = -quat_rotate(q_inv, a[..., :3])
    return torch.cat([t, q_inv], dim=-1)


def pose7_relative(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Transform aligning pose a to pose b (see poses.relative)."""
    return pose7_compose(b, pose7_inverse(a))
