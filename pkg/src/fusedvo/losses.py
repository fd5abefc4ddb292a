"""Window-level training losses over predicted pose 7-vectors.

A prediction window carries K raw global poses plus one raw relative
transform per index pair of the pair spec. Raw quaternions are normalized
inside the losses so gradients flow through normalization; ground-truth
quaternions are sign-aligned to the prediction before differencing, which
keeps the componentwise squared error invariant under the double cover.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import poses
from .errors import EmptyBatch, InvalidK, ShapeMismatch
from .quats import quat_normalize

MIN_K = 2
MAX_K = 32


@dataclass(frozen=True)
class PairSpec:
    """Ordered (i, j) index pairs with 0 <= i < j <= k-1 over a K-frame window."""

    k: int
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = set()
        for i, j in self.pairs:
            if not (0 <= i < j <= self.k - 1):
                raise InvalidK(f"pair ({i}, {j}) out of range for k={self.k}")
            if (i, j) in seen:
                raise InvalidK(f"duplicate pair ({i}, {j})")
            seen.add((i, j))

    def __len__(self):
        return len(self.pairs)


def make_pair_spec(k: int) -> PairSpec:
    """Dyadic pair set: strides 1, 2, 4, ... plus the full-window pair.

    Adjacent pairs come first, then longer strides in increasing order; the
    (0, k-1) pair is appended when the dyadic strides do not produce it.
    For k=5 this is exactly [(0,1),(1,2),(2,3),(3,4),(0,2),(2,4),(0,4)].
    """
    if not isinstance(k, int) or not (MIN_K <= k <= MAX_K):
        raise InvalidK(f"k must be an integer in [{MIN_K}, {MAX_K}], got {k!r}")
    pairs: list[tuple[int, int]] = []
    stride = 1
    while stride <= k - 1:
        for i in range(0, k - stride, stride):
            pairs.append((i, i + stride))
        stride *= 2
    if (0, k - 1) not in pairs:
        pairs.append((0, k - 1))
    return PairSpec(k=k, pairs=tuple(pairs))


@dataclass(frozen=True)
class LossWeights:
    """beta_rot scales the quaternion term, lambda_global the global term.

    Defaults of 1.0 reproduce the plain unweighted sums.
    """

    beta_rot: float = 1.0
    lambda_global: float = 1.0

    def __post_init__(self):
        if not (self.beta_rot > 0 and self.lambda_global > 0):
            raise ValueError("loss weights must be > 0")


DEFAULT_WEIGHTS = LossWeights()


@dataclass
class WindowTarget:
    """Ground truth for one window: K absolute poses + per-pair relative poses."""

    gt_global: tuple[poses.Pose, ...]
    gt_pairs: tuple[poses.Pose, ...]

    @classmethod
    def from_global(cls, gt_global: Sequence[poses.Pose], spec: PairSpec) -> "WindowTarget":
        gt_global = tuple(gt_global)
        if len(gt_global) != spec.k:
            raise ShapeMismatch(f"expected {spec.k} poses, got {len(gt_global)}")
        gt_pairs = tuple(
            poses.relative(gt_global[i], gt_global[j]) for i, j in spec.pairs
        )
        return cls(gt_global=gt_global, gt_pairs=gt_pairs)

    def consistent(self, spec: PairSpec, atol: float = 1e-9) -> bool:
        if len(self.gt_pairs) != len(spec.pairs):
            return False
        return all(
            poses.approx_equal(
                p, poses.relative(self.gt_global[i], self.gt_global[j]), atol
            )
            for p, (i, j) in zip(self.gt_pairs, spec.pairs)
        )


@dataclass
class WindowPrediction:
    """Raw network outputs for one window.

    pred_global: (K, 7) raw pose vectors, pre-canonicalization.
    pred_pairs: (len(spec), 7) raw relative transforms, pair-spec order.
    """

    pred_global: torch.Tensor
    pred_pairs: torch.Tensor
    mode: str = "fused"


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if like is not None and t.dtype != like.dtype:
        t = t.to(like.dtype)
    return t


def _gt_parts(gt, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(gt, poses.Pose):
        v = gt.as_vector()
    else:
        v = np.asarray(gt, dtype=np.float64).reshape(7)
    v = torch.as_tensor(v, dtype=like.dtype)
    return v[:3], v[3:]


def pose_mse(pred, gt, w: LossWeights = DEFAULT_WEIGHTS) -> torch.Tensor:
    """Squared translation error + beta_rot * squared quaternion difference.

    ``pred`` is a raw 7-vector [t, q]; its quaternion is normalized here and
    the ground-truth quaternion is sign-aligned to it before differencing.
    """
    pred = _as_tensor(pred).reshape(7)
    t_gt, q_gt = _gt_parts(gt, pred)
    q_pred = quat_normalize(pred[3:])
    q_gt = torch.where(torch.dot(q_pred, q_gt) < 0, -q_gt, q_gt)
    t_term = torch.sum((pred[:3] - t_gt) ** 2)
    q_term = torch.sum((q_pred - q_gt) ** 2)
    return t_term + w.beta_rot * q_term


def ctc_residuals(
    pred: WindowPrediction,
    tgt: WindowTarget,
    spec: PairSpec,
    w: LossWeights = DEFAULT_WEIGHTS,
) -> list[torch.Tensor]:
    """One nonnegative scalar per pair, in pair-spec order."""
    n = len(spec.pairs)
    if len(pred.pred_pairs) != n or len(tgt.gt_pairs) != n:
        raise ShapeMismatch(
            f"pair counts (pred={len(pred.pred_pairs)}, gt={len(tgt.gt_pairs)}) "
            f"!= spec ({n})"
        )
    return [pose_mse(pred.pred_pairs[i], tgt.gt_pairs[i], w) for i in range(n)]


def _require_batch(batch):
    batch = list(batch)
    if not batch:
        raise EmptyBatch("loss over an empty batch")
    return batch


def relative_loss(
    batch: Sequence[tuple[WindowPrediction, WindowTarget]],
    spec: PairSpec,
    w: LossWeights = DEFAULT_WEIGHTS,
) -> torch.Tensor:
    """Mean over samples of the summed pairwise residuals."""
    batch = _require_batch(batch)
    per_sample = [
        torch.stack(ctc_residuals(pred, tgt, spec, w)).sum() for pred, tgt in batch
    ]
    return torch.stack(per_sample).sum() / len(per_sample)


def global_mse_sum(
    pred: WindowPrediction, tgt: WindowTarget, w: LossWeights = DEFAULT_WEIGHTS
) -> torch.Tensor:
    """Sum over window frames of the global pose MSE."""
    if len(pred.pred_global) != len(tgt.gt_global):
        raise ShapeMismatch(
            f"global counts differ: pred={len(pred.pred_global)}, "
            f"gt={len(tgt.gt_global)}"
        )
    terms = [
        pose_mse(pred.pred_global[j], tgt.gt_global[j], w)
        for j in range(len(tgt.gt_global))
    ]
    return torch.stack(terms).sum()


def joint_loss(
    batch: Sequence[tuple[WindowPrediction, WindowTarget]],
    spec: PairSpec,
    w: LossWeights = DEFAULT_WEIGHTS,
) -> torch.Tensor:
    """Mean over samples of (pairwise residual sum + lambda_global * global MSE sum)."""
    batch = _require_batch(batch)
    per_sample = []
    for pred, tgt in batch:
        ctc = torch.stack(ctc_residuals(pred, tgt, spec, w)).sum()
        per_sample.append(ctc + w.lambda_global * global_mse_sum(pred, tgt, w))
    return torch.stack(per_sample).sum() / len(per_sample)
