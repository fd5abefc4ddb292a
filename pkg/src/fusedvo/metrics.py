"""Evaluation: indoor median errors, road-benchmark segment drift,
trajectory reconstruction from network output, ablation harness, plot data.

Both metrics are alignment-free. Segment deltas use the right-relative
convention compose(inverse(first), last), which makes the drift numbers
invariant under a rigid transform applied to a whole trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import poses
from .data import FrameWindow, SequenceRecord, materialize_window
from .errors import ConfigError, LengthMismatch, SequenceTooShort

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass(frozen=True)
class TrajectoryEstimate:
    poses: tuple
    frame_ids: tuple
    mode: str = "fused"

    def __post_init__(self):
        if not self.poses:
            raise ConfigError("empty trajectory")
        if len(self.poses) != len(self.frame_ids):
            raise LengthMismatch("poses and frame ids differ in length")

    def __len__(self):
        return len(self.poses)


def trajectory(pose_list: Sequence, mode: str = "fused") -> TrajectoryEstimate:
    pose_list = tuple(pose_list)
    return TrajectoryEstimate(
        poses=pose_list, frame_ids=tuple(range(len(pose_list))), mode=mode
    )


def _poses_of(x) -> tuple:
    if isinstance(x, TrajectoryEstimate):
        return x.poses
    return tuple(x)


@dataclass(frozen=True)
class MedianReport:
    t_med: float
    r_med: float


@dataclass(frozen=True)
class DriftReport:
    """t_rel in percent, r_rel in degrees per 100 m.

    per_length maps target length -> (t_rmse, r_rmse, segment count) over
    the feasible subset of the eight benchmark lengths. empty reports (path
    shorter than the smallest length) carry NaN aggregates.
    """

    t_rel: float
    r_rel: float
    per_length: dict
    empty: bool = False


# --- trajectory assembly ---------------------------------------------------


def accumulate_trajectory(start, transforms: Sequence, mode: str = "fused") -> TrajectoryEstimate:
    """pose[0] = start; pose[i+1] = compose(transforms[i], pose[i])."""
    transforms = list(transforms)
    if not transforms:
        raise ConfigError("no transforms to accumulate")
    out = [start]
    for t in transforms:
        out.append(poses.compose(t, out[-1]))
    return trajectory(out, mode=mode)


def adjacent_relatives(traj) -> list:
    ps = _poses_of(traj)
    if len(ps) < 2:
        raise SequenceTooShort("need at least 2 poses")
    return [poses.relative(ps[i], ps[i + 1]) for i in range(len(ps) - 1)]


# --- metrics ---------------------------------------------------------------


def median_pose_errors(pred, gt) -> MedianReport:
    """Median over frames of translation distance (m) and rotation angle (deg)."""
    p, g = _poses_of(pred), _poses_of(gt)
    if len(p) != len(g):
        raise LengthMismatch(f"pred has {len(p)} poses, gt has {len(g)}")
    t_errs = [float(np.linalg.norm(a.t - b.t)) for a, b in zip(p, g)]
    r_errs = [poses.rotation_angle_deg(a, b) for a, b in zip(p, g)]
    return MedianReport(
        t_med=float(np.median(t_errs)), r_med=float(np.median(r_errs))
    )


def _arc_lengths(gt) -> np.ndarray:
    ts = np.stack([p.t for p in gt])
    steps = np.linalg.norm(np.diff(ts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _segment_delta(a, b):
    # right-relative: world alignment of both poses cancels
    return poses.compose(poses.inverse(a), b)


def kitti_drift(pred, gt, lengths: Sequence = KITTI_LENGTHS, step: int = 1) -> DriftReport:
    """Benchmark drift: for every start frame and target length, the segment
    endpoint is the first frame where ground-truth arc length reaches the
    target (ties resolve to the earlier frame); per-segment errors are RMSE'd
    per length, then averaged across lengths."""
    p, g = _poses_of(pred), _poses_of(gt)
    if len(p) != len(g):
        raise LengthMismatch(f"pred has {len(p)} poses, gt has {len(g)}")
    cum = _arc_lengths(g)
    per_length: dict = {}
    for L in lengths:
        t_vals, r_vals = [], []
        for s in range(0, len(g), step):
            reach = cum[s] + L
            # first index at or past the target distance; exact hits keep
            # the earlier frame
            e = int(np.searchsorted(cum, reach, side="left"))
            if e >= len(g):
                continue
            delta_gt = _segment_delta(g[s], g[e])
            delta_pred = _segment_delta(p[s], p[e])
            err = poses.compose(poses.inverse(delta_pred), delta_gt)
            t_vals.append(float(np.linalg.norm(err.t)) / L * 100.0)
            r_vals.append(
                poses.rotation_angle_deg(poses.identity(), err) / L * 100.0
            )
        if t_vals:
            per_length[float(L)] = (
                float(np.sqrt(np.mean(np.square(t_vals)))),
                float(np.sqrt(np.mean(np.square(r_vals)))),
                len(t_vals),
            )
    if not per_length:
        return DriftReport(
            t_rel=float("nan"), r_rel=float("nan"), per_length={}, empty=True
        )
    t_rel = float(np.mean([v[0] for v in per_length.values()]))
    r_rel = float(np.mean([v[1] for v in per_length.values()]))
    return DriftReport(t_rel=t_rel, r_rel=r_rel, per_length=per_length)


# --- model-driven reconstruction -------------------------------------------


def reconstruct_trajectory(
    model, record: SequenceRecord, mode: str = "fused", anchor=None
) -> TrajectoryEstimate:
    """Cover the sequence with windows advancing K-1 frames at a time.

    fused and global_only take per-frame absolute predictions (later
    windows overwrite the shared boundary frame); relative_only chains
    adjacent predicted transforms from the anchor (ground-truth first pose
    unless given) so drift accumulates as in classical odometry.
    """
    k = model.cfg.k
    n = len(record)
    if n < k:
        raise SequenceTooShort(f"{record.id}: {n} frames < K={k}")
    starts = list(range(0, n - k + 1, k - 1))
    if starts[-1] != n - k:
        starts.append(n - k)

    was_training = model.training
    model.eval()
    try:
        if mode in ("fused", "global_only"):
            out = [None] * n
            for s in starts:
                frames = materialize_window(
                    FrameWindow(record, s, k), model.cfg.image_size
                )
                with torch.no_grad():
                    wp = model(frames, mode=mode)
                for j in range(k):
                    out[s + j] = poses.Pose.from_vector(
                        wp.pred_global[j].double().numpy()
                    )
            return trajectory(out, mode=mode)
        if mode == "relative_only":
            transforms = [None] * (n - 1)
            for s in starts:
                frames = materialize_window(
                    FrameWindow(record, s, k), model.cfg.image_size
                )
                with torch.no_grad():
                    wp = model(frames, mode=mode)
                for j in range(k - 1):
                    transforms[s + j] = poses.Pose.from_vector(
                        wp.pred_pairs[j].double().numpy()
                    )
            start_pose = anchor if anchor is not None else record.gt[0]
            return trajectory(
                accumulate_trajectory(start_pose, transforms).poses, mode=mode
            )
        raise ConfigError(f"unknown mode {mode!r}")
    finally:
        model.train(was_training)


# --- ablation harness -------------------------------------------------------


@dataclass(frozen=True)
class AblationBudget:
    """Per-variant training budget; identical across variants by design."""

    epochs_relative: int = 4
    epochs_global: int = 4
    epochs_joint: int = 4
    batch_size: int = 8
    lr0: float = 1e-3
    window_stride: int = 2
    seed: int = 0


def ablation_sweep(
    variants: Sequence,
    train_record: SequenceRecord,
    eval_record: SequenceRecord,
    budget: AblationBudget = AblationBudget(),
) -> list:
    """Train one model per (mode, K) variant and report drift on eval data.

    relative_only variants run stage 1 only; global_only runs stages 1-2;
    fused runs the full pipeline. Row order matches input order.
    """
    from . import training  # deferred: trainer imports this module

    rows = []
    for mode, k in variants:
        model = training.run_pipeline_for_mode(
            mode=mode, k=k, train_record=train_record, budget=budget
        )
        est = reconstruct_trajectory(model, eval_record, mode=mode)
        drift = kitti_drift(est, eval_record.gt)
        med = median_pose_errors(est, eval_record.gt)
        rows.append(
            {
                "mode": mode,
                "k": k,
                "t_rel": drift.t_rel,
                "r_rel": drift.r_rel,
                "t_med": med.t_med,
                "r_med": med.r_med,
                "drift_empty": drift.empty,
            }
        )
    return rows


# --- report and plot emission ------------------------------------------------


def write_report(report, path) -> None:
    lines = []
    if isinstance(report, DriftReport):
        lines.append(f"t_rel_percent = {report.t_rel:.9g}")
        lines.append(f"r_rel_deg_per_100m = {report.r_rel:.9g}")
        lines.append(f"empty = {str(report.empty).lower()}")
        for L in sorted(report.per_length):
            t, r, n = report.per_length[L]
            lines.append(f"length_{int(L)}m = {t:.9g} {r:.9g} {n}")
    elif isinstance(report, MedianReport):
        lines.append(f"t_med_m = {report.t_med:.9g}")
        lines.append(f"r_med_deg = {report.r_med:.9g}")
    else:
        raise ConfigError(f"unknown report type {type(report).__name__}")
    Path(path).write_text("\n".join(lines) + "\n")


def emit_plot_data(pred, gt, out_path, align: bool = False):
    """Plain-text trajectory table plus a metrics sidecar.

    align left-multiplies the prediction by the rigid transform taking its
    first pose onto the ground truth's (readability only; metrics in the
    sidecar are computed on the unaligned input).
    """
    p, g = _poses_of(pred), _poses_of(gt)
    if len(p) != len(g):
        raise LengthMismatch(f"pred has {len(p)} poses, gt has {len(g)}")
    drift = kitti_drift(p, g)
    med = median_pose_errors(p, g)
    if align:
        corr = poses.compose(g[0], poses.inverse(p[0]))
        p = [poses.compose(corr, x) for x in p]
    out_path = Path(out_path)
    rows = ["# frame pred_x pred_y pred_z gt_x gt_y gt_z"]
    for i, (a, b) in enumerate(zip(p, g)):
        vals = [*a.t, *b.t]
        rows.append(str(i) + " " + " ".join(f"{v:.12e}" for v in vals))
    out_path.write_text("\n".join(rows) + "\n")

    sidecar = out_path.with_suffix(out_path.suffix + ".metrics")
    lines = [
        f"t_rel_percent = {drift.t_rel:.9g}",
        f"r_rel_deg_per_100m = {drift.r_rel:.9g}",
        f"drift_empty = {str(drift.empty).lower()}",
        f"t_med_m = {med.t_med:.9g}",
        f"r_med_deg = {med.r_med:.9g}",
    ]
    sidecar.write_text("\n".join(lines) + "\n")
    return out_path, sidecar


def read_plot_data(path):
    """Inverse of emit_plot_data's table: (frame ids, pred xyz, gt xyz)."""
    ids, pred, gt = [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        vals = line.split()
        ids.append(int(vals[0]))
        nums = [float(v) for v in vals[1:]]
        pred.append(nums[:3])
        gt.append(nums[3:])
    return ids, np.array(pred), np.array(gt)
