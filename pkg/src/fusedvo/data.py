"""Sequence ingestion, synthetic desk-scale sequences, and window slicing.

Three sources share one SequenceRecord shape: road-style sequences with a
single 12-number pose line per frame, indoor sequences with one 4x4 pose
file per frame, and procedurally generated sequences whose frames render a
fixed world texture under the ground-truth camera motion. Absolute poses
are camera-to-world throughout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from . import poses
from .errors import (
    ConfigError,
    LengthMismatch,
    MissingFile,
    PoseParseError,
    SequenceTooShort,
)
from .losses import PairSpec, WindowTarget

KITTI_TRAIN = ("00", "02", "08", "09")
KITTI_TEST = ("03", "04", "05", "06", "07", "10")

KITTI_FPS = 10.0
SEVENSCENES_FPS = 30.0


@dataclass
class SequenceRecord:
    """One image sequence with aligned ground truth.

    frames: file paths (str) or in-memory arrays (H, W, 3) float32 in [0, 1].
    """

    id: str
    frames: list
    gt: list
    fps: float
    source: str

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise LengthMismatch(
                f"{self.id}: {len(self.frames)} frames vs {len(self.gt)} poses"
            )
        if self.source not in ("kitti", "sevenscenes", "synthetic"):
            raise ConfigError(f"unknown source {self.source!r}")

    def __len__(self):
        return len(self.frames)


def subsequence(record: SequenceRecord, start: int, stop: int, tag: str | None = None) -> SequenceRecord:
    """Contiguous frame slice [start, stop) as its own record."""
    if not (0 <= start < stop <= len(record)):
        raise ConfigError(
            f"{record.id}: slice [{start}, {stop}) outside 0..{len(record)}"
        )
    return SequenceRecord(
        id=f"{record.id}[{start}:{stop}]" if tag is None else tag,
        frames=record.frames[start:stop],
        gt=record.gt[start:stop],
        fps=record.fps,
        source=record.source,
    )


# --- pose file round trips -------------------------------------------------


def read_kitti_poses(path) -> list:
    """One pose per line, 12 floats, row-major 3x4 camera-to-world."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"pose file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise PoseParseError(
                f"{path}:{lineno}: expected 12 values, got {len(tokens)}"
            )
        try:
            vals = np.array([float(t) for t in tokens], dtype=np.float64)
        except ValueError as e:
            raise PoseParseError(f"{path}:{lineno}: {e}") from e
        out.append(poses.from_matrix(vals.reshape(3, 4)))
    return out


def write_kitti_poses(path, pose_list: Sequence) -> None:
    lines = []
    for p in pose_list:
        m = poses.to_matrix(p)
        lines.append(" ".join(f"{v:.12e}" for v in m.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sevenscenes_pose(path) -> "poses.Pose":
    """One 4x4 homogeneous matrix, 4 lines of 4 floats."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"pose file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 4:
            raise PoseParseError(
                f"{path}:{lineno}: expected 4 values, got {len(tokens)}"
            )
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as e:
            raise PoseParseError(f"{path}:{lineno}: {e}") from e
    if len(rows) != 4:
        raise PoseParseError(f"{path}: expected 4 rows, got {len(rows)}")
    return poses.from_matrix(np.array(rows, dtype=np.float64))


def write_sevenscenes_pose(path, pose) -> None:
    m = np.eye(4)
    m[:3, :4] = poses.to_matrix(pose)
    Path(path).write_text(
        "\n".join(" ".join(f"{v:.12e}" for v in row) for row in m) + "\n"
    )


# --- dataset loaders ---------------------------------------------------------


def load_kitti_sequence(root, seq_id: str) -> SequenceRecord:
    root = Path(root)
    img_dir = root / "sequences" / seq_id / "image_2"
    pose_file = root / "poses" / f"{seq_id}.txt"
    if not img_dir.is_dir():
        raise MissingFile(f"image directory not found: {img_dir}")
    frames = sorted(str(p) for p in img_dir.glob("*.png"))
    if not frames:
        raise MissingFile(f"no frames in {img_dir}")
    gt = read_kitti_poses(pose_file)
    return SequenceRecord(
        id=f"kitti-{seq_id}", frames=frames, gt=gt, fps=KITTI_FPS, source="kitti"
    )


def load_sevenscenes_sequence(root, scene: str, seq_id: str) -> SequenceRecord:
    seq_dir = Path(root) / scene / seq_id
    if not seq_dir.is_dir():
        raise MissingFile(f"sequence directory not found: {seq_dir}")
    pose_files = sorted(seq_dir.glob("frame-*.pose.txt"))
    color_files = sorted(seq_dir.glob("frame-*.color.png"))
    if not pose_files:
        raise MissingFile(f"no pose files in {seq_dir}")
    if len(pose_files) != len(color_files):
        raise LengthMismatch(
            f"{seq_dir}: {len(color_files)} color frames vs {len(pose_files)} poses"
        )
    gt = [read_sevenscenes_pose(p) for p in pose_files]
    return SequenceRecord(
        id=f"7scenes-{scene}-{seq_id}",
        frames=[str(p) for p in color_files],
        gt=gt,
        fps=SEVENSCENES_FPS,
        source="sevenscenes",
    )


# --- synthetic sequences -----------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    """Planar constant-curvature-segment trajectory over a textured ground.

    Speeds in m/s, yaw rates in deg/s; a segment holds both constant for
    segment_frames frames. vert_amp adds a vertical sinusoid in meters.
    noise is the per-pixel additive sigma (resampled deterministically from
    the frame's pose, so identical poses render identical frames).
    """

    n_frames: int = 256
    fps: float = 10.0
    speed_range: tuple[float, float] = (12.0, 18.0)
    yaw_rate_range: tuple[float, float] = (6.0, 18.0)
    vert_amp: float = 0.0
    noise: float = 0.01
    image_size: tuple[int, int] = (64, 64)
    meters_per_pixel: float = 0.5
    segment_frames: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        for name in ("speed_range", "yaw_rate_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi")
        if self.vert_amp < 0 or self.noise < 0:
            raise ConfigError("vert_amp and noise must be nonnegative")
        if self.fps <= 0 or self.meters_per_pixel <= 0 or self.segment_frames < 1:
            raise ConfigError("fps, meters_per_pixel, segment_frames must be positive")


# texture wavelengths in meters: two ultra-low components make absolute
# position readable, the rest carry local motion parallax
_WAVELENGTHS = (384.0, 256.0, 48.0, 32.0, 16.0, 8.0, 4.0, 2.7)
_AMPLITUDES = (0.5, 0.5, 0.3, 0.3, 0.25, 0.2, 0.15, 0.1)
_VERT_PERIOD_FRAMES = 80.0


def _texture_components(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
    comps = []
    for lam, amp in zip(_WAVELENGTHS, _AMPLITUDES):
        angle = rng.uniform(0, 2 * np.pi)
        kx = np.cos(angle) * 2 * np.pi / lam
        kz = np.sin(angle) * 2 * np.pi / lam
        phases = rng.uniform(0, 2 * np.pi, size=3)
        comps.append((kx, kz, amp, phases))
    return comps


def _render_frame(x: np.ndarray, z: np.ndarray, comps) -> np.ndarray:
    h, w = x.shape
    out = np.zeros((h, w, 3), dtype=np.float64)
    for kx, kz, amp, phases in comps:
        arg = kx * x + kz * z
        for ch in range(3):
            out[..., ch] += amp * np.sin(arg + phases[ch])
    total = sum(_AMPLITUDES)
    return (0.5 + 0.35 * out / total).astype(np.float32)


def _frame_noise_rng(seed: int, pose) -> np.random.Generator:
    key = np.round(pose.as_vector(), 9).tobytes()
    digest = hashlib.sha256(np.int64(seed).tobytes() + key).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def synth_trajectory(p: SynthParams) -> list:
    """Ground-truth camera-to-world poses only (no rendering)."""
    rng = np.random.default_rng(np.random.SeedSequence([p.seed, 0x7261]))
    dt = 1.0 / p.fps
    n_segments = -(-p.n_frames // p.segment_frames)
    speeds = rng.uniform(*p.speed_range, size=n_segments)
    yaw_rates = np.radians(rng.uniform(*p.yaw_rate_range, size=n_segments))
    # random turn direction per segment keeps the path wandering
    yaw_rates *= rng.choice((-1.0, 1.0), size=n_segments)

    out = []
    theta = 0.0
    pos = np.zeros(3)
    for i in range(p.n_frames):
        y = p.vert_amp * np.sin(2 * np.pi * i / _VERT_PERIOD_FRAMES)
        t = pos + np.array([0.0, y, 0.0])
        q = np.array([np.cos(theta / 2), 0.0, np.sin(theta / 2), 0.0])
        out.append(poses.Pose(q=poses.canonicalize(q), t=t))
        seg = i // p.segment_frames
        forward = np.array([np.sin(theta), 0.0, np.cos(theta)])
        pos = pos + speeds[seg] * dt * forward
        theta = theta + yaw_rates[seg] * dt
    return out


def synth_sequence(p: SynthParams) -> SequenceRecord:
    """Deterministic per seed; frames are top-down views of a fixed texture
    field translated by position and rotated by heading."""
    gt = synth_trajectory(p)
    comps = _texture_components(p.seed)
    h, w = p.image_size
    mpp = p.meters_per_pixel
    cols = (np.arange(w) - (w - 1) / 2.0) * mpp
    rows = ((h - 1) / 2.0 - np.arange(h)) * mpp
    u, v = np.meshgrid(cols, rows)  # u right, v forward in camera plane

    frames = []
    for pose in gt:
        sin_t = 2.0 * pose.q[0] * pose.q[2]
        cos_t = 1.0 - 2.0 * pose.q[2] ** 2
        x = pose.t[0] + u * cos_t + v * sin_t
        z = pose.t[2] - u * sin_t + v * cos_t
        frame = _render_frame(x, z, comps)
        if p.noise > 0:
            nrng = _frame_noise_rng(p.seed, pose)
            frame = frame + nrng.normal(scale=p.noise, size=frame.shape).astype(
                np.float32
            )
        frames.append(np.clip(frame, 0.0, 1.0))
    return SequenceRecord(
        id=f"synth-{p.seed}", frames=frames, gt=gt, fps=p.fps, source="synthetic"
    )


def save_manifest(path, p: SynthParams) -> None:
    doc = {"format": "synth-manifest-v1", "params": asdict(p)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> SynthParams:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "synth-manifest-v1":
        raise ConfigError(f"{path}: unknown manifest format {doc.get('format')!r}")
    params = doc["params"]
    for key in ("speed_range", "yaw_rate_range", "image_size"):
        params[key] = tuple(params[key])
    return SynthParams(**params)


# --- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class FrameWindow:
    """K consecutive frames of one record, by reference."""

    record: SequenceRecord
    start: int
    k: int

    @property
    def indices(self) -> range:
        return range(self.start, self.start + self.k)

    @property
    def window_id(self) -> str:
        return f"{self.record.id}[{self.start}:{self.start + self.k}]"


def window_count(n_frames: int, k: int, stride: int) -> int:
    return (n_frames - k) // stride + 1


def window_iter(
    seq: SequenceRecord, k: int, stride: int, spec: PairSpec
) -> Iterator[tuple[FrameWindow, WindowTarget]]:
    """Windows at starts 0, stride, 2*stride, ... with pose targets."""
    if spec.k != k:
        raise ConfigError(f"pair spec is for k={spec.k}, window k={k}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if len(seq) < k:
        raise SequenceTooShort(f"{seq.id}: {len(seq)} frames < K={k}")
    for start in range(0, len(seq) - k + 1, stride):
        window = FrameWindow(record=seq, start=start, k=k)
        target = WindowTarget.from_global(seq.gt[start : start + k], spec)
        if __debug__:
            assert target.consistent(spec, atol=1e-9), window.window_id
        yield window, target


def _load_frame(ref, image_size) -> np.ndarray:
    if isinstance(ref, np.ndarray):
        arr = ref
        if arr.shape[:2] != tuple(image_size):
            img = Image.fromarray((arr * 255).astype(np.uint8))
            arr = np.asarray(
                img.resize((image_size[1], image_size[0]), Image.BILINEAR),
                dtype=np.float32,
            ) / 255.0
        return arr.astype(np.float32)
    path = Path(ref)
    if not path.is_file():
        raise MissingFile(f"frame not found: {path}")
    img = Image.open(path).convert("RGB")
    if img.size != (image_size[1], image_size[0]):
        img = img.resize((image_size[1], image_size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def materialize_window(window: FrameWindow, image_size) -> torch.Tensor:
    """(K, 3, H, W) float32 tensor in [0, 1]."""
    frames = [
        _load_frame(window.record.frames[i], image_size) for i in window.indices
    ]
    stack = np.stack(frames).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(stack))


def compute_norm_stats(seq: SequenceRecord, image_size, max_frames: int = 64):
    """Per-channel mean/std over an evenly spaced frame sample."""
    n = len(seq)
    idx = np.unique(np.linspace(0, n - 1, min(n, max_frames)).astype(int))
    acc = []
    for i in idx:
        acc.append(_load_frame(seq.frames[i], image_size).reshape(-1, 3))
    pixels = np.concatenate(acc)
    mean = pixels.mean(axis=0)
    std = pixels.std(axis=0)
    std = np.maximum(std, 1e-3)
    return mean.astype(np.float64), std.astype(np.float64)
