"""Recurrent visual-odometry network.

Four parts: a shared convolutional feature extractor applied per frame, a
recurrent relative-motion branch over consecutive frame pairs, a recurrent
global-pose branch over single frames, and a fully-connected fusion head
that merges the two branch embeddings into the final pose. Two linear heads
(3-dim translation, 4-dim raw quaternion) are shared by all modes; they read
fc1, fc2, or fc3 embeddings depending on the forward mode.

Pose vectors are raw 7-vectors [tx, ty, tz, qw, qx, qy, qz]; quaternions are
normalized downstream (losses, Pose conversion), never inside the network.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from . import poses
from .errors import ConfigError, ShapeMismatch
from .losses import MAX_K, MIN_K, PairSpec, WindowPrediction, make_pair_spec
from .quats import pose7_compose, pose7_relative

MODES = ("fused", "relative_only", "global_only")
PAIR_SOURCES = ("composed", "from_global")


@dataclass(frozen=True)
class ModelConfig:
    """Network size preset plus the knobs the presets fix.

    backbone_channels: output widths of (stem, stage2, stage3, stage4,
    stage5); stage4 width is the feature-map channel count, stage5 feeds
    the recurrent layers. stage_depths: bottleneck counts for stages 2-5.
    """

    preset: str = "full"
    k: int = 5
    image_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    backbone_channels: tuple[int, int, int, int, int] = (64, 256, 512, 1024, 1024)
    stage_depths: tuple[int, int, int, int] = (3, 4, 6, 3)
    lstm_hidden: int = 1000
    lstm_layers_relative: int = 2
    lstm_layers_global: int = 1
    fc_width: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.preset not in ("full", "tiny", "custom"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not (MIN_K <= self.k <= MAX_K):
            raise ConfigError(f"k must be in [{MIN_K}, {MAX_K}], got {self.k}")
        h, w = self.image_size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"image_size must be multiples of 32 >= 32, got {h}x{w}")
        if len(self.backbone_channels) != 5 or len(self.stage_depths) != 4:
            raise ConfigError("need 5 backbone channel widths and 4 stage depths")
        widths = (
            *self.backbone_channels,
            self.lstm_hidden,
            self.fc_width,
        )
        if min(widths) < 8:
            raise ConfigError(f"every width must be >= 8, got {widths}")
        if min(self.stage_depths) < 1:
            raise ConfigError("stage depths must be >= 1")
        if self.lstm_layers_relative < 1 or self.lstm_layers_global < 1:
            raise ConfigError("recurrent layer counts must be >= 1")

    def with_k(self, k: int) -> "ModelConfig":
        return replace(self, k=k)


def full_config(k: int = 5, seed: int = 0) -> ModelConfig:
    """Full-size preset: 50-layer-style backbone, 1000-wide recurrences."""
    return ModelConfig(preset="full", k=k, seed=seed)


def tiny_config(k: int = 5, seed: int = 0) -> ModelConfig:
    """Desk-scale preset, < 5M parameters, trainable on one CPU."""
    return ModelConfig(
        preset="tiny",
        k=k,
        image_size=(64, 64),
        backbone_channels=(16, 24, 32, 48, 64),
        stage_depths=(1, 1, 1, 1),
        lstm_hidden=96,
        lstm_layers_relative=2,
        lstm_layers_global=1,
        fc_width=96,
        seed=seed,
    )


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, each conv + batchnorm, ELU throughout."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        mid = max(cout // 4, 8)
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.act = nn.ELU()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.act(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return self.act(y + self.skip(x))


def _stage(cin: int, cout: int, depth: int, stride: int) -> nn.Sequential:
    blocks = [Bottleneck(cin, cout, stride)]
    blocks += [Bottleneck(cout, cout, 1) for _ in range(depth - 1)]
    return nn.Sequential(*blocks)


def _gap(x: torch.Tensor) -> torch.Tensor:
    return torch.flatten(nn.functional.adaptive_avg_pool2d(x, 1), 1)


class VOModel(nn.Module):
    """See module docstring. Construct via build_model for seeded init."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pair_spec: PairSpec = make_pair_spec(cfg.k)
        c = cfg.backbone_channels
        d = cfg.stage_depths

        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c[0]),
            nn.ELU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage2 = _stage(c[0], c[1], d[0], stride=1)
        self.stage3 = _stage(c[1], c[2], d[1], stride=2)
        self.stage4 = _stage(c[2], c[3], d[2], stride=2)

        self.stage5_rel = _stage(2 * c[3], c[4], d[3], stride=2)
        self.stage5_glob = _stage(c[3], c[4], d[3], stride=2)

        self.lstm_rel = nn.LSTM(
            c[4], cfg.lstm_hidden, cfg.lstm_layers_relative, batch_first=True
        )
        self.lstm_glob = nn.LSTM(
            c[4], cfg.lstm_hidden, cfg.lstm_layers_global, batch_first=True
        )
        self.fc1 = nn.Linear(cfg.lstm_hidden, cfg.fc_width)
        self.fc2 = nn.Linear(cfg.lstm_hidden, cfg.fc_width)
        # bias-free so zero embeddings propagate zeros to the heads
        self.fc3 = nn.Linear(2 * cfg.fc_width, cfg.fc_width, bias=False)
        self.act_fuse = nn.ELU()
        self.head_t = nn.Linear(cfg.fc_width, 3)
        self.head_q = nn.Linear(cfg.fc_width, 4)

        self.register_buffer("input_mean", torch.zeros(cfg.in_channels, 1, 1))
        self.register_buffer("input_std", torch.ones(cfg.in_channels, 1, 1))

    # --- normalization -------------------------------------------------

    def set_norm_stats(self, mean, std) -> None:
        mean = torch.as_tensor(mean, dtype=self.input_mean.dtype).reshape(-1, 1, 1)
        std = torch.as_tensor(std, dtype=self.input_std.dtype).reshape(-1, 1, 1)
        if mean.shape[0] != self.cfg.in_channels or std.shape[0] != self.cfg.in_channels:
            raise ShapeMismatch("norm stats must have one value per channel")
        if not bool((std > 0).all()):
            raise ConfigError("norm std must be positive")
        self.input_mean.copy_(mean)
        self.input_std.copy_(std)

    # --- submodule passes ----------------------------------------------

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, K, C, H, W) or (K, C, H, W) -> feature maps, same leading dims."""
        squeeze = images.dim() == 4
        if squeeze:
            images = images.unsqueeze(0)
        if images.dim() != 5:
            raise ShapeMismatch(f"expected 4D or 5D image tensor, got {images.dim()}D")
        b, k, ch, h, w = images.shape
        if ch != self.cfg.in_channels or (h, w) != tuple(self.cfg.image_size):
            raise ShapeMismatch(
                f"expected frames {self.cfg.in_channels}x{self.cfg.image_size[0]}"
                f"x{self.cfg.image_size[1]}, got {ch}x{h}x{w}"
            )
        x = (images.reshape(b * k, ch, h, w) - self.input_mean) / self.input_std
        x = self.stem(x)
        x = self.stage2(x)
        x = self.stage3(x)
        x = self.stage4(x)
        out = x.reshape(b, k, *x.shape[1:])
        return out[0] if squeeze else out

    def heads(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.head_t(emb), self.head_q(emb)], dim=-1)

    def relative_branch(self, feats: torch.Tensor):
        """(B, K, C, h, w) -> (pair embeddings (B, K-1, fc), adjacent (B, K-1, 7))."""
        b, k, c, h, w = feats.shape
        if k < 2:
            raise ShapeMismatch("relative branch needs at least 2 frames")
        pair_in = torch.cat([feats[:, :-1], feats[:, 1:]], dim=2)
        x = self.stage5_rel(pair_in.reshape(b * (k - 1), 2 * c, h, w))
        v = _gap(x).reshape(b, k - 1, -1)
        out, _ = self.lstm_rel(v)
        emb = self.fc1(out)
        return emb, self.heads(emb)

    def global_branch(self, feats: torch.Tensor):
        """(B, K, C, h, w) -> (frame embeddings (B, K, fc), poses (B, K, 7))."""
        b, k, c, h, w = feats.shape
        x = self.stage5_glob(feats.reshape(b * k, c, h, w))
        v = _gap(x).reshape(b, k, -1)
        out, _ = self.lstm_glob(v)
        emb = self.fc2(out)
        return emb, self.heads(emb)

    def fuse(self, rel_emb: torch.Tensor, glob_emb: torch.Tensor) -> torch.Tensor:
        """Two (..., fc_width) embeddings -> raw pose 7-vector."""
        if rel_emb.shape[-1] != self.cfg.fc_width or glob_emb.shape[-1] != self.cfg.fc_width:
            raise ShapeMismatch(
                f"fusion expects embeddings of width {self.cfg.fc_width}"
            )
        z = self.act_fuse(self.fc3(torch.cat([rel_emb, glob_emb], dim=-1)))
        return self.heads(z)

    def compose_pairs(self, adj: torch.Tensor) -> torch.Tensor:
        """Adjacent (B, K-1, 7) -> per-pair transforms (B, P, 7) in spec order.

        The (i, j) transform is the left-composition of adjacent steps
        i..j-1, so non-adjacent pairs are consistent by construction and
        gradients reach every constituent step.
        """
        cols = []
        for i, j in self.pair_spec.pairs:
            acc = adj[:, i]
            for m in range(i + 1, j):
                acc = pose7_compose(adj[:, m], acc)
            cols.append(acc)
        return torch.stack(cols, dim=1)

    def _integrate(self, adj: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
        out = [anchors]
        for i in range(adj.shape[1]):
            out.append(pose7_compose(adj[:, i], out[-1]))
        return torch.stack(out, dim=1)

    def _anchor_tensor(self, anchors, b: int, like: torch.Tensor) -> torch.Tensor:
        if anchors is None:
            e = torch.zeros(7, dtype=like.dtype, device=like.device)
            e[3] = 1.0
            return e.expand(b, 7)
        if isinstance(anchors, poses.Pose):
            anchors = anchors.as_vector()
        t = torch.as_tensor(anchors, dtype=like.dtype, device=like.device)
        if t.dim() == 1:
            t = t.expand(b, 7)
        if t.shape != (b, 7):
            raise ShapeMismatch(f"anchors must be (7,) or ({b}, 7), got {tuple(t.shape)}")
        return t

    # --- full passes -----------------------------------------------------

    def forward(
        self,
        images: torch.Tensor,
        mode: str = "fused",
        anchors=None,
        pair_source: str | None = None,
    ):
        """Window(s) of K frames -> WindowPrediction (list for batched input).

        fused: both branches + fusion head; global poses from fusion, pair
        transforms from the relative branch.
        relative_only: heads read fc1; global poses are the adjacent
        predictions integrated from `anchors` (identity if omitted).
        global_only: heads read fc2; pair transforms derived from the
        predicted globals by default, or from the relative branch with
        pair_source="composed".
        """
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}")
        if pair_source is None:
            pair_source = "from_global" if mode == "global_only" else "composed"
        if pair_source not in PAIR_SOURCES:
            raise ConfigError(f"unknown pair_source {pair_source!r}")
        if mode != "global_only" and pair_source != "composed":
            raise ConfigError(f"pair_source {pair_source!r} only applies to global_only")
        squeeze = images.dim() == 4
        if squeeze:
            images = images.unsqueeze(0)
        if images.shape[1] != self.cfg.k:
            raise ShapeMismatch(
                f"window length {images.shape[1]} != configured K={self.cfg.k}"
            )
        feats = self.extract_features(images)
        b = feats.shape[0]

        if mode == "fused":
            rel_emb, adj = self.relative_branch(feats)
            pred_pairs = self.compose_pairs(adj)
            glob_emb, _ = self.global_branch(feats)
            rel_pad = torch.cat([torch.zeros_like(rel_emb[:, :1]), rel_emb], dim=1)
            pred_global = self.fuse(rel_pad, glob_emb)
        elif mode == "relative_only":
            _, adj = self.relative_branch(feats)
            pred_pairs = self.compose_pairs(adj)
            anchors_t = self._anchor_tensor(anchors, b, adj)
            pred_global = self._integrate(adj, anchors_t)
        else:  # global_only
            _, pred_global = self.global_branch(feats)
            if pair_source == "from_global":
                pred_pairs = torch.stack(
                    [
                        pose7_relative(pred_global[:, i], pred_global[:, j])
                        for i, j in self.pair_spec.pairs
                    ],
                    dim=1,
                )
            else:
                _, adj = self.relative_branch(feats)
                pred_pairs = self.compose_pairs(adj)

        out = [
            WindowPrediction(
                pred_global=pred_global[i], pred_pairs=pred_pairs[i], mode=mode
            )
            for i in range(b)
        ]
        return out[0] if squeeze else out


# --- construction and bookkeeping ----------------------------------------

BLOCK_PREFIXES = {
    "features": ("stem", "stage2", "stage3", "stage4"),
    "relative": ("stage5_rel", "lstm_rel", "fc1"),
    "global": ("stage5_glob", "lstm_glob", "fc2"),
    "fusion": ("fc3",),
    "heads": ("head_t", "head_q"),
}


def build_model(cfg: ModelConfig) -> VOModel:
    """Seeded construction; head init keeps raw quaternions near identity."""
    torch.manual_seed(cfg.seed)
    model = VOModel(cfg)
    with torch.no_grad():
        model.head_t.weight.mul_(0.01)
        model.head_t.bias.zero_()
        model.head_q.weight.mul_(0.01)
        model.head_q.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))
    return model


def block_parameters(model: VOModel, block: str) -> Iterator[tuple[str, nn.Parameter]]:
    prefixes = BLOCK_PREFIXES[block]
    for name, p in model.named_parameters():
        if name.split(".", 1)[0] in prefixes:
            yield name, p


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(
        p.numel()
        for p in model.parameters()
        if p.requires_grad or not trainable_only
    )


def predict_window(model: VOModel, frames: torch.Tensor, mode: str = "fused", anchor=None):
    """Inference helper: canonical Pose lists (globals, pairs) for one window.

    Conversion canonicalizes every quaternion, so a collapsed all-zero
    head output raises DegenerateQuaternion instead of passing through.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            wp = model(frames, mode=mode, anchors=anchor)
    finally:
        model.train(was_training)
    glob = [poses.Pose.from_vector(v.double().numpy()) for v in wp.pred_global]
    pairs = [poses.Pose.from_vector(v.double().numpy()) for v in wp.pred_pairs]
    return glob, pairs
