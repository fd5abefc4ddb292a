"""Three-stage training: relative pretraining, per-scene global pretraining,
end-to-end refinement.

Stage 1 trains the feature extractor, the relative branch, and the shared
pose heads on the pairwise loss. Stage 2 freezes everything trained in
stage 1 (batchnorm statistics included) and fits the global branch plus
heads to one scene, saving the result as that scene's registry entry.
Stage 3 assembles both checkpoints and refines all parameters jointly in
fused mode.

Every run is deterministic given its seed, and checkpoints carry enough
state (optimizer moments, shuffle generator, RNG) that interrupt-and-resume
reproduces the uninterrupted loss curve exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SequenceRecord, compute_norm_stats, materialize_window, window_iter
from .errors import (
    CheckpointMismatch,
    ConfigError,
    DegenerateQuaternion,
    NonFiniteLoss,
    SceneCollision,
    UnknownScene,
)
from .losses import LossWeights, global_mse_sum, joint_loss, relative_loss
from .model import BLOCK_PREFIXES, ModelConfig, VOModel, build_model, tiny_config

FORMAT_VERSION = 1

STAGES = ("relative_pretrain", "global_pretrain", "end_to_end")


def _same_architecture(a: ModelConfig, b: ModelConfig) -> bool:
    """Config equality up to labels: seed and preset name don't change shapes."""
    da, db = asdict(a), asdict(b)
    for key in ("seed", "preset"):
        da.pop(key), db.pop(key)
    return da == db

# parameter blocks saved per scene by stage 2 (the scene's "landmark")
SCENE_BLOCKS = ("global", "heads")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 8
    lr0: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    total_iterations: int | None = None
    grad_clip: float = 10.0
    window_stride: int = 1
    beta_rot: float = 1.0
    lambda_global: float = 1.0
    scene_id: str | None = None
    pair_source: str = "from_global"
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must be in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.window_stride < 1:
            raise ConfigError("batch_size and window_stride must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")
        if self.stage == "global_pretrain" and not self.scene_id:
            raise ConfigError("global_pretrain requires scene_id")

    def weights(self) -> LossWeights:
        return LossWeights(beta_rot=self.beta_rot, lambda_global=self.lambda_global)


def lr_schedule(iteration: int, cfg: TrainConfig, total: int | None = None) -> float:
    """lr0 halved at every fifth of the run: five plateaus, floor rounding."""
    total = total if total is not None else cfg.total_iterations
    if total is None or total < 1:
        raise ConfigError("total iteration count required for the schedule")
    if not (0 <= iteration < total):
        raise ConfigError(f"iteration {iteration} outside [0, {total})")
    return cfg.lr0 * 2.0 ** (-(5 * iteration // total))


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path,
    model: VOModel,
    optimizer=None,
    train_config: TrainConfig | None = None,
    epoch: int = 0,
    iteration: int = 0,
    loss_history: list | None = None,
    shuffle_state: torch.Tensor | None = None,
    extra: dict | None = None,
) -> Path:
    doc = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "train_config": asdict(train_config) if train_config is not None else None,
        "epoch": epoch,
        "iteration": iteration,
        "loss_history": loss_history or [],
        "torch_rng": torch.get_rng_state(),
        "shuffle_state": shuffle_state,
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(doc, path)
    return path


def load_checkpoint(path, expect: ModelConfig | None = None) -> dict:
    doc = torch.load(Path(path), weights_only=False)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointMismatch(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    cfg = ModelConfig(**doc["model_config"])
    if expect is not None and cfg != expect:
        raise CheckpointMismatch(
            f"{path}: checkpoint config {cfg} != expected {expect}"
        )
    doc["model_config"] = cfg
    return doc


def model_from_checkpoint(doc: dict) -> VOModel:
    model = VOModel(doc["model_config"])
    model.load_state_dict(doc["state_dict"])
    return model


# --- scene registry -----------------------------------------------------------


class SceneRegistry:
    """Per-scene global-branch parameter blocks, one file per scene."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, scene_id: str) -> Path:
        if not scene_id or "/" in scene_id:
            raise ConfigError(f"bad scene id {scene_id!r}")
        return self.root / f"{scene_id}.pt"

    def scenes(self) -> list:
        return sorted(p.stem for p in self.root.glob("*.pt"))

    def save(self, scene_id: str, model: VOModel, overwrite: bool = False) -> Path:
        path = self._path(scene_id)
        if path.exists() and not overwrite:
            raise SceneCollision(
                f"scene {scene_id!r} already registered at {path}; "
                "pass overwrite to replace it"
            )
        prefixes = tuple(
            p for block in SCENE_BLOCKS for p in BLOCK_PREFIXES[block]
        )
        blocks = {
            k: v
            for k, v in model.state_dict().items()
            if k.split(".", 1)[0] in prefixes or k in ("input_mean", "input_std")
        }
        torch.save(
            {
                "format_version": FORMAT_VERSION,
                "model_config": asdict(model.cfg),
                "blocks": blocks,
            },
            path,
        )
        return path

    def load_into(self, scene_id: str, model: VOModel) -> None:
        path = self._path(scene_id)
        if not path.exists():
            raise UnknownScene(
                f"scene {scene_id!r} not in registry {self.root} "
                f"(known: {self.scenes()})"
            )
        doc = torch.load(path, weights_only=False)
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointMismatch(f"{path}: unsupported registry format")
        cfg = ModelConfig(**doc["model_config"])
        if not _same_architecture(cfg, model.cfg):
            raise CheckpointMismatch(
                f"{path}: scene entry config {cfg} != model config {model.cfg}"
            )
        missing = model.load_state_dict(doc["blocks"], strict=False)
        if missing.unexpected_keys:
            raise CheckpointMismatch(
                f"{path}: unexpected keys {missing.unexpected_keys}"
            )


# --- training loop -------------------------------------------------------------


def _trainable_blocks(stage: str) -> tuple:
    if stage == "relative_pretrain":
        return ("features", "relative", "heads")
    if stage == "global_pretrain":
        return ("global", "heads")
    return ("features", "relative", "global", "fusion", "heads")


def _stage_mode(stage: str) -> str:
    return {
        "relative_pretrain": "relative_only",
        "global_pretrain": "global_only",
        "end_to_end": "fused",
    }[stage]


def _apply_freeze(model: VOModel, trainable: tuple) -> tuple:
    params = []
    frozen_modules = []
    trainable_prefixes = tuple(
        p for block in trainable for p in BLOCK_PREFIXES[block]
    )
    for name, p in model.named_parameters():
        if name.split(".", 1)[0] in trainable_prefixes:
            p.requires_grad_(True)
            params.append(p)
        else:
            p.requires_grad_(False)
    for block, prefixes in BLOCK_PREFIXES.items():
        if block not in trainable:
            frozen_modules += [getattr(model, attr) for attr in prefixes]
    return params, frozen_modules


def _set_train_state(model: VOModel, frozen_modules: list) -> None:
    """train() everywhere except frozen submodules, which stay in eval so
    their batchnorm statistics never move."""
    model.train()
    for m in frozen_modules:
        m.eval()


def _batch_loss(preds, targets, cfg: TrainConfig, stage: str, spec):
    w = cfg.weights()
    batch = list(zip(preds, targets))
    if stage == "relative_pretrain":
        ctc = relative_loss(batch, spec, w)
        return ctc, float(ctc.detach()), float("nan")
    total = joint_loss(batch, spec, w)
    with torch.no_grad():
        ctc_term = float(relative_loss(batch, spec, w))
        glob_term = float(
            torch.stack([global_mse_sum(p, t, w) for p, t in batch]).mean()
        )
    return total, ctc_term, glob_term


def _format_log(it, lr, ctc, glob, wall) -> str:
    return (
        f"iter={it} lr={lr:.9g} ctc={ctc:.9g} global={glob:.9g} wall={wall:.3f}"
    )


def run_stage(
    model: VOModel,
    record: SequenceRecord,
    cfg: TrainConfig,
    out_path=None,
    log_stream=None,
    resume: dict | None = None,
    checkpoint_every: int | None = None,
) -> dict:
    """One training stage over one sequence; returns the checkpoint document.

    resume: a checkpoint document from an interrupted run of the same stage;
    training continues from its epoch with all RNG and optimizer state
    restored, reproducing the uninterrupted run exactly.
    """
    stage = cfg.stage
    mode = _stage_mode(stage)
    spec = model.pair_spec
    windows = list(window_iter(record, model.cfg.k, cfg.window_stride, spec))
    n_batches = math.ceil(len(windows) / cfg.batch_size)
    total = (
        cfg.total_iterations
        if cfg.total_iterations is not None
        else max(cfg.epochs * n_batches, 1)
    )

    params, frozen_modules = _apply_freeze(model, _trainable_blocks(stage))
    optimizer = torch.optim.Adam(
        params, lr=cfg.lr0, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    shuffle = torch.Generator()
    history: list = []
    start_epoch = 0
    it = 0
    initial_loss = None

    if resume is not None:
        saved_stage = (resume.get("train_config") or {}).get("stage")
        if saved_stage != stage:
            raise CheckpointMismatch(
                f"resume checkpoint is for stage {saved_stage!r}, not {stage!r}"
            )
        model.load_state_dict(resume["state_dict"])
        optimizer.load_state_dict(resume["optimizer_state"])
        shuffle.set_state(resume["shuffle_state"])
        torch.set_rng_state(resume["torch_rng"])
        history = list(resume["loss_history"])
        start_epoch = resume["epoch"]
        it = resume["iteration"]
        initial_loss = resume.get("initial_loss")
    else:
        torch.manual_seed(cfg.seed + 1)
        shuffle.manual_seed(cfg.seed)

    # cache: every epoch revisits the same window tensors
    tensors = [
        materialize_window(w, model.cfg.image_size) for w, _ in windows
    ]
    targets_all = [t for _, t in windows]

    if stage == "end_to_end" and resume is None:
        initial_loss = evaluate_loss(model, record, cfg)

    for epoch in range(start_epoch, cfg.epochs):
        order = torch.randperm(len(windows), generator=shuffle).tolist()
        _set_train_state(model, frozen_modules)
        for b in range(n_batches):
            t0 = time.monotonic()
            idxs = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = lr_schedule(min(it, total - 1), cfg, total)
            for group in optimizer.param_groups:
                group["lr"] = lr
            frames = torch.stack([tensors[i] for i in idxs])
            targets = [targets_all[i] for i in idxs]
            try:
                preds = model(frames, mode=mode, pair_source=_pair_source(cfg, mode))
                loss, ctc_term, glob_term = _batch_loss(preds, targets, cfg, stage, spec)
                finite = bool(torch.isfinite(loss))
            except DegenerateQuaternion:
                finite = False
            if not finite:
                raise NonFiniteLoss(
                    f"non-finite loss at iteration {it} (lr={lr:.3g})",
                    iteration=it,
                    lr=lr,
                    window_ids=[windows[i][0].window_id for i in idxs],
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            wall = time.monotonic() - t0
            entry = {
                "iteration": it,
                "epoch": epoch,
                "lr": lr,
                "loss": float(loss.detach()),
                "ctc": ctc_term,
                "global": glob_term,
                "wall": wall,
            }
            history.append(entry)
            if log_stream is not None:
                log_stream.write(_format_log(it, lr, ctc_term, glob_term, wall) + "\n")
            it += 1
        if (
            out_path is not None
            and checkpoint_every
            and (epoch + 1) % checkpoint_every == 0
            and epoch + 1 < cfg.epochs
        ):
            save_checkpoint(
                out_path,
                model,
                optimizer,
                cfg,
                epoch=epoch + 1,
                iteration=it,
                loss_history=history,
                shuffle_state=shuffle.get_state(),
                extra=(
                    {"initial_loss": initial_loss}
                    if initial_loss is not None
                    else None
                ),
            )

    doc = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "train_config": asdict(cfg),
        "epoch": cfg.epochs,
        "iteration": it,
        "loss_history": history,
        "torch_rng": torch.get_rng_state(),
        "shuffle_state": shuffle.get_state(),
    }
    if initial_loss is not None:
        doc["initial_loss"] = initial_loss
    if out_path is not None:
        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(doc, path)
    doc["model_config"] = model.cfg
    return doc


def _pair_source(cfg: TrainConfig, mode: str) -> str | None:
    if mode == "global_only":
        return cfg.pair_source
    return None


def evaluate_loss(model: VOModel, record: SequenceRecord, cfg: TrainConfig) -> float:
    """Mean joint loss over all windows, eval mode, no gradient."""
    spec = model.pair_spec
    was_training = model.training
    model.eval()
    mode = _stage_mode(cfg.stage)
    try:
        totals = []
        with torch.no_grad():
            for window, target in window_iter(
                record, model.cfg.k, cfg.window_stride, spec
            ):
                frames = materialize_window(window, model.cfg.image_size)
                pred = model(frames, mode=mode, pair_source=_pair_source(cfg, mode))
                totals.append(float(joint_loss([(pred, target)], spec, cfg.weights())))
        return float(np.mean(totals))
    finally:
        model.train(was_training)


# --- stage entry points ---------------------------------------------------------


def pretrain_relative(
    cfg: TrainConfig,
    record: SequenceRecord,
    model_cfg: ModelConfig,
    out_path=None,
    log_stream=None,
    resume: dict | None = None,
) -> dict:
    """Stage 1: feature extractor + relative branch + heads, pairwise loss."""
    if cfg.stage != "relative_pretrain":
        raise ConfigError(f"expected stage relative_pretrain, got {cfg.stage}")
    model = build_model(model_cfg)
    mean, std = compute_norm_stats(record, model_cfg.image_size)
    model.set_norm_stats(mean, std)
    return run_stage(model, record, cfg, out_path, log_stream, resume=resume)


def pretrain_global(
    cfg: TrainConfig,
    record: SequenceRecord,
    base_checkpoint: dict,
    registry: SceneRegistry,
    out_path=None,
    log_stream=None,
    overwrite: bool = False,
) -> dict:
    """Stage 2: freeze stage-1 blocks, train global branch + heads on one
    scene, write the registry entry under cfg.scene_id."""
    if cfg.stage != "global_pretrain":
        raise ConfigError(f"expected stage global_pretrain, got {cfg.stage}")
    model = model_from_checkpoint(base_checkpoint)
    # per-scene normalization, stored with the entry
    mean, std = compute_norm_stats(record, model.cfg.image_size)
    model.set_norm_stats(mean, std)
    doc = run_stage(model, record, cfg, out_path=out_path, log_stream=log_stream)
    registry.save(cfg.scene_id, model, overwrite=overwrite)
    doc["scene_id"] = cfg.scene_id
    return doc


def finetune_end_to_end(
    cfg: TrainConfig,
    record: SequenceRecord,
    base_checkpoint: dict,
    registry: SceneRegistry,
    scene_id: str,
    out_path=None,
    log_stream=None,
    resume: dict | None = None,
) -> dict:
    """Stage 3: assemble stage-1 weights + the scene's registry entry, then
    refine everything in fused mode. The returned document carries
    initial_loss, the pre-training joint loss of the assembled model."""
    if cfg.stage != "end_to_end":
        raise ConfigError(f"expected stage end_to_end, got {cfg.stage}")
    model = model_from_checkpoint(base_checkpoint)
    registry.load_into(scene_id, model)
    return run_stage(model, record, cfg, out_path, log_stream, resume=resume)


# --- pipeline harness (ablations, smoke runs) -------------------------------------


def run_pipeline_for_mode(mode: str, k: int, train_record: SequenceRecord, budget) -> VOModel:
    """Train the stages a mode needs under an AblationBudget; returns the model.

    relative_only: stage 1. global_only: stages 1-2. fused: all three.
    """
    import tempfile

    model_cfg = tiny_config(k=k, seed=budget.seed)
    stage1 = TrainConfig(
        stage="relative_pretrain",
        epochs=budget.epochs_relative,
        batch_size=budget.batch_size,
        lr0=budget.lr0,
        window_stride=budget.window_stride,
        seed=budget.seed,
    )
    doc1 = pretrain_relative(stage1, train_record, model_cfg)
    if mode == "relative_only":
        return model_from_checkpoint(doc1)

    with tempfile.TemporaryDirectory() as tmp:
        registry = SceneRegistry(tmp)
        stage2 = TrainConfig(
            stage="global_pretrain",
            epochs=budget.epochs_global,
            batch_size=budget.batch_size,
            lr0=budget.lr0,
            window_stride=budget.window_stride,
            scene_id="scene",
            seed=budget.seed,
        )
        doc2 = pretrain_global(stage2, train_record, doc1, registry)
        if mode == "global_only":
            return model_from_checkpoint(doc2)
        stage3 = TrainConfig(
            stage="end_to_end",
            epochs=budget.epochs_joint,
            batch_size=budget.batch_size,
            lr0=budget.lr0,
            window_stride=budget.window_stride,
            seed=budget.seed,
        )
        doc3 = finetune_end_to_end(
            stage3, train_record, doc1, registry, "scene"
        )
        return model_from_checkpoint(doc3)
