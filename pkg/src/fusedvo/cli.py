"""Batch entry points: sequence synthesis, the three training stages,
evaluation, ablation sweeps, and plot-data emission.

One command per process. Configuration precedence, lowest to highest:
built-in defaults, then `key = value` lines from --config, then flags.
Unknown commands and unknown flags are usage errors (exit 1); unknown
config keys and bad values are config errors (exit 2); a numerical abort
during training exits 3. Every command writes into a fresh run directory
{out}/{timestamp}-seed{seed} (or {out}/{run-name}) holding a config
snapshot plus the command's outputs.

The FUSEDVO_DATA_ROOT environment variable supplies the default root for
relative dataset paths and kitti:/7scenes: specs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import metrics, training
from .data import (
    SynthParams,
    load_kitti_sequence,
    load_manifest,
    load_sevenscenes_sequence,
    read_kitti_poses,
    save_manifest,
    synth_sequence,
    synth_trajectory,
    write_kitti_poses,
)
from .errors import ConfigError, FusedVOError, NonFiniteLoss, UsageError
from .model import full_config, tiny_config

DATA_ROOT_VAR = "FUSEDVO_DATA_ROOT"

COMMANDS = ("synth", "pretrain-rel", "pretrain-glob", "finetune", "eval", "ablate", "plot")

_TRAIN_KEYS = {
    "data": str,
    "preset": str,
    "k": int,
    "epochs": int,
    "batch_size": int,
    "lr0": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "total_iterations": int,
    "grad_clip": float,
    "window_stride": int,
    "beta_rot": float,
    "lambda_global": float,
    "seed": int,
}

# documented keys per command; config files and flags draw from the same table
KEY_TABLE = {
    "synth": {
        "n_frames": int,
        "fps": float,
        "speed_min": float,
        "speed_max": float,
        "yaw_min": float,
        "yaw_max": float,
        "vert_amp": float,
        "noise": float,
        "image_h": int,
        "image_w": int,
        "meters_per_pixel": float,
        "segment_frames": int,
        "seed": int,
    },
    "pretrain-rel": dict(_TRAIN_KEYS),
    "pretrain-glob": {
        **_TRAIN_KEYS,
        "base": str,
        "registry": str,
        "scene": str,
        "pair_source": str,
        "overwrite_scene": bool,
    },
    "finetune": {**_TRAIN_KEYS, "base": str, "registry": str, "scene": str},
    "eval": {
        "checkpoint": str,
        "data": str,
        "mode": str,
        "pred_poses": str,
        "gt_poses": str,
        "seed": int,
    },
    "ablate": {
        "data": str,
        "eval_data": str,
        "modes": str,
        "ks": str,
        "epochs_relative": int,
        "epochs_global": int,
        "epochs_joint": int,
        "batch_size": int,
        "lr0": float,
        "window_stride": int,
        "seed": int,
    },
    "plot": {"pred_poses": str, "gt_poses": str, "align": bool, "seed": int},
}

DEFAULTS = {
    "synth": {
        "n_frames": 256,
        "fps": 10.0,
        "speed_min": 12.0,
        "speed_max": 18.0,
        "yaw_min": 6.0,
        "yaw_max": 18.0,
        "vert_amp": 0.0,
        "noise": 0.01,
        "image_h": 64,
        "image_w": 64,
        "meters_per_pixel": 0.5,
        "segment_frames": 32,
        "seed": 0,
    },
    "pretrain-rel": {
        "data": None,
        "preset": "tiny",
        "k": 5,
        "epochs": 1,
        "batch_size": 8,
        "lr0": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "total_iterations": None,
        "grad_clip": 10.0,
        "window_stride": 1,
        "beta_rot": 1.0,
        "lambda_global": 1.0,
        "seed": 0,
    },
    "eval": {
        "checkpoint": None,
        "data": None,
        "mode": "fused",
        "pred_poses": None,
        "gt_poses": None,
        "seed": 0,
    },
    "ablate": {
        "data": None,
        "eval_data": None,
        "modes": "fused",
        "ks": "2,3,5",
        "epochs_relative": 4,
        "epochs_global": 4,
        "epochs_joint": 4,
        "batch_size": 8,
        "lr0": 1e-3,
        "window_stride": 2,
        "seed": 0,
    },
    "plot": {"pred_poses": None, "gt_poses": None, "align": False, "seed": 0},
}
DEFAULTS["pretrain-glob"] = {
    **DEFAULTS["pretrain-rel"],
    "base": None,
    "registry": None,
    "scene": None,
    "pair_source": "from_global",
    "overwrite_scene": False,
}
DEFAULTS["finetune"] = {
    **DEFAULTS["pretrain-rel"],
    "base": None,
    "registry": None,
    "scene": None,
}


# --- config plumbing ---------------------------------------------------------


def _parse_value(command: str, key: str, raw):
    table = KEY_TABLE[command]
    if key not in table:
        raise ConfigError(f"unknown config key {key!r} for command {command}")
    if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "null")):
        return None
    kind = table[key]
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"config key {key}: expected {kind.__name__}, got {raw!r}"
        ) from None


def read_config_file(command: str, path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        out[key] = _parse_value(command, key, value.strip())
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        cfg.update(read_config_file(command, args.config))
    for key in KEY_TABLE[command]:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            cfg[key] = _parse_value(command, key, flag_value)
    return cfg


def make_run_dir(out_root, run_name, seed: int) -> Path:
    root = Path(out_root)
    name = run_name or f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path = root / name
    n = 1
    while path.exists():
        n += 1
        path = root / f"{name}-{n}"
    path.mkdir(parents=True)
    return path


def write_snapshot(run_dir: Path, command: str, cfg: dict) -> None:
    lines = [f"command = {command}"]
    for key in sorted(cfg):
        lines.append(f"{key} = {cfg[key]}")
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_VAR)
    return Path(root) if root else None


def load_record(spec: str):
    """manifest path, kitti:<seq>, or 7scenes:<scene>:<seq>."""
    if spec is None:
        raise UsageError("no dataset given (expected --data)")
    if spec.startswith("kitti:"):
        root = _data_root()
        if root is None:
            raise ConfigError(f"kitti: specs need {DATA_ROOT_VAR} to be set")
        return load_kitti_sequence(root, spec.split(":", 1)[1])
    if spec.startswith("7scenes:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"expected 7scenes:<scene>:<seq>, got {spec!r}")
        root = _data_root()
        if root is None:
            raise ConfigError(f"7scenes: specs need {DATA_ROOT_VAR} to be set")
        return load_sevenscenes_sequence(root, parts[1], parts[2])
    path = Path(spec)
    if not path.exists() and not path.is_absolute():
        root = _data_root()
        if root is not None and (root / spec).exists():
            path = root / spec
    return synth_sequence(load_manifest(path))


def _model_config(cfg: dict):
    preset = cfg["preset"]
    if preset == "tiny":
        return tiny_config(k=cfg["k"], seed=cfg["seed"])
    if preset == "full":
        return full_config(k=cfg["k"], seed=cfg["seed"])
    raise ConfigError(f"unknown preset {preset!r} (expected tiny or full)")


def _train_config(cfg: dict, stage: str, scene_id=None) -> training.TrainConfig:
    return training.TrainConfig(
        stage=stage,
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr0=cfg["lr0"],
        adam_beta1=cfg["adam_beta1"],
        adam_beta2=cfg["adam_beta2"],
        total_iterations=cfg["total_iterations"],
        grad_clip=cfg["grad_clip"],
        window_stride=cfg["window_stride"],
        beta_rot=cfg["beta_rot"],
        lambda_global=cfg["lambda_global"],
        scene_id=scene_id,
        pair_source=cfg.get("pair_source", "from_global"),
        seed=cfg["seed"],
    )


def _require(cfg: dict, *keys):
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")


def _print_history_tail(doc: dict) -> None:
    history = doc["loss_history"]
    if history:
        last = history[-1]
        print(f"final_loss = {last['loss']:.9g} (iteration {last['iteration']})")
    else:
        print("final_loss = nan (no training iterations)")


# --- commands ----------------------------------------------------------------


def cmd_synth(cfg: dict, run_dir: Path) -> int:
    params = SynthParams(
        n_frames=cfg["n_frames"],
        fps=cfg["fps"],
        speed_range=(cfg["speed_min"], cfg["speed_max"]),
        yaw_rate_range=(cfg["yaw_min"], cfg["yaw_max"]),
        vert_amp=cfg["vert_amp"],
        noise=cfg["noise"],
        image_size=(cfg["image_h"], cfg["image_w"]),
        meters_per_pixel=cfg["meters_per_pixel"],
        segment_frames=cfg["segment_frames"],
        seed=cfg["seed"],
    )
    manifest = run_dir / "manifest.json"
    save_manifest(manifest, params)
    write_kitti_poses(run_dir / "poses.txt", synth_trajectory(params))
    print(f"manifest = {manifest}")
    print(f"poses = {run_dir / 'poses.txt'}")
    return 0


def cmd_pretrain_rel(cfg: dict, run_dir: Path) -> int:
    _require(cfg, "data")
    record = load_record(cfg["data"])
    train_cfg = _train_config(cfg, "relative_pretrain")
    out = run_dir / "stage1.pt"
    with open(run_dir / "train.log", "w") as log:
        doc = training.pretrain_relative(
            train_cfg, record, _model_config(cfg), out_path=out, log_stream=log
        )
    print(f"checkpoint = {out}")
    _print_history_tail(doc)
    return 0


def cmd_pretrain_glob(cfg: dict, run_dir: Path) -> int:
    _require(cfg, "data", "base", "scene")
    record = load_record(cfg["data"])
    base = training.load_checkpoint(cfg["base"])
    registry_dir = cfg["registry"] or (run_dir / "registry")
    registry = training.SceneRegistry(registry_dir)
    train_cfg = _train_config(cfg, "global_pretrain", scene_id=cfg["scene"])
    out = run_dir / "stage2.pt"
    with open(run_dir / "train.log", "w") as log:
        doc = training.pretrain_global(
            train_cfg,
            record,
            base,
            registry,
            out_path=out,
            log_stream=log,
            overwrite=cfg["overwrite_scene"],
        )
    print(f"checkpoint = {out}")
    print(f"registry = {registry.root}")
    print(f"scene = {cfg['scene']}")
    _print_history_tail(doc)
    return 0


def cmd_finetune(cfg: dict, run_dir: Path) -> int:
    _require(cfg, "data", "base", "registry", "scene")
    record = load_record(cfg["data"])
    base = training.load_checkpoint(cfg["base"])
    registry = training.SceneRegistry(cfg["registry"])
    train_cfg = _train_config(cfg, "end_to_end")
    out = run_dir / "stage3.pt"
    with open(run_dir / "train.log", "w") as log:
        doc = training.finetune_end_to_end(
            train_cfg, record, base, registry, cfg["scene"],
            out_path=out, log_stream=log,
        )
    print(f"checkpoint = {out}")
    print(f"initial_loss = {doc['initial_loss']:.9g}")
    _print_history_tail(doc)
    return 0


def _report_trajectories(pred, gt, run_dir: Path) -> None:
    drift = metrics.kitti_drift(pred, gt)
    med = metrics.median_pose_errors(pred, gt)
    metrics.write_report(drift, run_dir / "drift_report.txt")
    metrics.write_report(med, run_dir / "median_report.txt")
    print(f"t_rel_percent = {drift.t_rel:.9g}")
    print(f"r_rel_deg_per_100m = {drift.r_rel:.9g}")
    print(f"drift_empty = {str(drift.empty).lower()}")
    print(f"t_med_m = {med.t_med:.9g}")
    print(f"r_med_deg = {med.r_med:.9g}")


def cmd_eval(cfg: dict, run_dir: Path) -> int:
    if cfg["pred_poses"] or cfg["gt_poses"]:
        _require(cfg, "pred_poses", "gt_poses")
        pred = read_kitti_poses(cfg["pred_poses"])
        gt = read_kitti_poses(cfg["gt_poses"])
        _report_trajectories(pred, gt, run_dir)
        return 0
    _require(cfg, "checkpoint", "data")
    doc = training.load_checkpoint(cfg["checkpoint"])
    model = training.model_from_checkpoint(doc)
    record = load_record(cfg["data"])
    est = metrics.reconstruct_trajectory(model, record, mode=cfg["mode"])
    write_kitti_poses(run_dir / "pred_poses.txt", est.poses)
    write_kitti_poses(run_dir / "gt_poses.txt", record.gt)
    print(f"pred_poses = {run_dir / 'pred_poses.txt'}")
    _report_trajectories(est, record.gt, run_dir)
    return 0


def cmd_ablate(cfg: dict, run_dir: Path) -> int:
    _require(cfg, "data")
    train_record = load_record(cfg["data"])
    eval_record = (
        load_record(cfg["eval_data"]) if cfg["eval_data"] else train_record
    )
    try:
        ks = [int(x) for x in cfg["ks"].split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"ks: expected comma-separated integers, got {cfg['ks']!r}")
    modes = [m.strip() for m in cfg["modes"].split(",") if m.strip()]
    if not ks or not modes:
        raise ConfigError("ablate needs at least one mode and one K")
    budget = metrics.AblationBudget(
        epochs_relative=cfg["epochs_relative"],
        epochs_global=cfg["epochs_global"],
        epochs_joint=cfg["epochs_joint"],
        batch_size=cfg["batch_size"],
        lr0=cfg["lr0"],
        window_stride=cfg["window_stride"],
        seed=cfg["seed"],
    )
    variants = [(mode, k) for mode in modes for k in ks]
    rows = metrics.ablation_sweep(variants, train_record, eval_record, budget)
    header = f"{'mode':<14} {'k':>3} {'t_rel':>12} {'r_rel':>12} {'t_med':>12} {'r_med':>12} {'drift_empty':>11}"
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['mode']:<14} {row['k']:>3d} {row['t_rel']:>12.6g} "
            f"{row['r_rel']:>12.6g} {row['t_med']:>12.6g} {row['r_med']:>12.6g} "
            f"{str(row['drift_empty']).lower():>11}"
        )
    table = "\n".join(lines) + "\n"
    (run_dir / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_plot(cfg: dict, run_dir: Path) -> int:
    _require(cfg, "pred_poses", "gt_poses")
    pred = read_kitti_poses(cfg["pred_poses"])
    gt = read_kitti_poses(cfg["gt_poses"])
    table, sidecar = metrics.emit_plot_data(
        pred, gt, run_dir / "trajectory.txt", align=cfg["align"]
    )
    print(f"plot_data = {table}")
    print(f"metrics = {sidecar}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "pretrain-rel": cmd_pretrain_rel,
    "pretrain-glob": cmd_pretrain_glob,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


# --- argument parsing and dispatch --------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusedvo", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key = value file")
        p.add_argument("--out", default="runs", help="root for run directories")
        p.add_argument("--run-name", dest="run_name", default=None)
        for key, kind in KEY_TABLE[command].items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, action="store_const", const="true", default=None)
            else:
                p.add_argument(flag, dest=key, default=None)
    return parser


def run(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError(f"expected a command: {', '.join(COMMANDS)}")
        cfg = resolve_config(args.command, args)
        run_dir = make_run_dir(args.out, args.run_name, cfg.get("seed", 0))
        write_snapshot(run_dir, args.command, cfg)
        print(f"run_dir = {run_dir}")
        return HANDLERS[args.command](cfg, run_dir)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NonFiniteLoss as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except FusedVOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
