"""Three-stage training on one synthetic world, then held-out drift.

Runs relative pretraining, per-scene global pretraining, and fused
fine-tuning on the head of a synthetic sequence, then compares fused
reconstruction against chained relative integration on the unseen tail.
Defaults reproduce the desk-scale acceptance run in about a minute on CPU.
"""

import argparse
from pathlib import Path

import numpy as np

from fusedvo import training as T
from fusedvo.data import SynthParams, subsequence, synth_sequence
from fusedvo.metrics import kitti_drift, median_pose_errors, reconstruct_trajectory
from fusedvo.model import full_config, tiny_config


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--frames", type=int, default=320)
    ap.add_argument("--split", type=int, default=224, help="train/tail boundary frame")
    ap.add_argument("--epochs", type=int, nargs=3, default=[40, 40, 30],
                    metavar=("REL", "GLOB", "JOINT"))
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--preset", choices=["tiny", "full"], default="tiny")
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr0", type=float, default=2e-3)
    ap.add_argument("--stride", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def epoch_means(history):
    per = {}
    for entry in history:
        per.setdefault(entry["epoch"], []).append(entry["loss"])
    return {e: float(np.mean(v)) for e, v in per.items()}


def main():
    args = parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    world = SynthParams(
        n_frames=args.frames,
        fps=10.0,
        speed_range=(10.0, 14.0),
        yaw_rate_range=(18.0, 30.0),
        noise=0.01,
        image_size=(64, 64),
        meters_per_pixel=0.5,
        segment_frames=32,
        seed=args.seed,
    )
    full = synth_sequence(world)
    train = subsequence(full, 0, args.split, tag="train")
    tail = subsequence(full, args.split, len(full), tag="tail")
    print(f"world: {args.frames} frames, train {len(train)}, tail {len(tail)}")

    make_cfg = tiny_config if args.preset == "tiny" else full_config
    model_cfg = make_cfg(k=args.k, seed=args.seed)
    common = dict(
        batch_size=args.batch_size, lr0=args.lr0,
        window_stride=args.stride, seed=args.seed,
    )

    with open(args.out / "train.log", "w") as log:
        cfg1 = T.TrainConfig(stage="relative_pretrain", epochs=args.epochs[0], **common)
        doc1 = T.pretrain_relative(
            cfg1, train, model_cfg, out_path=args.out / "stage1.pt", log_stream=log
        )
        print(f"stage 1 done: final relative loss "
              f"{epoch_means(doc1['loss_history'])[args.epochs[0] - 1]:.4f}")

        registry = T.SceneRegistry(args.out / "registry")
        cfg2 = T.TrainConfig(
            stage="global_pretrain", epochs=args.epochs[1], scene_id="world", **common
        )
        doc2 = T.pretrain_global(
            cfg2, train, doc1, registry,
            out_path=args.out / "stage2.pt", log_stream=log, overwrite=True,
        )
        print(f"stage 2 done: final joint loss "
              f"{epoch_means(doc2['loss_history'])[args.epochs[1] - 1]:.4f}")

        cfg3 = T.TrainConfig(stage="end_to_end", epochs=args.epochs[2], **common)
        doc3 = T.finetune_end_to_end(
            cfg3, train, doc1, registry, "world",
            out_path=args.out / "stage3.pt", log_stream=log,
        )

    means = epoch_means(doc3["loss_history"])
    first, final = means[0], means[max(means)]
    print(f"stage 3 done: joint loss {first:.2f} -> {final:.2f} "
          f"(assembled initial {doc3['initial_loss']:.2f})")

    fused = T.model_from_checkpoint(doc3)
    rel = T.model_from_checkpoint(doc1)
    rows = [
        ("fused", reconstruct_trajectory(fused, tail, mode="fused")),
        ("relative_only", reconstruct_trajectory(rel, tail, mode="relative_only")),
    ]
    print(f"{'mode':<14} {'t_rel':>10} {'r_rel':>10} {'t_med':>10} {'r_med':>10}")
    for name, est in rows:
        d = kitti_drift(est, tail.gt)
        m = median_pose_errors(est, tail.gt)
        print(f"{name:<14} {d.t_rel:>10.3f} {d.r_rel:>10.3f} "
              f"{m.t_med:>10.3f} {m.r_med:>10.3f}")
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    main()
