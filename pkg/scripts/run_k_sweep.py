"""Window-size ablation: train one model per (mode, K) and tabulate drift.

Every variant gets the identical budget, so differences in the table come
from the window size and fusion mode alone. Defaults finish in seconds on
CPU; raise --frames and the epoch budget for sharper separation.
"""

import argparse
from pathlib import Path

from fusedvo.data import SynthParams, synth_sequence
from fusedvo.metrics import AblationBudget, ablation_sweep


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/k_sweep.txt"))
    ap.add_argument("--frames", type=int, default=96)
    ap.add_argument("--ks", type=int, nargs="+", default=[2, 3, 5])
    ap.add_argument("--modes", nargs="+", default=["fused"],
                    choices=["fused", "relative_only", "global_only"])
    ap.add_argument("--epochs", type=int, nargs=3, default=[1, 1, 1],
                    metavar=("REL", "GLOB", "JOINT"))
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--lr0", type=float, default=1e-3)
    ap.add_argument("--stride", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def main():
    args = parse_args()
    record = synth_sequence(
        SynthParams(n_frames=args.frames, image_size=(64, 64), seed=args.seed)
    )
    budget = AblationBudget(
        epochs_relative=args.epochs[0],
        epochs_global=args.epochs[1],
        epochs_joint=args.epochs[2],
        batch_size=args.batch_size,
        lr0=args.lr0,
        window_stride=args.stride,
        seed=args.seed,
    )
    variants = [(mode, k) for mode in args.modes for k in args.ks]
    rows = ablation_sweep(variants, record, record, budget)

    header = (f"{'mode':<14} {'k':>3} {'t_rel':>12} {'r_rel':>12} "
              f"{'t_med':>12} {'r_med':>12} {'drift_empty':>11}")
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['mode']:<14} {row['k']:>3d} {row['t_rel']:>12.6g} "
            f"{row['r_rel']:>12.6g} {row['t_med']:>12.6g} {row['r_med']:>12.6g} "
            f"{str(row['drift_empty']).lower():>11}"
        )
    table = "\n".join(lines) + "\n"
    print(table, end="")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(table)
    print(f"table written to {args.out}")


if __name__ == "__main__":
    main()
