"""Time-to-quality comparison of the baseline, disjoint-masking and joint-distillation arms.

Each arm trains the micro model for the same number of unique epochs on the
toy dataset; the threshold is the baseline's final validation reconstruction
loss for the same seed.

    python3 scripts/run_efficiency.py --out runs/efficiency --seeds 0 1 2
"""
import argparse
import json
from pathlib import Path

from dmjd.experiments import (ARMS, DESK_BASE_LR, EFFICIENCY_EPOCHS, SEEDS, efficiency_ratios, median_ratio,
                              run_arm, toy_dataset)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/efficiency")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=EFFICIENCY_EPOCHS)
    ap.add_argument("--base-lr", type=float, default=DESK_BASE_LR)
    ap.add_argument("--arms", nargs="+", default=list(ARMS))
    args = ap.parse_args()

    ds = toy_dataset()
    out = Path(args.out)
    runs = {arm: [] for arm in args.arms}
    for seed in args.seeds:
        for arm in args.arms:
            r = run_arm(arm, seed, ds, args.epochs, run_dir=out / f"{arm}-s{seed}", base_lr=args.base_lr)
            runs[arm].append(r)
            curve = r.val_loss_mim
            print(f"seed {seed} {arm:9s} val_loss_mim " + " ".join(f"{v:.4f}" for v in curve[4::5]), flush=True)
    ratios = efficiency_ratios(runs)
    summary = {arm: {"ratios": rs, "median": median_ratio(rs)} for arm, rs in ratios.items()}
    for arm, s in summary.items():
        print(f"{arm}: epochs to baseline's final loss / {args.epochs} = {s['ratios']} (median {s['median']:.3f})")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
