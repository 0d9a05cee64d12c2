"""Linear-probe gains: random encoder vs pretrained encoders with decoder depth 2 and 8.

    python3 scripts/run_probe_ablation.py --out runs/probe --seeds 0 1 2
"""
import argparse
import json
from pathlib import Path

import numpy as np

from dmjd.experiments import (PROBE_EPOCHS, PROBE_TRAIN_EPOCHS, SEEDS, pretrained_probe, random_encoder_probe,
                              toy_dataset)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/probe")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=PROBE_EPOCHS)
    ap.add_argument("--depths", type=int, nargs="+", default=[2, 8])
    args = ap.parse_args()

    ds = toy_dataset()
    out = Path(args.out)
    rows = {"random": []} | {f"depth{d}": [] for d in args.depths}
    for seed in args.seeds:
        rows["random"].append(random_encoder_probe(ds, seed, PROBE_TRAIN_EPOCHS)["accuracy"])
        for d in args.depths:
            res = pretrained_probe(seed, ds, d, args.epochs, run_dir=out / f"depth{d}-s{seed}")
            rows[f"depth{d}"].append(res["accuracy"])
        print(f"seed {seed}: " + ", ".join(f"{k} {v[-1]:.3f}" for k, v in rows.items()), flush=True)
    summary = {k: {"accuracy": v, "median": float(np.median(v))} for k, v in rows.items()}
    for k, s in summary.items():
        print(f"{k}: {s['accuracy']} median {s['median']:.3f}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
