"""Train the planted-dependency toy under several attention modes and compare."""

import argparse
import json

from vsa.toy import MODES, PlantedTask, TrainConfig, train_toy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--topk", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", nargs="+", default=["vsa", "dense", "random", "spatial_temporal"], choices=MODES)
    ap.add_argument("--out", default=None, help="optional json path for the summaries")
    args = ap.parse_args()

    task = PlantedTask(seed=args.seed)
    rows = {}
    for mode in args.modes:
        rep = train_toy(task, TrainConfig(mode=mode, topk=args.topk, steps=args.steps, seed=args.seed))
        rows[mode] = rep.summary()
        print(f"{mode:>18}  eval_mse={rep.eval_mse:.4f}  eval_recall={rep.eval_recall:.3f}  final_k={rep.k[-1]}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
