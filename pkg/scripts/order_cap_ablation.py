"""Dice across scheduler order caps 1-4, several seeds, default training config.

    python scripts/order_cap_ablation.py --seeds 5 --out cap_ablation.csv
"""

import argparse

import numpy as np

from fuseode import toyseg


def first_epoch_above(curve, level):
    return next((e for e, d in enumerate(curve, start=1) if d >= level), len(curve) + 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="cap_ablation.csv")
    args = ap.parse_args()

    base = toyseg.TrainConfig.from_file(args.config) if args.config else toyseg.TrainConfig()
    lines = ["seed,max_order,final_train_loss,val_dice,first_epoch_dice_0.5"]
    dice = {m: [] for m in (1, 2, 3, 4)}
    for seed in range(args.seeds):
        for m in dice:
            cfg = toyseg.TrainConfig(**{**vars(base), "seed": seed, "max_order": m})
            res = toyseg.train(cfg)
            dice[m].append(res.final_val_dice)
            row = f"{seed},{m},{res.train_loss[-1]:.6f},{res.final_val_dice:.4f},{first_epoch_above(res.val_dice, 0.5)}"
            lines.append(row)
            print(row, flush=True)
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for m, v in dice.items():
        print(f"max_order={m}: mean Dice {np.mean(v):.4f} +- {np.std(v):.4f}")


if __name__ == "__main__":
    main()
