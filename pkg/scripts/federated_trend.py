"""Desk-scale federated trend: per-round aggregated metrics plus holdout Dice.

    python scripts/federated_trend.py --rounds 5 --clients 2 --seeds 0 1 2

Prints one markdown table per seed and a final line summarising whether the
aggregated loss was non-increasing (at most one rise, each < 0.01).
"""

import argparse
import logging
import tempfile
import time
from pathlib import Path

from foamfed.dataset import BY_SOURCE, IID
from foamfed.model import TrainConfig
from foamfed.simulation import SimulationConfig, simulate


def monotone_enough(losses, slack=0.01):
    rises = [b - a for a, b in zip(losses, losses[1:]) if b > a]
    return len(rises) <= 1 and all(r < slack for r in rises)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clients", type=int, default=2)
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--partition", choices=[IID, BY_SOURCE], default=BY_SOURCE)
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--holdout", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--save-dir", type=Path, help="keep checkpoints here (default: temporary)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    verdicts = []
    for seed in args.seeds:
        with tempfile.TemporaryDirectory() as tmp:
            save = args.save_dir / f"seed{seed}" if args.save_dir else Path(tmp)
            cfg = SimulationConfig(n_clients=args.clients, rounds=args.rounds, partition_mode=args.partition,
                                   seed=seed, samples=args.samples, holdout=args.holdout, save_dir=save,
                                   train=TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed))
            t0 = time.perf_counter()
            result = simulate(cfg)
            elapsed = time.perf_counter() - t0
        losses = [r.fit.loss for r in result.log.rounds]
        print(f"\nseed {seed}  clients {result.client_sizes}  ({elapsed:.1f}s)")
        print("| round | loss | iou | dice | pixel acc |")
        print("|---|---|---|---|---|")
        for r in result.log.rounds:
            m = r.fit
            print(f"| {r.round} | {m.loss:.4f} | {m.iou:.4f} | {m.dice:.4f} | {m.pixel_accuracy:.4f} |")
        if result.holdout is not None:
            print(f"holdout dice {result.holdout.dice:.4f}  iou {result.holdout.iou:.4f}")
        verdicts.append(result.log.ok and monotone_enough(losses))
    print(f"\nloss trend ok on {sum(verdicts)}/{len(verdicts)} seeds")


if __name__ == "__main__":
    main()
