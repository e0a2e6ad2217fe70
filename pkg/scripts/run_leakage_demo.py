"""Naive vs ordered target encoding of a unique row id against a random target."""
import argparse

from chatboost.leakage import leakage_demo


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--m", type=int, default=10_000)
    parser.add_argument("--seeds", type=int, default=10)
    args = parser.parse_args()
    print(f"{'seed':>4} {'naive train':>12} {'naive holdout':>14} {'ordered train':>14} {'ordered holdout':>16}")
    for seed in range(args.seeds):
        r = leakage_demo(args.m, seed)
        print(
            f"{seed:>4} {r.train_auc_naive:>12.3f} {r.holdout_auc_naive:>14.3f} "
            f"{r.train_auc_ordered:>14.3f} {r.holdout_auc_ordered:>16.3f}"
        )


if __name__ == "__main__":
    main()
