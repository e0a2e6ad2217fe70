"""Split-gain importance ranking with signal planted in t_days and g_top only."""
import argparse

from chatboost.harness import ImportanceConfig, importance_run


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--top", type=int, default=5)
    args = parser.parse_args()
    for seed in range(args.seeds):
        ranking = importance_run(ImportanceConfig(), seed)
        print(f"seed {seed}: " + ", ".join(f"{name} {value:.3f}" for name, value in ranking[: args.top]))


if __name__ == "__main__":
    main()
