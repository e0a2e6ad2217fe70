"""Interaction order and training-size ablation on planted-interaction synthetic data."""
import argparse
import time

from chatboost.experiment import format_runs
from chatboost.harness import AblationConfig, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()
    start = time.perf_counter()
    results = run_ablation(AblationConfig(), seeds=range(args.seeds))
    for res in results:
        print(f"seed {res.seed}")
        print(format_runs([res.order2_full.summary, res.order1_full.summary, res.order2_subsampled.summary]))
        print(f"interaction margin {res.interaction_margin:+.4f}  data margin {res.data_margin:+.4f}\n")
    wins_i = sum(r.interaction_margin > 0 for r in results)
    wins_d = sum(r.data_margin > 0 for r in results)
    print(f"order 2 beats order 1 in {wins_i}/{len(results)} seeds")
    print(f"full data beats subsampled in {wins_d}/{len(results)} seeds")
    print(f"{time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
