"""Ensemble vs best single hospital model over several seeds.

    python scripts/run_ensemble_trend.py [--config configs/digits3.toml] [--seeds 5]
"""
import argparse
import dataclasses

from hefl.config import load_config
from hefl.protocol import run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/digits3.toml")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    base = load_config(args.config)
    print("seed,ensemble_test,best_individual_test,delta,alpha")
    wins = 0
    for seed in range(args.seeds):
        ens = run_scenario(dataclasses.replace(base, seed=seed)).body["ensemble"]
        e, b = ens["test_accuracy"], ens["best_individual_test_accuracy"]
        wins += e > b
        alpha = " ".join(f"{a:.3f}" for a in ens["alpha"])
        print(f"{seed},{e:.4f},{b:.4f},{e - b:+.4f},{alpha}")
    print(f"# ensemble strictly better on {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
