"""Timing sweeps with a trend summary (monotonicity over nodes, R^2 over images).

    python scripts/run_runtime_sweeps.py [--config configs/digits3.toml] [--out bench.csv]
"""
import argparse
from pathlib import Path

from hefl.bench import linear_fit_r2, rows_to_csv, run_bench
from hefl.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/digits3.toml")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    rows = run_bench(load_config(args.config))
    text = rows_to_csv(rows)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    for phase in ("model_verification", "weight_verification"):
        times = [t for _, _, p, t in sorted(rows, key=lambda r: r[1]) if p == phase]
        mono = all(b >= a for a, b in zip(times, times[1:]))
        print(f"# {phase}: {'nondecreasing' if mono else 'NOT monotone'} in node count")
    img = [(v, t) for _, v, p, t in rows if p == "encrypted_inference"]
    r2 = linear_fit_r2([v for v, _ in img], [t for _, t in img])
    print(f"# encrypted_inference: linear fit R^2 = {r2:.4f}")


if __name__ == "__main__":
    main()
