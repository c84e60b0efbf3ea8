"""Command-line entry point: ``hefl run|verify-chain|tune-weights|bench|report``.

Exit codes: 0 success, 1 invalid chain, 2 config/input error, 3 phase failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from .errors import ChainFormatError, ConfigError, HeflError, PhaseError

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_PHASE = 0, 1, 2, 3


def _seeded(config, seed):
    env = os.environ.get("HEFL_SEED")
    if env is not None:
        seed = env
    if seed is not None:
        try:
            value = int(seed)
        except ValueError:
            raise ConfigError(f"seed must be an integer, got {seed!r}") from None
        if not 0 <= value < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        config = dataclasses.replace(config, seed=value)
    return config


def cmd_run(args) -> int:
    from .config import load_config
    from .protocol import run_dir_name, run_scenario

    try:
        config = _seeded(load_config(args.config), args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_scenario(config)
    except PhaseError as e:
        print(f"phase failure [{e.phase}]: {e.cause}", file=sys.stderr)
        return EXIT_PHASE
    out = report.write(Path(args.out) / run_dir_name(config))
    digest = hashlib.sha256((out / "report.json").read_bytes()).hexdigest()
    ens = report.body["ensemble"]
    print(f"run_dir {out}")
    print(f"report_sha256 {digest}")
    print(f"ensemble_test_accuracy {ens['test_accuracy']:.6f}")
    print(f"best_individual_test_accuracy {ens['best_individual_test_accuracy']:.6f}")
    return EXIT_OK


def cmd_verify_chain(args) -> int:
    from .ledger import chain_from_bytes, validate_chain

    try:
        data = Path(args.chain).read_bytes()
    except OSError as e:
        print(f"cannot read {args.chain}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if not data:
        print(f"{args.chain}: empty file", file=sys.stderr)
        return EXIT_CONFIG
    try:
        chain = chain_from_bytes(data)
    except ChainFormatError as e:
        if e.height is None:
            print(f"{args.chain}: not a chain dump ({e})", file=sys.stderr)
            return EXIT_CONFIG
        print(f"invalid at height {e.height}: {e}")
        return EXIT_INVALID
    ok, bad = validate_chain(chain)
    if ok:
        print(f"valid {len(chain)} blocks head {chain.head_hash.hex()}")
        return EXIT_OK
    print(f"invalid at height {bad}")
    return EXIT_INVALID


def cmd_tune_weights(args) -> int:
    from .ensemble import WeightGrid, grid_search_weights, read_labels_csv, read_probability_csv

    try:
        mats = [read_probability_csv(p) for p in args.probs]
        y = read_labels_csv(args.labels)
        alpha, acc = grid_search_weights(mats, y, WeightGrid.from_step(args.step))
    except (OSError, ValueError, HeflError) as e:
        print(f"tune-weights: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"gm_ids": [m.model_id for m in mats], "alpha": list(alpha.alpha), "accuracy": acc},
                     sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import rows_to_csv, run_bench
    from .config import load_config

    try:
        config = _seeded(load_config(args.config), args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        text = rows_to_csv(run_bench(config))
    except HeflError as e:
        print(f"phase failure [bench]: {e}", file=sys.stderr)
        return EXIT_PHASE
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    try:
        body = json.loads((run / "report.json").read_text())
    except (OSError, ValueError) as e:
        print(f"cannot read report in {run}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print("model,tuning_accuracy,test_accuracy")
    for h in body["hospitals"]:
        print(f"{h['model_id']},{h['tuning_accuracy']:.4f},{h['test_accuracy']:.4f}")
    ens = body["ensemble"]
    print(f"ensemble,{ens['tuning_accuracy']:.4f},{ens['test_accuracy']:.4f}")
    if args.gnuplot:
        path = run / "fl_curves.dat"
        with open(path, "w") as fh:
            for h in body["hospitals"]:
                fh.write(f"# {h['name']}: round train_accuracy test_accuracy\n")
                for r in h["fl_rounds"]:
                    fh.write(f"{r['round']} {r['train_accuracy']:.6f} {r['test_accuracy']:.6f}\n")
                fh.write("\n\n")
        print(f"gnuplot data written to {path}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hefl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario end to end")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", default=None, help="overrides the config seed (HEFL_SEED overrides this)")
    r.add_argument("--out", default="runs")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-chain", help="validate a binary chain dump")
    v.add_argument("--chain", required=True)
    v.set_defaults(func=cmd_verify_chain)

    t = sub.add_parser("tune-weights", help="grid-search ensemble weights from probability CSVs")
    t.add_argument("--probs", nargs="+", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--step", type=float, default=0.1)
    t.set_defaults(func=cmd_tune_weights)

    b = sub.add_parser("bench", help="timing sweeps over node and image counts")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", default=None)
    b.add_argument("--out", default=None, help="also write the CSV here")
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("--run", required=True)
    rp.add_argument("--gnuplot", action="store_true", help="write fl_curves.dat")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
