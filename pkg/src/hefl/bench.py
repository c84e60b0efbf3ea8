"""Runtime sweeps: ledger verification vs node count, encrypted inference
vs image count.  Each point is the minimum over ``repeats`` runs."""
from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import neural
from .config import ScenarioConfig
from .ensemble import WeightGrid, grid_search_weights
from .ledger import NodeSet, verify_and_append_model, verify_and_append_weights
from .protocol import load_dataset
from .ring import FixedPointCodec, decode_fixed
from .secure_ops import SecureTensor, randomness_budget, secure_logits, share_tensor
from .sharing import Dealer, Session

COLUMNS = ["sweep", "value", "phase", "seconds"]


MIN_SAMPLE_SECONDS = 0.1


def _calibrate(fn) -> int:
    t = time.perf_counter()
    fn()
    first = time.perf_counter() - t
    return 1 if first >= MIN_SAMPLE_SECONDS else int(MIN_SAMPLE_SECONDS / max(first, 1e-9)) + 1


def sweep_timings(cases: dict, repeats: int = 3) -> dict:
    """Per-call seconds for each case, min over ``repeats`` rounds.

    Rounds visit every case in turn so slow drift in host speed lands on
    all sweep points alike; each sample loops for at least
    MIN_SAMPLE_SECONDS.
    """
    inner = {k: _calibrate(fn) for k, fn in cases.items()}
    best = dict.fromkeys(cases, float("inf"))
    for _ in range(max(1, repeats)):
        for k, fn in cases.items():
            t = time.perf_counter()
            for _ in range(inner[k]):
                fn()
            best[k] = min(best[k], (time.perf_counter() - t) / inner[k])
    return best


def model_verification_case(params, m: int):
    def once():
        verify_and_append_model(NodeSet("B", m), params, submitter="S").raise_for_status()
    return once


def weight_verification_case(mats, y, grid, m: int):
    alpha, acc = grid_search_weights(mats, y, grid)
    ids = [f"gm{i}" for i in range(len(mats))]

    def once():
        verify_and_append_weights(NodeSet("BM", m), alpha, ids, acc, mats, y, grid).raise_for_status()
    return once


def encrypted_inference_case(params, x, h: int, codec: FixedPointCodec, seed: int = 0, batch: int = 128):
    spec = params.spec

    def once():
        s = Session([f"H{i}" for i in range(h)], Dealer(h, seed, randomness_budget(spec, len(x), h)))
        w = [share_tensor(s, 0, t, codec) for t in params.tensors]
        xs = share_tensor(s, 1 % h, x, codec)
        for start in range(0, len(x), batch):
            part = SecureTensor(xs.shares[:, start:start + batch], xs.frac_bits, s)
            decode_fixed(s.reveal_to(secure_logits(spec, w, part, codec).shares, 0), codec)
    return once


def run_bench(config: ScenarioConfig) -> list:
    """Rows of (sweep, value, phase, seconds)."""
    rng = np.random.default_rng(config.seed)
    codec = FixedPointCodec(config.frac_bits)
    data = load_dataset(config, config.seed)
    hc = config.hospitals[0]
    spec = hc.model_spec(data.inputs.shape[1:], data.num_classes)
    params = neural.init_params(spec, rng, model_id=f"{hc.name}-bench")
    reps = config.bench.repeats

    n_tune = min(len(data), 300)
    mats = [neural.forward(neural.init_params(h.model_spec(data.inputs.shape[1:], data.num_classes), rng),
                           data.inputs[:n_tune]) for h in config.hospitals]
    y = data.labels[:n_tune]
    grid = WeightGrid.from_step(config.grid_step)

    counts = config.bench.node_counts
    model_t = sweep_timings({m: model_verification_case(params, m) for m in counts}, reps)
    weight_t = sweep_timings({m: weight_verification_case(mats, y, grid, m) for m in counts}, reps)
    image_t = sweep_timings({
        n: encrypted_inference_case(params, data.inputs[np.arange(n) % len(data)], config.h, codec,
                                    config.seed, config.mpc_batch)
        for n in config.bench.image_counts
    }, reps)
    rows = []
    for m in counts:
        rows.append(["nodes", m, "model_verification", model_t[m]])
        rows.append(["nodes", m, "weight_verification", weight_t[m]])
    for n in config.bench.image_counts:
        rows.append(["images", n, "encrypted_inference", image_t[n]])
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for sweep, value, phase, seconds in rows:
        w.writerow([sweep, value, phase, f"{seconds:.6f}"])
    return buf.getvalue()


def linear_fit_r2(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = np.sum((ys - ys.mean()) ** 2)
    return 1.0 - float(np.sum(resid ** 2) / ss_tot) if ss_tot > 0 else 1.0
