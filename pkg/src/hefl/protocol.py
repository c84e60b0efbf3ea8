"""End-to-end scenario: per-hospital FedAVG with ledger verification,
all-pairs encrypted evaluation, ensemble weight tuning on the shared
ledger, and a final held-out test.

Everything runs in one deterministic event loop.  Actors are named
``H0`` (a hospital as MPC party), ``H0/S`` (its central server),
``H0/E1`` (edge servers), ``H0/B2`` (its ledger nodes), ``BM3`` (shared
ledger nodes) and ``dealer``.
"""
from __future__ import annotations

import csv
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datasets
from . import neural
from .bus import MessageBus, fingerprint
from .config import ScenarioConfig
from .ensemble import (
    ProbabilityMatrix,
    WeightGrid,
    accuracy_score,
    ensemble_predict,
    grid_search_weights,
    write_labels_csv,
    write_probability_csv,
)
from .errors import EmptyEvalSet, HeflError, LedgerRejection, PhaseError, SessionAbort
from .federated import EdgeServerState, FLConfig, HospitalFLResult, run_hospital_fl
from .ledger import ModelRecord, NodeSet, canonical_serialize, dump_chain, verify_and_append_model, verify_and_append_weights
from .neural import LabeledDataset, ModelParams, ModelSpec
from .ring import FixedPointCodec, decode_fixed, encode_fixed
from .secure_ops import SecureTensor, randomness_budget, secure_logits, share_tensor
from .sharing import Dealer, Session

# kinds that may cross a hospital boundary
ALLOWED_CROSS_KINDS = frozenset({
    "seed", "dealer", "beaver_open", "trunc_open", "and_open", "b2a_open", "reveal",
    "labels", "probabilities", "ledger_proposal", "ledger_vote",
})


def actor_domain(name: str) -> str:
    """Trust domain of an actor: its hospital, or the actor itself for BM nodes and the dealer."""
    return name.split("/")[0] if "/" in name else name


@dataclass
class HospitalActor:
    index: int
    name: str
    spec: ModelSpec
    edges: list
    fl: FLConfig
    ledger: NodeSet
    validation: LabeledDataset
    model: ModelParams | None = None
    fl_result: HospitalFLResult | None = None

    @property
    def server(self) -> str:
        return f"{self.name}/S"


# ---------------------------------------------------------------------------
# encrypted evaluation

def do_session(do: HospitalActor, mo: HospitalActor, session: Session, eval_split: LabeledDataset,
               codec: FixedPointCodec):
    """Data owner: share the evaluation inputs among all parties; the labels go to the MO."""
    if len(eval_split) == 0:
        raise EmptyEvalSet(f"{do.name} has no evaluation samples")
    x = share_tensor(session, do.index, eval_split.inputs, codec)
    if do.index != mo.index:
        session.bus.send(do.name, mo.name, "labels", eval_split.labels.astype("<i8"), session.session_id)
    return x, eval_split.labels


def mo_session(mo: HospitalActor, session: Session, eval_inputs, codec: FixedPointCodec,
               batch: int = 128):
    """Model owner: share the weights, run the secure forward pass on every
    DO's shared inputs, reconstruct the logits and apply softmax.

    ``eval_inputs`` is a list of (SecureTensor, labels) in DO order.
    Returns (ProbabilityMatrix, labels).
    """
    if mo.model is None or mo.model.model_id not in mo.ledger.chain.model_ids():
        raise SessionAbort(f"{mo.name}: global model not verified on its ledger")
    k = mo.spec.num_classes
    if not eval_inputs:
        return ProbabilityMatrix(mo.name, mo.model.model_id, np.zeros((0, k))), np.zeros(0, dtype=np.int64)
    for x, y in eval_inputs:
        if x.session is not session or x.shares.shape[0] != session.h or len(x) != len(y):
            raise SessionAbort(f"{mo.name}: input shares do not belong to session {session.session_id}")
        if x.shape[1:] != mo.spec.input_shape:
            raise SessionAbort(f"{mo.name}: input shape {x.shape[1:]} != {mo.spec.input_shape}")

    weights = [share_tensor(session, mo.index, t, codec) for t in mo.model.tensors]
    shares = np.concatenate([x.shares for x, _ in eval_inputs], axis=1)
    labels = np.concatenate([np.asarray(y) for _, y in eval_inputs])
    chunks = []
    for start in range(0, shares.shape[1], batch):
        part = SecureTensor(shares[:, start:start + batch], codec.frac_bits, session)
        out = secure_logits(mo.spec, weights, part, codec)
        chunks.append(session.reveal_to(out.shares, mo.index, kind="reveal"))
    logits = decode_fixed(np.concatenate(chunks), codec)
    probs = neural.import_probabilities(logits)
    return ProbabilityMatrix(mo.name, mo.model.model_id, probs), labels


def cross_evaluate(hospitals, bus: MessageBus, codec: FixedPointCodec, seeds, batch: int = 128,
                   eval_sets=None):
    """Every hospital acts as MO once; every hospital (the MO included) is a DO
    for its own evaluation split.  Rows are aligned by DO order."""
    names = [h.name for h in hospitals]
    eval_sets = eval_sets if eval_sets is not None else [h.validation for h in hospitals]
    n_total = sum(len(s) for s in eval_sets)
    if n_total == 0:
        raise EmptyEvalSet("no hospital contributed evaluation samples")
    mats, labels = [], None
    for mo, seed in zip(hospitals, seeds):
        budget = randomness_budget(mo.spec, n_total, len(hospitals))
        session = Session(names, Dealer(len(hospitals), seed, budget), bus, session_id=f"eval-{mo.name}")
        inputs = [do_session(do, mo, session, s, codec) for do, s in zip(hospitals, eval_sets) if len(s)]
        mat, y = mo_session(mo, session, inputs, codec, batch)
        if labels is not None and not np.array_equal(labels, y):
            raise SessionAbort("evaluation rows are not aligned across model owners")
        labels = y
        mats.append(mat)
    return mats, labels


def privacy_audit(log, forbidden_digests: set) -> list:
    """Messages crossing a trust boundary that carry a forbidden payload or kind."""
    bad = []
    for m in log:
        if actor_domain(m.sender) == actor_domain(m.receiver):
            continue
        if m.kind not in ALLOWED_CROSS_KINDS or m.digest in forbidden_digests:
            bad.append(m)
    return bad


# ---------------------------------------------------------------------------
# scenario

@dataclass
class RunReport:
    body: dict
    timings: dict = field(default_factory=dict)
    chains: dict = field(default_factory=dict)
    matrices: list = field(default_factory=list)
    labels: np.ndarray | None = None
    message_rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "chains").mkdir(parents=True, exist_ok=True)
        (out / "probabilities").mkdir(exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        for name, chain in self.chains.items():
            dump_chain(chain, out / "chains" / f"{name}.chain")
        for m in self.matrices:
            write_probability_csv(m, out / "probabilities" / f"{m.hospital_id}.csv")
        if self.labels is not None:
            write_labels_csv(self.labels, out / "probabilities" / "labels.csv")
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["hospital", "round", "selected", "total_samples", "train_accuracy",
                        "test_accuracy", "digest"])
            for hosp in self.body["hospitals"]:
                for r in hosp["fl_rounds"]:
                    w.writerow([hosp["name"], r["round"], "|".join(r["selected"]), r["total_samples"],
                                r["train_accuracy"], r["test_accuracy"], r["digest"]])
        with open(out / "messages.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "sender", "receiver", "kind", "bytes", "digest", "session"])
            w.writerows(self.message_rows)
        return out


def run_dir_name(config: ScenarioConfig) -> str:
    return f"{config.scenario_id}-{config.seed}"


def load_dataset(config: ScenarioConfig, seed: int) -> LabeledDataset:
    d = config.data
    if d.source == "digits":
        data = datasets.load_digits()
    elif d.source == "blobs":
        data = datasets.make_blobs(d.n_samples, d.n_features, d.centers, d.cluster_std, seed)
    elif d.source == "csv":
        data = datasets.load_csv(d.path)
    else:
        data = datasets.load_idx(d.path, d.labels_path)
    if d.max_samples is not None and d.max_samples < len(data):
        data = data.subset(np.arange(d.max_samples))
    return data


def split_scenario(config: ScenarioConfig, data: LabeledDataset, rng: np.random.Generator):
    """Shuffle, hold out the test split, then give each hospital a contiguous
    slice divided into a validation part and per-edge training partitions."""
    d = config.data
    perm = rng.permutation(len(data))
    n_test = int(round(len(data) * d.test_fraction))
    test = data.subset(perm[:n_test])
    rest = perm[n_test:]
    per_hospital = []
    for hc, idx in zip(config.hospitals, datasets.even_split(len(rest), config.h)):
        own = rest[idx]
        n_val = max(1, int(round(len(own) * d.validation_fraction)))
        val = data.subset(own[:n_val])
        if config.eval_subsample is not None:
            val = val.subset(np.arange(min(config.eval_subsample, len(val))))
        train_idx = own[n_val:]
        if d.partition == "dirichlet":
            parts = datasets.dirichlet_split(data.labels[train_idx], hc.edges, d.dirichlet_alpha, rng)
        else:
            parts = datasets.even_split(len(train_idx), hc.edges)
        per_hospital.append((val, [data.subset(train_idx[p]) for p in parts]))
    return test, per_hospital


@contextmanager
def _phase(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except PhaseError:
        raise
    except HeflError as e:
        raise PhaseError(name, e) from e
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def _round_dict(r) -> dict:
    return {"round": r.round, "selected": list(r.selected), "sample_counts": list(r.sample_counts),
            "total_samples": r.total_samples, "digest": r.digest,
            "train_accuracy": r.train_accuracy, "test_accuracy": r.test_accuracy}


def run_scenario(config: ScenarioConfig) -> RunReport:
    timings = {}
    codec = FixedPointCodec(config.frac_bits)
    seeds = np.random.SeedSequence(config.seed)
    data_ss, init_ss, fl_ss, dealer_ss = seeds.spawn(4)
    bus = MessageBus()
    h = config.h

    with _phase("data", timings):
        data = load_dataset(config, int(data_ss.generate_state(1)[0]))
        test, splits = split_scenario(config, data, np.random.default_rng(data_ss))
        hospitals = []
        init_rngs = [np.random.default_rng(s) for s in init_ss.spawn(h)]
        for i, (hc, (val, parts)) in enumerate(zip(config.hospitals, splits)):
            spec = hc.model_spec(data.inputs.shape[1:], data.num_classes)
            edges = [EdgeServerState(f"{hc.name}/E{j}", p) for j, p in enumerate(parts)]
            hospitals.append(HospitalActor(
                i, hc.name, spec, edges, hc.fl,
                NodeSet(f"{hc.name}/B", config.ledger.hospital_nodes, bus), val,
                model=neural.init_params(spec, init_rngs[i], model_id=f"{hc.name}-init"),
            ))

    with _phase("federated", timings):
        for hosp, fl_seed in zip(hospitals, fl_ss.spawn(h)):
            def hook(params, role, hosp=hosp):
                submitter = hosp.server if role == "global" else f"{hosp.name}/E"
                return verify_and_append_model(hosp.ledger, params, submitter=submitter, codec=codec,
                                               hash_only=config.ledger.hash_only).accepted

            def transport(sender, receiver, params):
                bus.send(sender, receiver, "fl_model",
                         canonical_serialize(ModelRecord.from_params(params, sender, codec)))

            hosp.fl_result = run_hospital_fl(hosp.fl, hosp.edges, hosp.model, hook, name=hosp.name,
                                             test=test, rng=np.random.default_rng(fl_seed),
                                             transport=transport)
            hosp.model = hosp.fl_result.model
            if hosp.model.model_id not in hosp.ledger.chain.model_ids():
                raise PhaseError("federated", LedgerRejection(f"{hosp.name}: final model missing from ledger"))

    with _phase("encrypted_eval", timings):
        dealer_seeds = [int(s.generate_state(1)[0]) for s in dealer_ss.spawn(h)]
        mats, y_tune = cross_evaluate(hospitals, bus, codec, dealer_seeds, config.mpc_batch)
        bm = NodeSet("BM", config.ledger.bm_nodes, bus)
        for hosp, mat in zip(hospitals, mats):
            bus.broadcast(hosp.name, bm.node_ids(), "probabilities", mat.rows, session="BM")
            bus.broadcast(hosp.name, bm.node_ids(), "labels", y_tune.astype("<i8"), session="BM")

    with _phase("tuning", timings):
        grid = WeightGrid.from_step(config.grid_step)
        alpha_b, acc_b = grid_search_weights(mats, y_tune, grid)
        known = set().union(*(hosp.ledger.chain.model_ids() for hosp in hospitals))
        verdict = verify_and_append_weights(bm, alpha_b, [m.model_id for m in mats], acc_b, mats, y_tune,
                                            grid, known_ids=known, submitter="BM0")
        verdict.raise_for_status()

    with _phase("test_eval", timings):
        test_mats = [neural.forward(hosp.model, test.inputs) for hosp in hospitals]
        individual_test = [accuracy_score(np.argmax(p, axis=1), test.labels) for p in test_mats]
        ensemble_test = accuracy_score(ensemble_predict(test_mats, alpha_b), test.labels)
        individual_tune = [accuracy_score(np.argmax(m.rows, axis=1), y_tune) for m in mats]
        eval_x = np.concatenate([hosp.validation.inputs for hosp in hospitals])
        enc_gap = [float(np.max(np.abs(m.rows - neural.import_probabilities(
            neural.quantized_logits(hosp.model, eval_x, codec))))) for hosp, m in zip(hospitals, mats)]

    forbidden = set()
    for hosp in hospitals:
        for t in hosp.model.tensors:
            forbidden.add(fingerprint(np.asarray(encode_fixed(t, codec))))
            forbidden.add(fingerprint(t))
        forbidden.add(fingerprint(canonical_serialize(ModelRecord.from_params(hosp.model, hosp.server, codec))))
        forbidden.add(fingerprint(np.asarray(encode_fixed(hosp.validation.inputs, codec))))
        forbidden.add(fingerprint(hosp.validation.inputs))
        for e in hosp.edges:
            forbidden.add(fingerprint(e.partition.inputs))
    violations = privacy_audit(bus.log, forbidden)

    chains = {hosp.name: hosp.ledger.chain for hosp in hospitals}
    chains["BM"] = bm.chain
    body = {
        "scenario_id": config.scenario_id,
        "seed": config.seed,
        "parties": h,
        "frac_bits": config.frac_bits,
        "dataset": {"source": config.data.source, "samples": len(data), "test_samples": len(test),
                    "tuning_samples": int(len(y_tune)),
                    "tuning_provenance": {hosp.name: len(hosp.validation) for hosp in hospitals}},
        "hospitals": [
            {
                "name": hosp.name,
                "model_id": hosp.model.model_id,
                "spec_hash": hosp.model.spec_hash,
                "architecture": hosp.spec.to_dict(),
                "edges": {e.id: len(e.partition) for e in hosp.edges},
                "fl_rounds": [_round_dict(r) for r in hosp.fl_result.rounds],
                "verified_models": len(hosp.fl_result.verified_ids),
                "tuning_accuracy": individual_tune[i],
                "test_accuracy": individual_test[i],
                "encrypted_vs_quantized_max_prob_gap": enc_gap[i],
                "chain": {"length": len(hosp.ledger.chain), "head_hash": hosp.ledger.chain.head_hash.hex(),
                          "replicas_identical": hosp.ledger.replicas_identical()},
            }
            for i, hosp in enumerate(hospitals)
        ],
        "ensemble": {
            "alpha": list(alpha_b.alpha),
            "gm_ids": [m.model_id for m in mats],
            "grid_step": config.grid_step,
            "tuning_accuracy": acc_b,
            "test_accuracy": ensemble_test,
            "best_individual_test_accuracy": max(individual_test),
            "weight_block_hash": verdict.block.hash.hex(),
            "bm_dissenters": list(verdict.dissenters),
        },
        "bm_chain": {"length": len(bm.chain), "head_hash": bm.chain.head_hash.hex(),
                     "replicas_identical": bm.replicas_identical()},
        "communication": {"messages": len(bus.log), "ticks": bus.tick, "by_kind": bus.log.totals()},
        "privacy_audit": {"violations": len(violations),
                          "examples": [f"{m.sender}->{m.receiver}:{m.kind}" for m in violations[:5]]},
    }
    return RunReport(body, timings, chains, mats, y_tune, bus.log.to_rows())
