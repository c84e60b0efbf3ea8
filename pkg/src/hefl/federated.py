"""FedAVG inside one hospital: edge servers train locally, the central
server averages their models weighted by sample count."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import neural
from .errors import KTooLarge, LedgerRejection, SpecMismatch, ZeroSamples
from .neural import LabeledDataset, ModelParams


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 10
    epochs: int = 1
    participants_per_round: int = 2
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.epochs < 1 or self.participants_per_round < 1:
            raise ValueError("rounds, epochs and participants_per_round must be >= 1")
        if self.learning_rate < 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be >= 0 and batch_size >= 1")


@dataclass
class EdgeServerState:
    id: str
    partition: LabeledDataset
    local_params: ModelParams | None = None


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple
    sample_counts: tuple
    total_samples: int
    digest: str
    train_accuracy: float
    test_accuracy: float | None = None


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256(params.spec_hash.encode())
    for t in params.tensors:
        h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return h.hexdigest()


def select_participants(edges, k: int, rng: np.random.Generator) -> list:
    """k distinct edge indices, uniformly without replacement, returned sorted."""
    if k > len(edges):
        raise KTooLarge(f"asked for {k} participants out of {len(edges)}")
    return sorted(int(i) for i in rng.choice(len(edges), size=k, replace=False))


def local_train(w_t: ModelParams, edge: EdgeServerState, epochs: int, lr: float,
                batch_size: int | None = None, rng: np.random.Generator | None = None) -> ModelParams:
    """e epochs of minibatch SGD from w_t on the edge's partition.

    The returned model's ``sample_count`` is the partition size N_j.
    """
    if edge.local_params is not None and edge.local_params.spec_hash != w_t.spec_hash:
        raise SpecMismatch(f"edge {edge.id} runs a different architecture")
    data = edge.partition
    n = len(data)
    w = w_t
    if n:
        bs = n if batch_size is None else min(batch_size, n)
        for _ in range(epochs):
            order = rng.permutation(n) if rng is not None else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                w = neural.sgd_step(w, neural.gradient(w, data.inputs[idx], data.labels[idx]), lr)
    out = w.with_tensors(w.tensors, sample_count=n)
    edge.local_params = out
    return out


def aggregation_weights(counts) -> list:
    total = sum(counts)
    if total <= 0:
        raise ZeroSamples("participants hold no samples")
    return [Fraction(c, total) for c in counts]


def fedavg_aggregate(models, model_id: str | None = None) -> ModelParams:
    """Sample-weighted average sum_j (N_j / N) w_j over (params, N_j) pairs."""
    models = list(models)
    if not models:
        raise ZeroSamples("nothing to aggregate")
    first = models[0][0]
    for p, _ in models[1:]:
        if p.spec_hash != first.spec_hash:
            raise SpecMismatch("cannot aggregate models of different architectures")
    counts = [int(n) for _, n in models]
    weights = [float(f) for f in aggregation_weights(counts)]
    tensors = []
    for i in range(len(first.tensors)):
        acc = np.zeros_like(first.tensors[i])
        for (p, _), a in zip(models, weights):
            acc += a * p.tensors[i]
        tensors.append(acc)
    return first.with_tensors(
        tensors, model_id=model_id if model_id is not None else first.model_id, sample_count=sum(counts)
    )


def _union(edges) -> LabeledDataset:
    parts = [e.partition for e in edges]
    return LabeledDataset(np.concatenate([p.inputs for p in parts]),
                          np.concatenate([p.labels for p in parts]), parts[0].num_classes)


@dataclass
class HospitalFLResult:
    model: ModelParams
    rounds: list = field(default_factory=list)
    verified_ids: list = field(default_factory=list)


def run_hospital_fl(config: FLConfig, edges, initial: ModelParams, ledger_hook=None,
                    name: str = "H", test: LabeledDataset | None = None,
                    rng: np.random.Generator | None = None, transport=None) -> HospitalFLResult:
    """T rounds of FedAVG.  Every local model and every aggregate passes
    ``ledger_hook(params, role)`` before it is used; a falsy return aborts
    with :class:`LedgerRejection`.  ``transport(sender, receiver, params)``
    is called for each model transfer so the caller can log it.
    """
    if not edges:
        raise ValueError("a hospital needs at least one edge server")
    for e in edges:
        if e.local_params is not None and e.local_params.spec_hash != initial.spec_hash:
            raise SpecMismatch(f"edge {e.id} runs a different architecture")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    server = f"{name}/S"
    train = _union(edges)
    result = HospitalFLResult(initial)

    def check(params, role):
        if ledger_hook is not None and not ledger_hook(params, role):
            raise LedgerRejection(f"{name}: ledger rejected {role} model {params.model_id}")
        result.verified_ids.append(params.model_id)

    w_t = initial
    for t in range(config.rounds):
        chosen = select_participants(edges, config.participants_per_round, rng)
        local = []
        for j in chosen:
            edge = edges[j]
            if transport is not None:
                transport(server, edge.id, w_t)
            m = local_train(w_t, edge, config.epochs, config.learning_rate, config.batch_size, rng)
            m = m.with_tensors(m.tensors, model_id=f"{name}-r{t}-{edge.id.split('/')[-1]}")
            if transport is not None:
                transport(edge.id, server, m)
            check(m, "local")
            local.append((m, m.sample_count))
        w_t = fedavg_aggregate(local, model_id=f"{name}-gm-r{t}")
        check(w_t, "global")
        result.rounds.append(RoundRecord(
            round=t,
            selected=tuple(edges[j].id for j in chosen),
            sample_counts=tuple(n for _, n in local),
            total_samples=sum(n for _, n in local),
            digest=params_digest(w_t),
            train_accuracy=neural.evaluate(w_t, train) if len(train) else 0.0,
            test_accuracy=neural.evaluate(w_t, test) if test is not None and len(test) else None,
        ))
    result.model = w_t
    return result
