"""Hash-linked chains replicated over simulated ledger nodes.

Two payload kinds are recorded: models (per-hospital chains) and tuned
ensemble weights (the shared multi-institution chain).  A proposal is
accepted when a strict majority of nodes recompute the submitter's
declared digest.

Binary chain dump layout (all integers little-endian)::

    b"HEFLCHN1"  u64 block_count
    per block:   u64 height | 32B previous_hash | 32B payload_hash
                 u64 timestamp | 32B block_hash | u64 payload_len | payload
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bus import MessageBus
from .errors import ChainFormatError, QuorumFailure, UnknownModelId
from .neural import ModelParams
from .ring import DEFAULT_CODEC, FixedPointCodec, encode_fixed

ZERO_HASH = bytes(32)
MAGIC = b"HEFLCHN1"
_MODEL_TAG = b"MODL"
_WEIGHT_TAG = b"WGHT"


# ---------------------------------------------------------------------------
# canonical encoding

def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _pack_str(s: str) -> bytes:
    return _pack_bytes(s.encode("utf-8"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ChainFormatError("truncated record")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def bytes_(self) -> bytes:
        return self.take(self.u64())

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as e:
            raise ChainFormatError(f"bad utf-8 field: {e}") from None

    def done(self):
        if self.pos != len(self.data):
            raise ChainFormatError(f"{len(self.data) - self.pos} trailing bytes")


@dataclass(frozen=True)
class ModelRecord:
    """A model as stored on a hospital chain; weights in fixed-point form."""
    model_id: str
    spec_hash: str
    frac_bits: int
    tensors: tuple  # int64 arrays, or () in hash-only mode
    submitter: str
    weights_digest: str = ""

    @classmethod
    def from_params(cls, params: ModelParams, submitter: str,
                    codec: FixedPointCodec = DEFAULT_CODEC, hash_only: bool = False) -> "ModelRecord":
        tensors = tuple(np.asarray(encode_fixed(t, codec)).view(np.int64) for t in params.tensors)
        if hash_only:
            h = hashlib.sha256()
            for t in tensors:
                h.update(_tensor_bytes(t))
            return cls(params.model_id, params.spec_hash, codec.frac_bits, (), submitter, h.hexdigest())
        return cls(params.model_id, params.spec_hash, codec.frac_bits, tensors, submitter)


@dataclass(frozen=True)
class WeightRecord:
    gm_ids: tuple
    alpha: tuple
    accuracy: float
    submitter: str


def _tensor_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype="<i8")
    return struct.pack("<Q", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape) + t.tobytes()


def canonical_serialize(payload) -> bytes:
    if isinstance(payload, ModelRecord):
        out = [_MODEL_TAG, _pack_str(payload.model_id), _pack_str(payload.spec_hash),
               struct.pack("<Q", payload.frac_bits), struct.pack("<Q", len(payload.tensors))]
        out += [_tensor_bytes(t) for t in payload.tensors]
        out += [_pack_str(payload.weights_digest), _pack_str(payload.submitter)]
        return b"".join(out)
    if isinstance(payload, WeightRecord):
        out = [_WEIGHT_TAG, struct.pack("<Q", len(payload.gm_ids))]
        out += [_pack_str(g) for g in payload.gm_ids]
        out += [struct.pack("<Q", len(payload.alpha)), struct.pack(f"<{len(payload.alpha)}d", *payload.alpha)]
        out += [struct.pack("<d", payload.accuracy), _pack_str(payload.submitter)]
        return b"".join(out)
    raise TypeError(f"not a block payload: {type(payload).__name__}")


def decode_payload(data: bytes):
    r = _Reader(data)
    tag = r.take(4)
    if tag == _MODEL_TAG:
        model_id, spec_hash = r.str_(), r.str_()
        frac = r.u64()
        tensors = []
        for _ in range(r.u64()):
            ndim = r.u64()
            if ndim > 8:
                raise ChainFormatError("tensor rank too large")
            shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
            n = 1
            for d in shape:
                n *= d
            if 8 * n > len(r.data) - r.pos:
                raise ChainFormatError("tensor larger than the record")
            tensors.append(np.frombuffer(r.take(8 * n), dtype="<i8").reshape(shape))
        digest, submitter = r.str_(), r.str_()
        r.done()
        return ModelRecord(model_id, spec_hash, frac, tuple(tensors), submitter, digest)
    if tag == _WEIGHT_TAG:
        gm_ids = tuple(r.str_() for _ in range(r.u64()))
        k = r.u64()
        if k > 1 << 16:
            raise ChainFormatError("weight vector too long")
        alpha = struct.unpack(f"<{k}d", r.take(8 * k))
        acc = struct.unpack("<d", r.take(8))[0]
        submitter = r.str_()
        r.done()
        return WeightRecord(gm_ids, alpha, acc, submitter)
    raise ChainFormatError(f"unknown payload tag {tag!r}")


def compute_model_hash(model_bytes: bytes, model_id: str) -> bytes:
    return hashlib.sha256(model_bytes + model_id.encode("utf-8")).digest()


def compute_weight_hash(record_bytes: bytes) -> bytes:
    return hashlib.sha256(record_bytes).digest()


def payload_digest(data: bytes) -> bytes:
    """Digest a node derives from raw payload bytes; raises ChainFormatError if malformed."""
    payload = decode_payload(data)
    if isinstance(payload, ModelRecord):
        return compute_model_hash(data, payload.model_id)
    return compute_weight_hash(data)


# ---------------------------------------------------------------------------
# blocks and chains

def block_hash(height: int, previous_hash: bytes, payload_hash: bytes, timestamp: int) -> bytes:
    return hashlib.sha256(struct.pack("<Q", height) + previous_hash + payload_hash
                          + struct.pack("<Q", timestamp)).digest()


@dataclass(frozen=True)
class Block:
    height: int
    previous_hash: bytes
    payload_hash: bytes
    timestamp: int
    payload: bytes
    hash: bytes = b""

    def __post_init__(self):
        if not self.hash:
            object.__setattr__(self, "hash", block_hash(self.height, self.previous_hash,
                                                        self.payload_hash, self.timestamp))

    def decoded(self):
        return decode_payload(self.payload)

    def to_bytes(self) -> bytes:
        return (struct.pack("<Q", self.height) + self.previous_hash + self.payload_hash
                + struct.pack("<Q", self.timestamp) + self.hash + _pack_bytes(self.payload))


@dataclass
class Chain:
    name: str = ""
    blocks: list = field(default_factory=list)

    def __len__(self):
        return len(self.blocks)

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    def next_block(self, payload: bytes, payload_hash: bytes, timestamp: int) -> Block:
        return Block(len(self.blocks), self.head_hash, payload_hash, timestamp, payload)

    def append(self, block: Block):
        if block.height != len(self.blocks) or block.previous_hash != self.head_hash:
            raise ChainFormatError(f"block {block.height} does not extend {self.name or 'chain'}")
        self.blocks.append(block)

    def to_bytes(self) -> bytes:
        return MAGIC + struct.pack("<Q", len(self.blocks)) + b"".join(b.to_bytes() for b in self.blocks)

    def model_ids(self) -> set:
        out = set()
        for b in self.blocks:
            p = b.decoded()
            if isinstance(p, ModelRecord):
                out.add(p.model_id)
        return out

    def index(self) -> list:
        rows = []
        for b in self.blocks:
            try:
                p = b.decoded()
                kind = "model" if isinstance(p, ModelRecord) else "weights"
                ident = p.model_id if kind == "model" else ",".join(p.gm_ids)
                submitter = p.submitter
            except ChainFormatError:
                kind, ident, submitter = "invalid", "", ""
            rows.append({"height": b.height, "hash": b.hash.hex(), "previous_hash": b.previous_hash.hex(),
                         "payload_hash": b.payload_hash.hex(), "timestamp": b.timestamp,
                         "payload_type": kind, "id": ident, "submitter": submitter})
        return rows


def chain_from_bytes(data: bytes, name: str = "") -> Chain:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise ChainFormatError("missing chain header")
    count = r.u64()
    chain = Chain(name)
    for i in range(count):
        try:
            height = r.u64()
            prev, ph = r.take(32), r.take(32)
            ts = r.u64()
            h = r.take(32)
            chain.blocks.append(Block(height, prev, ph, ts, r.bytes_(), h))
        except ChainFormatError as e:
            raise ChainFormatError(f"block {i}: {e}", height=i) from None
    try:
        r.done()
    except ChainFormatError as e:
        raise ChainFormatError(f"after block {count - 1}: {e}", height=max(count - 1, 0)) from None
    return chain


def validate_chain(chain: Chain):
    """(True, None) if intact, else (False, height of the first bad block)."""
    prev = ZERO_HASH
    for i, b in enumerate(chain.blocks):
        if b.height != i or b.previous_hash != prev:
            return False, i
        try:
            digest = payload_digest(b.payload)
        except ChainFormatError:
            return False, i
        if digest != b.payload_hash:
            return False, i
        if block_hash(b.height, b.previous_hash, b.payload_hash, b.timestamp) != b.hash:
            return False, i
        prev = b.hash
    return True, None


def dump_chain(chain: Chain, path) -> Path:
    """Write the binary block stream and a JSON index next to it."""
    path = Path(path)
    path.write_bytes(chain.to_bytes())
    index = {"name": chain.name, "length": len(chain), "head_hash": chain.head_hash.hex(), "blocks": chain.index()}
    path.with_suffix(".index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path


def load_chain(path) -> Chain:
    path = Path(path)
    return chain_from_bytes(path.read_bytes(), name=path.stem)


# ---------------------------------------------------------------------------
# nodes and consensus

@dataclass
class LedgerNode:
    node_id: str
    chain: Chain
    fault: object = None  # callable(kind, obj) -> obj, simulates corrupted inputs

    def view(self, kind: str, obj):
        return self.fault(kind, obj) if self.fault is not None else obj


class NodeSet:
    def __init__(self, name: str, m: int, bus: MessageBus | None = None):
        if m < 1:
            raise ValueError("a ledger needs at least one node")
        self.name = name
        self.bus = bus
        self.nodes = [LedgerNode(f"{name}{i}", Chain(name)) for i in range(m)]
        self.proposals = 0

    def __len__(self):
        return len(self.nodes)

    @property
    def chain(self) -> Chain:
        return self.nodes[0].chain

    def node_ids(self) -> list:
        return [n.node_id for n in self.nodes]

    def replicas_identical(self) -> bool:
        first = self.nodes[0].chain.to_bytes()
        return all(n.chain.to_bytes() == first for n in self.nodes[1:])

    def snapshot(self) -> list:
        return [n.chain.to_bytes() for n in self.nodes]

    def tick(self) -> int:
        if self.bus is not None:
            return self.bus.tick
        self.proposals += 1
        return self.proposals


@dataclass
class Verdict:
    accepted: bool
    block: Block | None
    declared: bytes
    votes: dict
    dissenters: tuple

    def raise_for_status(self):
        if not self.accepted:
            raise QuorumFailure(f"no majority for digest {self.declared.hex()[:16]}", self.dissenters)
        return self


def _consensus(nodes: NodeSet, submitter: str, payload: bytes, declared: bytes, votes: dict) -> Verdict:
    """Broadcast the votes, tally, and append on a strict majority for the declared digest."""
    if nodes.bus is not None:
        for node_id, h in votes.items():
            nodes.bus.broadcast(node_id, nodes.node_ids(), "ledger_vote", h or b"", session=nodes.name)
    agree = sum(1 for h in votes.values() if h == declared)
    dissenters = tuple(n for n, h in votes.items() if h != declared)
    if 2 * agree <= len(nodes):
        return Verdict(False, None, declared, votes, dissenters)
    block = nodes.chain.next_block(payload, declared, nodes.tick())
    for n in nodes.nodes:
        n.chain.append(block)
    return Verdict(True, block, declared, votes, dissenters)


def _propose(nodes: NodeSet, submitter: str, payload: bytes):
    if nodes.bus is not None:
        nodes.bus.broadcast(submitter, nodes.node_ids(), "ledger_proposal", payload, session=nodes.name)


def verify_and_append_model(nodes: NodeSet, model, model_id: str | None = None,
                            submitter: str = "", codec: FixedPointCodec = DEFAULT_CODEC,
                            hash_only: bool = False) -> Verdict:
    """Every node hashes the proposed model independently; append on strict majority."""
    if isinstance(model, ModelParams):
        record = ModelRecord.from_params(model, submitter, codec, hash_only)
    else:
        record = model
    if model_id is not None and model_id != record.model_id:
        record = ModelRecord(model_id, record.spec_hash, record.frac_bits, record.tensors,
                             record.submitter, record.weights_digest)
    payload = canonical_serialize(record)
    declared = compute_model_hash(payload, record.model_id)
    _propose(nodes, submitter, payload)
    votes = {}
    for n in nodes.nodes:
        try:
            votes[n.node_id] = payload_digest(n.view("model", payload))
        except ChainFormatError:
            votes[n.node_id] = None
    return _consensus(nodes, submitter, payload, declared, votes)


def verify_and_append_weights(nodes: NodeSet, alpha, gm_ids, accuracy: float, mats, y, grid,
                              known_ids=None, submitter: str = "") -> Verdict:
    """Each node re-runs the grid search on its copy of the probability
    matrices and hashes the resulting weight record."""
    from .ensemble import grid_search_weights

    gm_ids = tuple(gm_ids)
    if known_ids is not None:
        missing = [g for g in gm_ids if g not in known_ids]
        if missing:
            raise UnknownModelId(f"models not on any hospital chain: {missing}")
    alpha = tuple(float(a) for a in getattr(alpha, "alpha", alpha))
    record = WeightRecord(gm_ids, alpha, float(accuracy), submitter)
    payload = canonical_serialize(record)
    declared = compute_weight_hash(payload)
    _propose(nodes, submitter, payload)
    votes = {}
    for n in nodes.nodes:
        local_mats = n.view("probabilities", mats)
        best, acc = grid_search_weights(local_mats, y, grid)
        mine = canonical_serialize(WeightRecord(gm_ids, best.alpha, float(acc), submitter))
        votes[n.node_id] = compute_weight_hash(mine)
    return _consensus(nodes, submitter, payload, declared, votes)
