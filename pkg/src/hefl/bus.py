"""Deterministic in-process message bus.

Every transfer between simulated actors goes through :class:`MessageBus`,
which stamps it with a logical tick and appends a record to the
:class:`MessageLog`.  Payload bytes are not retained, only their size and a
SHA-256 fingerprint, which is enough for the privacy audit to check that no
plaintext tensor ever crossed the bus.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Message:
    tick: int
    sender: str
    receiver: str
    kind: str
    nbytes: int
    digest: str
    session: str = ""


def payload_bytes(payload) -> bytes:
    if isinstance(payload, (bytes, bytearray)):
        return bytes(payload)
    if isinstance(payload, (np.ndarray, np.generic)):
        return np.ascontiguousarray(payload).tobytes()
    if isinstance(payload, str):
        return payload.encode("utf-8")
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def fingerprint(payload) -> str:
    return hashlib.sha256(payload_bytes(payload)).hexdigest()


@dataclass
class MessageLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, kind: str) -> list:
        return [m for m in self.records if m.kind == kind]

    def totals(self) -> dict:
        """Message and byte counts per kind."""
        count = Counter()
        size = Counter()
        for m in self.records:
            count[m.kind] += 1
            size[m.kind] += m.nbytes
        return {k: {"messages": count[k], "bytes": size[k]} for k in sorted(count)}

    def digests(self) -> set:
        return {m.digest for m in self.records}

    def to_rows(self) -> list:
        return [
            [m.tick, m.sender, m.receiver, m.kind, m.nbytes, m.digest, m.session]
            for m in self.records
        ]


class MessageBus:
    """Totally ordered delivery: one tick per message, in send order."""

    def __init__(self, log: MessageLog | None = None, fingerprints: bool = True):
        self.log = log if log is not None else MessageLog()
        self.tick = 0
        self.fingerprints = fingerprints

    def send(self, sender: str, receiver: str, kind: str, payload, session: str = "") -> int:
        data = payload_bytes(payload)
        digest = hashlib.sha256(data).hexdigest() if self.fingerprints else ""
        self.tick += 1
        self.log.records.append(Message(self.tick, sender, receiver, kind, len(data), digest, session))
        return self.tick

    def broadcast(self, sender: str, receivers, kind: str, payload, session: str = ""):
        data = payload_bytes(payload)
        digest = hashlib.sha256(data).hexdigest() if self.fingerprints else ""
        for r in receivers:
            if r == sender:
                continue
            self.tick += 1
            self.log.records.append(Message(self.tick, sender, r, kind, len(data), digest, session))
