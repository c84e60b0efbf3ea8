"""Additive and XOR secret sharing, dealer-issued correlated randomness,
and conversions between the arithmetic and binary share domains.

Inside a :class:`Session` a shared tensor of shape ``S`` is held as one
``uint64`` array of shape ``(h, *S)``: row ``i`` is party ``i``'s share.
Everything a party computes "locally" is a row-wise numpy operation; the
only cross-party traffic is :meth:`Session.open` / :meth:`Session.open_xor`
and dealer deliveries, all of which go through the message bus.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .bus import MessageBus
from .errors import (
    DealerExhausted,
    DegenerateParties,
    LengthMismatch,
    SessionMismatch,
    SingleUseViolation,
)
from .ring import DTYPE, Q, random_ring

WORD_BITS = 64
_ONE = DTYPE(1)


def _mask(bits: int) -> np.uint64:
    return DTYPE((1 << bits) - 1) if bits < WORD_BITS else DTYPE(Q - 1)


# ---------------------------------------------------------------------------
# per-party share vectors

@dataclass(frozen=True)
class ArithmeticShareVector:
    owner: int
    elems: np.ndarray
    session_id: str = ""


@dataclass(frozen=True)
class BinaryShareVector:
    owner: int
    bits: np.ndarray
    session_id: str = ""


def _check_parties(h: int):
    if h < 2:
        raise DegenerateParties(f"need at least 2 parties, got {h}")


def _new_session_id(rng: np.random.Generator) -> str:
    return f"s{int(rng.integers(0, 2**32)):08x}"


def additive_split(x, h: int, rng: np.random.Generator) -> np.ndarray:
    """(h, *shape) array whose rows sum to ``x`` mod 2^64."""
    _check_parties(h)
    x = np.asarray(x, dtype=DTYPE)
    shares = np.empty((h,) + x.shape, dtype=DTYPE)
    shares[:-1] = random_ring(rng, (h - 1,) + x.shape)
    shares[-1] = x - shares[:-1].sum(axis=0, dtype=DTYPE)
    return shares


def xor_split(x, h: int, rng: np.random.Generator, bits: int = WORD_BITS) -> np.ndarray:
    _check_parties(h)
    x = np.asarray(x, dtype=DTYPE)
    shares = np.empty((h,) + x.shape, dtype=DTYPE)
    shares[:-1] = random_ring(rng, (h - 1,) + x.shape) & _mask(bits)
    shares[-1] = x ^ np.bitwise_xor.reduce(shares[:-1], axis=0)
    return shares


def share_arithmetic(x, h: int, rng: np.random.Generator, session_id: str | None = None):
    """Split ring vector ``x`` into ``h`` additive shares (h-1 uniform, last fixes the sum)."""
    sid = session_id if session_id is not None else _new_session_id(rng)
    rows = additive_split(np.atleast_1d(np.asarray(x, dtype=DTYPE)), h, rng)
    return [ArithmeticShareVector(i, rows[i], sid) for i in range(h)]


def _check_consistent(shares, attr):
    if not shares:
        raise LengthMismatch("no shares given")
    sid = shares[0].session_id
    size = getattr(shares[0], attr).shape
    for s in shares[1:]:
        if s.session_id != sid:
            raise SessionMismatch(f"share of session {s.session_id!r} mixed with {sid!r}")
        if getattr(s, attr).shape != size:
            raise LengthMismatch(f"share lengths differ: {getattr(s, attr).shape} vs {size}")


def reconstruct_arithmetic(shares) -> np.ndarray:
    _check_consistent(shares, "elems")
    return np.stack([s.elems for s in shares]).sum(axis=0, dtype=DTYPE)


def share_binary(x, h: int, rng: np.random.Generator, session_id: str | None = None):
    sid = session_id if session_id is not None else _new_session_id(rng)
    rows = xor_split(np.atleast_1d(np.asarray(x, dtype=DTYPE)), h, rng)
    return [BinaryShareVector(i, rows[i], sid) for i in range(h)]


def reconstruct_binary(shares) -> np.ndarray:
    _check_consistent(shares, "bits")
    return np.bitwise_xor.reduce(np.stack([s.bits for s in shares]), axis=0)


def stack_arithmetic(shares) -> np.ndarray:
    _check_consistent(shares, "elems")
    return np.stack([s.elems for s in sorted(shares, key=lambda s: s.owner)])


def unstack_arithmetic(rows: np.ndarray, session_id: str = ""):
    return [ArithmeticShareVector(i, rows[i], session_id) for i in range(rows.shape[0])]


# ---------------------------------------------------------------------------
# correlated randomness

@dataclass
class _SingleUse:
    _consumed: bool = field(default=False, init=False, repr=False)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def consume(self):
        if self._consumed:
            raise SingleUseViolation(f"{type(self).__name__} already used")
        self._consumed = True
        return self


@dataclass
class BeaverTriple(_SingleUse):
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def holds(self) -> bool:
        a, b, c = (x.sum(axis=0, dtype=DTYPE) for x in (self.a, self.b, self.c))
        with np.errstate(over="ignore"):
            return bool(np.array_equal(c, a * b))


@dataclass
class BinaryTriple(_SingleUse):
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    bits: int = WORD_BITS

    def holds(self) -> bool:
        a, b, c = (np.bitwise_xor.reduce(x, axis=0) for x in (self.a, self.b, self.c))
        return bool(np.array_equal(c, a & b))


@dataclass
class BitConversionPair(_SingleUse):
    r_arith: np.ndarray
    r_bin: np.ndarray

    def holds(self) -> bool:
        ra = self.r_arith.sum(axis=0, dtype=DTYPE)
        rb = np.bitwise_xor.reduce(self.r_bin, axis=0)
        return bool(np.array_equal(ra, rb) and np.all(ra <= 1))


@dataclass
class TruncationPair(_SingleUse):
    r: np.ndarray
    r_trunc: np.ndarray
    bits: int

    def holds(self) -> bool:
        r = self.r.sum(axis=0, dtype=DTYPE)
        return bool(np.array_equal(self.r_trunc.sum(axis=0, dtype=DTYPE), r >> DTYPE(self.bits)))


def dealer_beaver(h: int, shape, rng: np.random.Generator) -> BeaverTriple:
    a = random_ring(rng, shape)
    b = random_ring(rng, shape)
    return BeaverTriple(additive_split(a, h, rng), additive_split(b, h, rng), additive_split(a * b, h, rng))


def dealer_binary_triple(h: int, shape, rng: np.random.Generator, bits: int = WORD_BITS) -> BinaryTriple:
    m = _mask(bits)
    a = random_ring(rng, shape) & m
    b = random_ring(rng, shape) & m
    return BinaryTriple(
        xor_split(a, h, rng, bits), xor_split(b, h, rng, bits), xor_split(a & b, h, rng, bits), bits
    )


def dealer_bit_pair(h: int, shape, rng: np.random.Generator) -> BitConversionPair:
    r = random_ring(rng, shape) & _ONE
    return BitConversionPair(additive_split(r, h, rng), xor_split(r, h, rng, bits=1))


# Truncation masks are drawn from [0, 2^63); see truncate() for why.
TRUNC_MASK_BITS = 63


def dealer_trunc_pair(h: int, shape, bits: int, rng: np.random.Generator) -> TruncationPair:
    r = rng.integers(0, 1 << TRUNC_MASK_BITS, size=shape, dtype=DTYPE)
    return TruncationPair(additive_split(r, h, rng), additive_split(r >> DTYPE(bits), h, rng), bits)


@dataclass
class DealerState:
    seed: int
    issued: Counter = field(default_factory=Counter)


class Dealer:
    """Trusted third party issuing correlated randomness.

    ``budget`` maps a kind ("beaver", "and_word", "and_bit", "bit_pair",
    "trunc_pair") to the number of elements that may be issued; requests
    beyond it raise :class:`DealerExhausted`.  ``None`` means unlimited.
    """

    KINDS = ("beaver", "and_word", "and_bit", "bit_pair", "trunc_pair")

    def __init__(self, h: int, seed: int, budget: dict | None = None, check: bool = False):
        _check_parties(h)
        self.h = h
        self.state = DealerState(seed)
        self.rng = np.random.default_rng(seed)
        self.budget = dict(budget) if budget is not None else None
        self.check = check

    @property
    def issued(self) -> Counter:
        return self.state.issued

    def _reserve(self, kind: str, shape):
        n = int(np.prod(shape, dtype=np.int64))
        if self.budget is not None:
            left = self.budget.get(kind, 0) - self.state.issued[kind]
            if n > left:
                raise DealerExhausted(f"{kind}: requested {n}, {left} left")
        self.state.issued[kind] += n

    def _issued(self, obj):
        if self.check and not obj.holds():
            raise AssertionError(f"dealer issued a malformed {type(obj).__name__}")
        return obj

    def beaver(self, shape) -> BeaverTriple:
        self._reserve("beaver", shape)
        return self._issued(dealer_beaver(self.h, shape, self.rng))

    def binary_triple(self, shape, bits: int = WORD_BITS) -> BinaryTriple:
        self._reserve("and_word" if bits == WORD_BITS else "and_bit", shape)
        return self._issued(dealer_binary_triple(self.h, shape, self.rng, bits))

    def bit_pair(self, shape) -> BitConversionPair:
        self._reserve("bit_pair", shape)
        return self._issued(dealer_bit_pair(self.h, shape, self.rng))

    def trunc_pair(self, shape, bits: int) -> TruncationPair:
        self._reserve("trunc_pair", shape)
        return self._issued(dealer_trunc_pair(self.h, shape, bits, self.rng))

    def pairwise_seeds(self) -> dict:
        return {
            (i, j): int(self.rng.integers(0, 2**63))
            for i, j in itertools.combinations(range(self.h), 2)
        }


# ---------------------------------------------------------------------------
# runtime

class Session:
    """One MPC session among ``h`` parties sharing a dealer and a bus."""

    def __init__(self, parties, dealer: Dealer, bus: MessageBus | None = None,
                 session_id: str = "s0", dealer_name: str = "dealer"):
        self.parties = list(parties)
        _check_parties(len(self.parties))
        if dealer.h != len(self.parties):
            raise DegenerateParties("dealer and session disagree on party count")
        self.dealer = dealer
        self.bus = bus if bus is not None else MessageBus()
        self.session_id = session_id
        self.dealer_name = dealer_name
        seeds = dealer.pairwise_seeds()
        for (i, j), s in seeds.items():
            for p in (i, j):
                self.bus.send(dealer_name, self.parties[p], "seed", s.to_bytes(8, "little"), session_id)
        self._prg = {pair: np.random.default_rng(s) for pair, s in seeds.items()}

    @property
    def h(self) -> int:
        return len(self.parties)

    # -- communication --
    def open(self, shares: np.ndarray, kind: str = "open") -> np.ndarray:
        """Every party broadcasts its share; all learn the modular sum."""
        for i, name in enumerate(self.parties):
            self.bus.broadcast(name, self.parties, kind, shares[i], self.session_id)
        return shares.sum(axis=0, dtype=DTYPE)

    def open_xor(self, shares: np.ndarray, kind: str = "open_xor") -> np.ndarray:
        for i, name in enumerate(self.parties):
            self.bus.broadcast(name, self.parties, kind, shares[i], self.session_id)
        return np.bitwise_xor.reduce(shares, axis=0)

    def reveal_to(self, shares: np.ndarray, receiver: int, kind: str = "reveal") -> np.ndarray:
        """Send all shares to one party, which reconstructs."""
        for i, name in enumerate(self.parties):
            if i != receiver:
                self.bus.send(name, self.parties[receiver], kind, shares[i], self.session_id)
        return shares.sum(axis=0, dtype=DTYPE)

    def _deliver(self, obj, *arrays):
        for i, name in enumerate(self.parties):
            payload = b"".join(np.ascontiguousarray(a[i]).tobytes() for a in arrays)
            self.bus.send(self.dealer_name, name, "dealer", payload, self.session_id)
        return obj.consume()

    # -- correlated randomness, consumed on delivery --
    def beaver(self, shape) -> BeaverTriple:
        t = self.dealer.beaver(shape)
        return self._deliver(t, t.a, t.b, t.c)

    def binary_triple(self, shape, bits: int = WORD_BITS) -> BinaryTriple:
        t = self.dealer.binary_triple(shape, bits)
        return self._deliver(t, t.a, t.b, t.c)

    def bit_pair(self, shape) -> BitConversionPair:
        p = self.dealer.bit_pair(shape)
        return self._deliver(p, p.r_arith, p.r_bin)

    def trunc_pair(self, shape, bits: int) -> TruncationPair:
        p = self.dealer.trunc_pair(shape, bits)
        return self._deliver(p, p.r, p.r_trunc)

    # -- sharing --
    def zero_share(self, shape) -> np.ndarray:
        """Pseudorandom sharing of zero from the pairwise seeds; no messages."""
        z = np.zeros((self.h,) + tuple(shape), dtype=DTYPE)
        for (i, j), prg in self._prg.items():
            r = random_ring(prg, shape)
            z[i] += r
            z[j] -= r
        return z

    def share_input(self, owner: int, x) -> np.ndarray:
        """Fresh sharing of a value private to ``owner``: trivial sharing plus a zero-share."""
        x = np.asarray(x, dtype=DTYPE)
        shares = self.zero_share(x.shape)
        shares[owner] += x
        return shares

    def public(self, x) -> np.ndarray:
        """Trivial sharing of a public constant (held by party 0)."""
        x = np.asarray(x, dtype=DTYPE)
        out = np.zeros((self.h,) + x.shape, dtype=DTYPE)
        out[0] = x
        return out


# ---------------------------------------------------------------------------
# share conversion

def binary_and(session: Session, x: np.ndarray, y: np.ndarray, bits: int = WORD_BITS) -> np.ndarray:
    """AND of two XOR-shared values with one dealer triple per element."""
    t = session.binary_triple(x.shape[1:], bits)
    opened = session.open_xor(np.stack([x ^ t.a, y ^ t.b], axis=1), kind="and_open")
    e, d = opened[0], opened[1]
    z = t.c ^ (e & t.b) ^ (t.a & d)
    z[0] ^= e & d
    return z


def binary_add(session: Session, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Ripple-carry addition mod 2^64 of two XOR-shared words."""
    p = a ^ b
    g = binary_and(session, a, b)
    carry = g & _ONE
    carries = carry << _ONE
    for k in range(1, WORD_BITS - 1):
        kk = DTYPE(k)
        pk = (p >> kk) & _ONE
        gk = (g >> kk) & _ONE
        carry = gk ^ binary_and(session, pk, carry, bits=1)
        carries ^= carry << DTYPE(k + 1)
    return p ^ carries


def a2b(session: Session, x: np.ndarray) -> np.ndarray:
    """Arithmetic shares -> XOR shares of the same 64-bit pattern.

    Each party's share enters the circuit as a trivial XOR sharing; the h
    shares are then summed by h-1 sequential ripple-carry adders.
    """
    def trivial(i):
        out = np.zeros_like(x)
        out[i] = x[i]
        return out

    acc = trivial(0)
    for i in range(1, x.shape[0]):
        acc = binary_add(session, acc, trivial(i))
    return acc


def b2a(session: Session, x: np.ndarray, nbits: int = WORD_BITS) -> np.ndarray:
    """XOR shares -> arithmetic shares of the low ``nbits`` bits of the pattern.

    Each bit is masked with a dealer bit pair, opened, and lifted as
    r + z - 2rz; the bits are recombined with weights 2^b.
    """
    shifts = np.arange(nbits, dtype=DTYPE)
    bits = (x[..., None] >> shifts) & _ONE
    pair = session.bit_pair(bits.shape[1:])
    z = session.open_xor(bits ^ pair.r_bin, kind="b2a_open")
    lifted = pair.r_arith * (_ONE - DTYPE(2) * z)
    lifted[0] += z
    weights = _ONE << shifts
    return (lifted * weights).sum(axis=-1, dtype=DTYPE)
