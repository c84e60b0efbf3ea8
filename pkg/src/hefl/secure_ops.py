"""Secure computation kernels over arithmetic shares.

A :class:`SecureTensor` carries its fixed-point precision: ``frac_bits`` is
``f`` for encoded reals, ``2f`` straight after a product, and ``0`` for
{0,1} indicator tensors produced by comparisons.  Ops refuse to add tensors
of different precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PrecisionMismatch, ShapeMismatch
from .neural import AvgPool, Conv2d, Dense, Flatten, ModelSpec, ReLU, im2col_index
from .ring import DEFAULT_CODEC, DTYPE, FixedPointCodec, decode_fixed, encode_fixed
from .sharing import Session, a2b, b2a

# Values entering a truncation must satisfy |x| < 2^TRUNC_HEADROOM_BITS.
TRUNC_HEADROOM_BITS = 52


@dataclass
class SecureTensor:
    shares: np.ndarray
    frac_bits: int
    session: Session

    @property
    def shape(self) -> tuple:
        return self.shares.shape[1:]

    def __len__(self):
        return self.shape[0]

    def reshape(self, *shape) -> "SecureTensor":
        return SecureTensor(self.shares.reshape((self.shares.shape[0],) + tuple(shape)), self.frac_bits, self.session)


def share_tensor(session: Session, owner: int, x, codec: FixedPointCodec = DEFAULT_CODEC) -> SecureTensor:
    """Encode a real array held by ``owner`` and share it among the session."""
    return SecureTensor(session.share_input(owner, encode_fixed(x, codec)), codec.frac_bits, session)


def share_ring(session: Session, owner: int, r, frac_bits: int) -> SecureTensor:
    return SecureTensor(session.share_input(owner, r), frac_bits, session)


def reveal(x: SecureTensor) -> np.ndarray:
    """Reconstruct without any messages (test and oracle use only)."""
    return x.shares.sum(axis=0, dtype=DTYPE)


def reveal_real(x: SecureTensor) -> np.ndarray:
    return decode_fixed(reveal(x), frac_bits=x.frac_bits)


def _same(x: SecureTensor, y: SecureTensor):
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    if x.frac_bits != y.frac_bits:
        raise PrecisionMismatch(f"cannot combine frac_bits {x.frac_bits} and {y.frac_bits}")


def sec_add(x: SecureTensor, y: SecureTensor) -> SecureTensor:
    _same(x, y)
    return SecureTensor(x.shares + y.shares, x.frac_bits, x.session)


def sec_sub(x: SecureTensor, y: SecureTensor) -> SecureTensor:
    _same(x, y)
    return SecureTensor(x.shares - y.shares, x.frac_bits, x.session)


def sec_add_public(x: SecureTensor, c) -> SecureTensor:
    """Add a public ring constant (already at ``x.frac_bits``)."""
    out = x.shares.copy()
    out[0] += np.asarray(c, dtype=DTYPE)
    return SecureTensor(out, x.frac_bits, x.session)


def sec_mul_public(x: SecureTensor, c, c_frac_bits: int) -> SecureTensor:
    return SecureTensor(x.shares * np.asarray(c, dtype=DTYPE), x.frac_bits + c_frac_bits, x.session)


def sec_mul(x: SecureTensor, y: SecureTensor, triple=None) -> SecureTensor:
    """Beaver multiplication; the result carries the summed precision."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    s = x.session
    t = triple.consume() if triple is not None else s.beaver(x.shape)
    opened = s.open(np.stack([x.shares - t.a, y.shares - t.b], axis=1), kind="beaver_open")
    eps, delta = opened[0], opened[1]
    with np.errstate(over="ignore"):  # 0-d operands become numpy scalars, which warn on wraparound
        z = t.c + eps * t.b + t.a * delta
        z[0] += eps * delta
    return SecureTensor(z, x.frac_bits + y.frac_bits, s)


def sec_truncate(x: SecureTensor, codec: FixedPointCodec = DEFAULT_CODEC, pair=None) -> SecureTensor:
    """Bring a 2f-precision tensor back to f bits.

    The input is shifted to be non-negative, masked with a dealer value
    r < 2^63 so the opened sum cannot wrap, and floor-shifted in the clear;
    subtracting the dealer's share of r >> f leaves floor(x / 2^f) + {0, 1}.
    """
    f = codec.frac_bits
    if x.frac_bits != 2 * f:
        raise PrecisionMismatch(f"truncate expects frac_bits {2 * f}, got {x.frac_bits}")
    s = x.session
    p = pair.consume() if pair is not None else s.trunc_pair(x.shape, f)
    biased = x.shares.copy()
    biased[0] += DTYPE(1 << TRUNC_HEADROOM_BITS)
    z = s.open(biased + p.r, kind="trunc_open")
    out = -p.r_trunc
    out[0] += (z >> DTYPE(f)) - DTYPE(1 << (TRUNC_HEADROOM_BITS - f))
    return SecureTensor(out, f, s)


def sec_ltz(z: SecureTensor) -> SecureTensor:
    """Indicator of z < 0: a2b, take the sign bit, b2a of that single bit."""
    s = z.session
    bits = a2b(s, z.shares)
    msb = bits >> DTYPE(63)
    return SecureTensor(b2a(s, msb, nbits=1), 0, s)


def sec_compare(x: SecureTensor, y: SecureTensor) -> SecureTensor:
    """Indicator of x < y."""
    return sec_ltz(sec_sub(x, y))


def sec_relu(x: SecureTensor) -> SecureTensor:
    """x * (1 - [x < 0]); the indicator has precision 0 so no truncation follows."""
    neg = sec_ltz(x)
    keep = SecureTensor(-neg.shares, 0, x.session)
    keep.shares[0] += DTYPE(1)
    return sec_mul(x, keep)


def sec_matmul(x: SecureTensor, w: SecureTensor, codec: FixedPointCodec = DEFAULT_CODEC) -> SecureTensor:
    """x (..., k) times w (k, m): one Beaver product per scalar term, then one truncation per output."""
    if x.shape[-1] != w.shape[0] or len(w.shape) != 2:
        raise ShapeMismatch(f"cannot multiply {x.shape} by {w.shape}")
    if x.frac_bits != w.frac_bits:
        raise PrecisionMismatch(f"cannot combine frac_bits {x.frac_bits} and {w.frac_bits}")
    h = x.shares.shape[0]
    full = x.shape + (w.shape[1],)
    xe = np.broadcast_to(x.shares[..., None], (h,) + full)
    we = np.broadcast_to(w.shares.reshape((h,) + (1,) * (len(x.shape) - 1) + w.shape), (h,) + full)
    prod = sec_mul(SecureTensor(xe, x.frac_bits, x.session), SecureTensor(we, w.frac_bits, w.session))
    acc = SecureTensor(prod.shares.sum(axis=-2, dtype=DTYPE), prod.frac_bits, x.session)
    return sec_truncate(acc, codec)


def sec_bias_add(x: SecureTensor, b: SecureTensor, axis: int = -1) -> SecureTensor:
    """Add a per-feature bias broadcast along ``axis`` of x."""
    if x.frac_bits != b.frac_bits:
        raise PrecisionMismatch(f"cannot combine frac_bits {x.frac_bits} and {b.frac_bits}")
    ax = axis % len(x.shape)
    if len(b.shape) != 1 or x.shape[ax] != b.shape[0]:
        raise ShapeMismatch(f"bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * len(x.shape)
    view[ax] = b.shape[0]
    bb = b.shares.reshape((b.shares.shape[0],) + tuple(view))
    return SecureTensor(x.shares + bb, x.frac_bits, x.session)


def sec_conv2d(x: SecureTensor, kernels: SecureTensor, stride: int = 1,
               codec: FixedPointCodec = DEFAULT_CODEC) -> SecureTensor:
    """x (n, C, H, W) convolved with kernels (O, C, k, k) -> (n, O, OH, OW), no bias."""
    if len(x.shape) != 4 or len(kernels.shape) != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f"cannot convolve {x.shape} with {kernels.shape}")
    h = x.shares.shape[0]
    n = x.shape[0]
    out_ch, _, k, _ = kernels.shape
    ch, ri, ci, (oh, ow) = im2col_index(x.shape[1:], k, stride)
    cols = SecureTensor(x.shares[:, :, ch, ri, ci], x.frac_bits, x.session)
    wm = SecureTensor(kernels.shares.reshape(h, out_ch, -1).transpose(0, 2, 1), kernels.frac_bits, kernels.session)
    out = sec_matmul(cols, wm, codec)
    return SecureTensor(out.shares.transpose(0, 1, 3, 2).reshape(h, n, out_ch, oh, ow), out.frac_bits, x.session)


def sec_avgpool(x: SecureTensor, window: int, codec: FixedPointCodec = DEFAULT_CODEC) -> SecureTensor:
    n, c, hh, ww = x.shape
    if hh % window or ww % window:
        raise ShapeMismatch(f"avgpool window {window} does not tile {x.shape}")
    h = x.shares.shape[0]
    summed = x.shares.reshape(h, n, c, hh // window, window, ww // window, window).sum(axis=(4, 6), dtype=DTYPE)
    inv = encode_fixed(1.0 / (window * window), codec)
    scaled = sec_mul_public(SecureTensor(summed, x.frac_bits, x.session), inv, codec.frac_bits)
    return sec_truncate(scaled, codec)


def secure_logits(spec: ModelSpec, weights: list, x: SecureTensor,
                  codec: FixedPointCodec = DEFAULT_CODEC) -> SecureTensor:
    """Run every layer before the softmax on shared weights and a shared batch."""
    t = 0
    for layer in spec.layers[:-1]:
        if isinstance(layer, Dense):
            x = sec_bias_add(sec_matmul(x, weights[t], codec), weights[t + 1])
            t += 2
        elif isinstance(layer, Conv2d):
            x = sec_bias_add(sec_conv2d(x, weights[t], layer.stride, codec), weights[t + 1], axis=1)
            t += 2
        elif isinstance(layer, ReLU):
            x = sec_relu(x)
        elif isinstance(layer, AvgPool):
            x = sec_avgpool(x, layer.window, codec)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
    return x


def randomness_budget(spec: ModelSpec, n_samples: int, h: int) -> dict:
    """Exact correlated-randomness element counts for one ``secure_logits`` call."""
    need = dict.fromkeys(("beaver", "and_word", "and_bit", "bit_pair", "trunc_pair"), 0)
    shapes = spec.shapes()
    for layer, in_shape, out_shape in zip(spec.layers[:-1], shapes[:-2], shapes[1:-1]):
        outs = n_samples * int(np.prod(out_shape))
        if isinstance(layer, Dense):
            need["beaver"] += outs * layer.in_features
            need["trunc_pair"] += outs
        elif isinstance(layer, Conv2d):
            need["beaver"] += outs * layer.in_channels * layer.kernel ** 2
            need["trunc_pair"] += outs
        elif isinstance(layer, ReLU):
            adders = h - 1
            need["and_word"] += outs * adders
            need["and_bit"] += outs * adders * 62
            need["bit_pair"] += outs
            need["beaver"] += outs
        elif isinstance(layer, AvgPool):
            need["trunc_pair"] += outs
    return need
