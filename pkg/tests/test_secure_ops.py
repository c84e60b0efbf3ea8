import numpy as np
import pytest

from hefl import neural
from hefl.errors import PrecisionMismatch, ShapeMismatch
from hefl.neural import AvgPool, Conv2d, Dense, Flatten, ModelSpec, ReLU, Softmax
from hefl.ring import DEFAULT_CODEC, encode_fixed, from_signed, to_signed
from hefl.secure_ops import (
    SecureTensor, randomness_budget, reveal, reveal_real, sec_add, sec_avgpool, sec_bias_add, sec_compare,
    sec_conv2d, sec_ltz, sec_matmul, sec_mul, sec_relu, sec_truncate, secure_logits, share_ring, share_tensor,
)
from hefl.sharing import Dealer, Session

from conftest import make_session
from oracles import dequantize, fixed_matmul, quantize

ULP = 2.0 ** -16
N = 1000


@pytest.fixture(params=[2, 3])
def sess(request):
    return make_session(request.param, seed=request.param)


def test_add_examples(sess):
    two, three = share_tensor(sess, 0, 2.0), share_tensor(sess, 1, 3.0)
    assert reveal_real(sec_add(two, three)) == 5.0
    x = share_tensor(sess, 0, np.array([1.25, -7.5]))
    assert np.array_equal(reveal_real(sec_add(x, share_tensor(sess, 1, np.zeros(2)))), [1.25, -7.5])


def test_add_matches_ring_oracle(sess, rng):
    x, y = rng.uniform(-1e4, 1e4, size=(2, N))
    got = to_signed(reveal(sec_add(share_tensor(sess, 0, x), share_tensor(sess, 1, y))))
    assert np.array_equal(got, quantize(x) + quantize(y))


def test_mul_examples(sess):
    six = sec_mul(share_tensor(sess, 0, 2.0), share_tensor(sess, 1, 3.0))
    assert six.frac_bits == 32
    assert int(reveal(six)) == int(encode_fixed(6.0, frac_bits=32))
    zero = sec_mul(share_tensor(sess, 0, np.array([4.5, -3.0])), share_tensor(sess, 1, np.zeros(2)))
    assert not reveal(zero).any()


def test_mul_then_truncate_oracle(sess, rng):
    x, y = rng.uniform(-8, 8, size=(2, N))
    prod = sec_truncate(sec_mul(share_tensor(sess, 0, x), share_tensor(sess, 1, y)))
    assert prod.frac_bits == 16
    want = dequantize(quantize(x)) * dequantize(quantize(y))
    assert np.max(np.abs(reveal_real(prod) - want)) <= 3 * ULP


def test_truncate_examples(sess):
    t = sec_truncate(share_ring(sess, 0, encode_fixed(6.0, frac_bits=32), 32))
    assert abs(int(to_signed(reveal(t))) - 6 * 65536) <= 1
    assert abs(int(to_signed(reveal(sec_truncate(share_ring(sess, 0, np.uint64(0), 32)))))) <= 1


def test_truncate_oracle(sess, rng):
    raw = rng.integers(-(2 ** 51), 2 ** 51, size=N, dtype=np.int64)
    t = sec_truncate(share_ring(sess, 1, from_signed(raw), 32))
    diff = to_signed(reveal(t)) - (raw >> 16)
    assert set(np.unique(diff)) <= {0, 1}
    assert np.max(np.abs(reveal_real(t) - raw / 2.0 ** 32)) <= ULP


def test_ltz_examples(sess):
    assert int(reveal(sec_ltz(share_tensor(sess, 0, -3.0)))) == 1
    assert int(reveal(sec_ltz(share_tensor(sess, 0, 0.0)))) == 0


def test_ltz_exhaustive_16bit():
    s = make_session(2, seed=99)
    v = np.arange(-(2 ** 15), 2 ** 15, dtype=np.int64)
    got = reveal(sec_ltz(share_ring(s, 0, from_signed(v), 16)))
    assert np.array_equal(got, (v < 0).astype(np.uint64))


def test_ltz_random_full_range(sess, rng):
    v = rng.integers(-(2 ** 62), 2 ** 62, size=N, dtype=np.int64)
    got = reveal(sec_ltz(share_ring(sess, 1, from_signed(v), 16)))
    assert np.array_equal(got, (v < 0).astype(np.uint64))


def test_compare(sess, rng):
    assert int(reveal(sec_compare(share_tensor(sess, 0, 3.0), share_tensor(sess, 1, 5.0)))) == 1
    assert int(reveal(sec_compare(share_tensor(sess, 0, 5.0), share_tensor(sess, 1, 5.0)))) == 0
    x, y = rng.uniform(-100, 100, size=(2, N))
    y[:50] = x[:50]
    got = reveal(sec_compare(share_tensor(sess, 0, x), share_tensor(sess, 1, y)))
    assert np.array_equal(got, (quantize(x) < quantize(y)).astype(np.uint64))


def test_relu(sess, rng):
    assert reveal_real(sec_relu(share_tensor(sess, 0, -2.5))) == 0.0
    assert reveal_real(sec_relu(share_tensor(sess, 0, 4.0))) == 4.0
    x = rng.uniform(-50, 50, size=N)
    got = reveal_real(sec_relu(share_tensor(sess, 1, x)))
    assert np.max(np.abs(got - np.maximum(x, 0))) <= 2 * ULP


def test_matmul_examples(sess):
    eye = share_tensor(sess, 0, np.eye(2))
    v = share_tensor(sess, 1, np.array([[1.0, 2.0]]))
    assert np.allclose(reveal_real(sec_matmul(v, eye)), [[1.0, 2.0]], atol=ULP)
    img = np.random.default_rng(0).uniform(-1, 1, size=(2, 1, 5, 5))
    out = sec_conv2d(share_tensor(sess, 1, img), share_tensor(sess, 0, np.ones((1, 1, 1, 1))))
    assert np.max(np.abs(reveal_real(out) - img)) <= ULP


def test_matmul_8x8_oracle(rng):
    worst = 0.0
    for i in range(N):
        s = make_session(2 + i % 2, seed=i)
        x, w = rng.uniform(-4, 4, size=(2, 8, 8))
        got = reveal_real(sec_matmul(share_tensor(s, 0, x), share_tensor(s, 1, w)))
        want = dequantize(fixed_matmul(quantize(x), quantize(w)))
        worst = max(worst, float(np.max(np.abs(got - want))))
        assert np.max(np.abs(got - x @ w)) <= 8 * ULP + 8 * 4 * ULP
    assert worst <= 8 * ULP


def test_conv_and_pool_against_float(sess, rng):
    img = rng.uniform(0, 1, size=(3, 2, 6, 6))
    k = rng.uniform(-1, 1, size=(4, 2, 3, 3))
    b = rng.uniform(-1, 1, size=4)
    out = sec_bias_add(sec_conv2d(share_tensor(sess, 0, img), share_tensor(sess, 1, k)), share_tensor(sess, 1, b), 1)
    cols, _, _ = neural._im2col(img, 3, 1)
    want = (cols @ k.reshape(4, -1).T).transpose(0, 2, 1).reshape(3, 4, 4, 4) + b[None, :, None, None]
    assert np.max(np.abs(reveal_real(out) - want)) <= 18 * ULP + 1e-3
    pooled = reveal_real(sec_avgpool(share_tensor(sess, 0, img), 2))
    assert np.max(np.abs(pooled - img.reshape(3, 2, 3, 2, 3, 2).mean(axis=(3, 5)))) <= 2 * ULP


def test_precision_discipline(sess):
    a = share_tensor(sess, 0, np.ones(3))
    ab = sec_mul(a, a)
    with pytest.raises(PrecisionMismatch):
        sec_add(a, ab)
    with pytest.raises(PrecisionMismatch):
        sec_truncate(a)
    with pytest.raises(PrecisionMismatch):
        sec_matmul(ab.reshape(1, 3), share_tensor(sess, 0, np.ones((3, 1))))
    with pytest.raises(ShapeMismatch):
        sec_add(a, share_tensor(sess, 0, np.ones(4)))


def test_communication_audit():
    h, n = 3, 7
    s = make_session(h)
    log = s.bus.log
    x, y = share_tensor(s, 0, np.ones(n)), share_tensor(s, 1, np.ones(n))
    before = len(log)
    sec_add(x, y)
    assert len(log) == before

    sec_mul(x, y)
    opens = log.of_kind("beaver_open")
    assert len(opens) == h * (h - 1)
    assert all(m.nbytes == 2 * n * 8 for m in opens)

    sec_ltz(x)
    b2a_opens = log.of_kind("b2a_open")
    assert len(b2a_opens) == h * (h - 1)
    assert all(m.nbytes == n * 8 for m in b2a_opens)
    assert not log.of_kind("open")


SPECS = {
    "mlp": ModelSpec((Flatten(), Dense(16, 6), ReLU(), Dense(6, 3), Softmax()), (1, 4, 4)),
    "cnn": ModelSpec((Conv2d(1, 2, 3), ReLU(), AvgPool(2), Flatten(), Dense(8, 3), Softmax()), (1, 6, 6)),
}


@pytest.mark.parametrize("name", sorted(SPECS))
@pytest.mark.parametrize("h", [2, 3])
def test_budget_is_exact(name, h, rng):
    spec = SPECS[name]
    params = neural.init_params(spec, rng)
    x = rng.uniform(0, 1, size=(5,) + spec.input_shape)
    budget = randomness_budget(spec, len(x), h)
    dealer = Dealer(h, 0, budget)
    s = Session([f"P{i}" for i in range(h)], dealer)
    w = [share_tensor(s, 0, t) for t in params.tensors]
    out = secure_logits(spec, w, share_tensor(s, h - 1, x))
    assert dict(dealer.issued) == {k: v for k, v in budget.items() if v}
    q = neural.quantized_logits(params, x)
    assert np.max(np.abs(reveal_real(out) - q)) <= 1e-3
