import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hefl import neural
from hefl.errors import EmptyBatch, EmptyDataset, ShapeMismatch, SpecMismatch
from hefl.neural import (
    AvgPool, Conv2d, Dense, Flatten, LabeledDataset, ModelParams, ModelSpec, ReLU, Softmax,
)

from oracles import forward_loops

ALL_LAYERS = ModelSpec(
    (Conv2d(2, 3, 3), ReLU(), AvgPool(2), Conv2d(3, 2, 1, stride=1), Flatten(),
     Dense(8, 5), ReLU(), Dense(5, 4), Softmax()),
    (2, 6, 6),
)
STRIDED = ModelSpec((Conv2d(1, 2, 2, stride=2), ReLU(), Flatten(), Dense(8, 3), Softmax()), (1, 4, 4))
MLP = ModelSpec((Dense(4, 6), ReLU(), Dense(6, 3), Softmax()), (4,))


def finite_difference(params, x, y, eps=1e-6):
    grads = []
    for i, t in enumerate(params.tensors):
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            bumped = []
            for sign in (1, -1):
                ts = [u.copy() for u in params.tensors]
                ts[i][idx] += sign * eps
                bumped.append(neural.cross_entropy(params.with_tensors(ts), x, y))
            g[idx] = (bumped[0] - bumped[1]) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("spec", [ALL_LAYERS, STRIDED, MLP], ids=["all", "strided", "mlp"])
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(3)
    params = neural.init_params(spec, rng)
    x = rng.uniform(0, 1, size=(6,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, size=6)
    for g, fd in zip(neural.gradient(params, x, y), finite_difference(params, x, y)):
        assert g.shape == fd.shape
        assert rel_error(g, fd) < 1e-4


def test_forward_matches_loop_implementation():
    rng = np.random.default_rng(4)
    for spec in (ALL_LAYERS, STRIDED, MLP):
        params = neural.init_params(spec, rng)
        x = rng.uniform(0, 1, size=(4,) + spec.input_shape)
        assert np.allclose(neural.forward(params, x), forward_loops(spec, params.tensors, x), atol=1e-12)


def test_forward_examples():
    spec = ModelSpec((Dense(2, 2), Softmax()), (2,))
    zero = ModelParams("z", spec, (np.zeros((2, 2)), np.zeros(2)))
    assert np.allclose(neural.forward(zero, np.array([[3.0, -1.0]])), [[0.5, 0.5]])
    ident = ModelParams("i", ModelSpec((Dense(3, 3), Softmax()), (3,)), (5 * np.eye(3), np.zeros(3)))
    assert neural.predict(ident, np.eye(3)).tolist() == [0, 1, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    params = neural.init_params(ALL_LAYERS, rng)
    p = neural.forward(params, rng.normal(size=(3,) + ALL_LAYERS.input_shape) * 10)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_forward_shape_check():
    params = neural.init_params(MLP, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        neural.forward(params, np.zeros((2, 5)))


def test_spec_validation():
    with pytest.raises(SpecMismatch):
        ModelSpec((Dense(2, 2),), (2,))
    with pytest.raises(SpecMismatch):
        ModelSpec((Softmax(), Dense(2, 2), Softmax()), (2,))
    assert ModelSpec.from_dict(ALL_LAYERS.to_dict()) == ALL_LAYERS


def test_bias_gradient_closed_form():
    spec = ModelSpec((Dense(3, 2), Softmax()), (3,))
    params = ModelParams("z", spec, (np.zeros((3, 2)), np.zeros(2)))
    x = np.random.default_rng(0).normal(size=(4, 3))
    y = np.array([0, 1, 0, 1])
    gb = neural.gradient(params, x, y)[1]
    assert np.allclose(gb, np.mean(0.5 - np.eye(2)[y], axis=0))


def test_duplicated_batch_same_gradient():
    rng = np.random.default_rng(5)
    params = neural.init_params(MLP, rng)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
    g1 = neural.gradient(params, x, y)
    g2 = neural.gradient(params, np.concatenate([x, x]), np.concatenate([y, y]))
    assert all(np.allclose(a, b) for a, b in zip(g1, g2))


def test_empty_batch():
    params = neural.init_params(MLP, np.random.default_rng(0))
    with pytest.raises(EmptyBatch):
        neural.gradient(params, np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_sgd_step():
    spec = ModelSpec((Dense(1, 1), Softmax()), (1,))
    p = ModelParams("p", spec, (np.ones((1, 1)), np.ones(1)))
    g = [np.full((1, 1), 0.5), np.full(1, 0.5)]
    assert neural.sgd_step(p, g, 0.0).tensors[0][0, 0] == 1.0
    assert neural.sgd_step(p, g, 0.1).tensors[0][0, 0] == pytest.approx(0.95)


def test_loss_decreases_on_separable_data():
    rng = np.random.default_rng(6)
    x = np.concatenate([rng.normal(-2, 0.5, size=(20, 4)), rng.normal(2, 0.5, size=(20, 4))])
    y = np.repeat([0, 1], 20)
    spec = ModelSpec((Dense(4, 2), Softmax()), (4,))
    p = neural.init_params(spec, rng)
    losses = []
    for _ in range(20):
        losses.append(neural.cross_entropy(p, x, y))
        p = neural.sgd_step(p, neural.gradient(p, x, y), 0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_evaluate():
    spec = ModelSpec((Dense(2, 2), Softmax()), (2,))
    perfect = ModelParams("p", spec, (np.eye(2) * 10, np.zeros(2)))
    data = LabeledDataset(np.eye(2)[[0, 1, 1, 0]], [0, 1, 1, 0], 2)
    assert neural.evaluate(perfect, data) == 1.0
    constant = ModelParams("c", spec, (np.zeros((2, 2)), np.array([0.0, 1.0])))
    assert neural.evaluate(constant, data) == 0.5
    tie = ModelParams("t", spec, (np.zeros((2, 2)), np.zeros(2)))
    assert neural.evaluate(tie, data) == 0.5  # ties resolve to class 0
    fixture = ModelParams("f", spec, (np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([0.0, 1.5])))
    xs = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [2.0, 0.0]])
    # scores: (1, 1.5) (2, 1.5) (0, 1.5) (2, 1.5) -> predictions 1, 0, 1, 0
    assert neural.evaluate(fixture, LabeledDataset(xs, [1, 1, 1, 1], 2)) == 0.5
    with pytest.raises(EmptyDataset):
        neural.evaluate(perfect, LabeledDataset(np.zeros((0, 2)), [], 2))


def test_evaluate_permutation_invariant():
    rng = np.random.default_rng(8)
    params = neural.init_params(MLP, rng)
    data = LabeledDataset(rng.normal(size=(30, 4)), rng.integers(0, 3, size=30), 3)
    assert neural.evaluate(params, data) == neural.evaluate(params, data.subset(rng.permutation(30)))


def test_export_and_import():
    params = neural.init_params(ALL_LAYERS, np.random.default_rng(9))
    enc = neural.export_for_mpc(params)
    for t, e in zip(params.tensors, enc):
        assert np.max(np.abs(e.view(np.int64) / 65536.0 - t)) <= 2.0 ** -16
    assert np.allclose(neural.import_probabilities(np.zeros((1, 2))), [[0.5, 0.5]])
    huge = params.with_tensors([t * 1e15 for t in params.tensors])
    with pytest.raises(OverflowError):
        neural.export_for_mpc(huge)


def test_quantized_logits_track_float():
    rng = np.random.default_rng(10)
    params = neural.init_params(ALL_LAYERS, rng)
    x = rng.uniform(0, 1, size=(10,) + ALL_LAYERS.input_shape)
    q = neural.quantized_logits(params, x)
    assert np.max(np.abs(q - neural.logits(params, x))) < 1e-3
