"""Plaintext layered networks: forward pass, backprop, SGD, and the
fixed-point reference forward used to check encrypted inference.

Batches are always leading-axis: inputs have shape ``(n, *input_shape)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyBatch, EmptyDataset, ShapeMismatch, SpecMismatch
from .ring import DEFAULT_CODEC, FixedPointCodec, decode_fixed, encode_fixed


# ---------------------------------------------------------------------------
# architecture

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class AvgPool:
    window: int
    kind: str = field(default="avgpool", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class Softmax:
    kind: str = field(default="softmax", init=False)


LAYER_TYPES = {cls.__dataclass_fields__["kind"].default: cls
               for cls in (Dense, Conv2d, ReLU, AvgPool, Flatten, Softmax)}


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    try:
        return LAYER_TYPES[kind](**d)
    except KeyError:
        raise SpecMismatch(f"unknown layer kind {kind!r}") from None


def layer_to_dict(layer) -> dict:
    out = {"kind": layer.kind}
    out.update({k: getattr(layer, k) for k in layer.__dataclass_fields__ if k != "kind"})
    return out


def _out_shape(layer, shape):
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeMismatch(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeMismatch(f"conv2d expects ({layer.in_channels}, H, W), got {shape}")
        _, hh, ww = shape
        oh = (hh - layer.kernel) // layer.stride + 1
        ow = (ww - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"kernel {layer.kernel} larger than input {shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, AvgPool):
        if len(shape) != 3 or shape[1] % layer.window or shape[2] % layer.window:
            raise ShapeMismatch(f"avgpool window {layer.window} does not tile {shape}")
        return (shape[0], shape[1] // layer.window, shape[2] // layer.window)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    return shape


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        kinds = [l.kind for l in self.layers]
        if not kinds or kinds[-1] != "softmax" or kinds.count("softmax") != 1:
            raise SpecMismatch("model must end with exactly one softmax layer")
        self.shapes()

    def shapes(self) -> list:
        """Output shape after every layer (index 0 is the input)."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_out_shape(layer, shapes[-1]))
        return shapes

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(layer_from_dict(l) for l in d["layers"]), tuple(d["input_shape"]))

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def param_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Dense, Conv2d))]

    def param_shapes(self) -> list:
        out = []
        for i in self.param_layers():
            l = self.layers[i]
            if isinstance(l, Dense):
                out += [(l.in_features, l.out_features), (l.out_features,)]
            else:
                out += [(l.out_channels, l.in_channels, l.kernel, l.kernel), (l.out_channels,)]
        return out


@dataclass(frozen=True)
class ModelParams:
    model_id: str
    spec: ModelSpec
    tensors: tuple
    sample_count: int = 0

    def __post_init__(self):
        tensors = tuple(np.asarray(t, dtype=np.float64) for t in self.tensors)
        object.__setattr__(self, "tensors", tensors)
        expected = self.spec.param_shapes()
        if [t.shape for t in tensors] != expected:
            raise ShapeMismatch(f"tensor shapes {[t.shape for t in tensors]} != {expected}")
        if not all(np.all(np.isfinite(t)) for t in tensors):
            raise ValueError("model parameters must be finite")

    @property
    def spec_hash(self) -> str:
        return self.spec.digest

    def with_tensors(self, tensors, **changes) -> "ModelParams":
        return replace(self, tensors=tuple(tensors), **changes)


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "labels", labels)
        if len(self.inputs) != len(labels):
            raise ShapeMismatch("inputs and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)


def init_params(spec: ModelSpec, rng: np.random.Generator, model_id: str = "") -> ModelParams:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weights and biases."""
    tensors = []
    for i in spec.param_layers():
        l = spec.layers[i]
        fan_in = l.in_features if isinstance(l, Dense) else l.in_channels * l.kernel ** 2
        bound = np.sqrt(1.0 / fan_in)
        w_shape, b_shape = spec.param_shapes()[len(tensors)], spec.param_shapes()[len(tensors) + 1]
        tensors.append(rng.uniform(-bound, bound, size=w_shape))
        tensors.append(rng.uniform(-bound, bound, size=b_shape))
    return ModelParams(model_id, spec, tuple(tensors))


# ---------------------------------------------------------------------------
# im2col helpers, shared with the secure path

def im2col_index(in_shape, kernel: int, stride: int):
    """Index arrays selecting (OH*OW, C*k*k) patches from a (C, H, W) image."""
    c, hh, ww = in_shape
    oh = (hh - kernel) // stride + 1
    ow = (ww - kernel) // stride + 1
    ch, ki, kj = np.meshgrid(np.arange(c), np.arange(kernel), np.arange(kernel), indexing="ij")
    ch, ki, kj = ch.ravel(), ki.ravel(), kj.ravel()
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    oi, oj = oi.ravel()[:, None] * stride, oj.ravel()[:, None] * stride
    return ch[None, :].repeat(oh * ow, 0), oi + ki[None, :], oj + kj[None, :], (oh, ow)


def _im2col(x, kernel, stride):
    ch, ri, ci, out_hw = im2col_index(x.shape[1:], kernel, stride)
    return x[:, ch, ri, ci], (ch, ri, ci), out_hw


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward / backward

def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"input shape {x.shape[1:]} != {spec.input_shape}")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray):
    spec = params.spec
    x = _check_input(spec, x)
    caches = []
    t = 0
    for layer in spec.layers[:-1]:
        if isinstance(layer, Dense):
            w, b = params.tensors[t], params.tensors[t + 1]
            t += 2
            caches.append(x)
            x = x @ w + b
        elif isinstance(layer, Conv2d):
            w, b = params.tensors[t], params.tensors[t + 1]
            t += 2
            cols, idx, (oh, ow) = _im2col(x, layer.kernel, layer.stride)
            caches.append((x.shape, cols, idx))
            out = cols @ w.reshape(w.shape[0], -1).T + b
            x = out.transpose(0, 2, 1).reshape(x.shape[0], w.shape[0], oh, ow)
        elif isinstance(layer, ReLU):
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
        elif isinstance(layer, AvgPool):
            n, c, hh, ww = x.shape
            k = layer.window
            caches.append(x.shape)
            x = x.reshape(n, c, hh // k, k, ww // k, k).mean(axis=(3, 5))
        elif isinstance(layer, Flatten):
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return x, caches


def logits(params: ModelParams, x) -> np.ndarray:
    return _forward_cache(params, x)[0]


def forward(params: ModelParams, x) -> np.ndarray:
    """Class probabilities for a batch (or a single unbatched sample)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == params.spec.input_shape
    p = softmax(logits(params, x[None] if single else x))
    return p[0] if single else p


def cross_entropy(params: ModelParams, x, y) -> float:
    p = forward(params, x)
    y = np.asarray(y, dtype=np.int64)
    return float(-np.mean(np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))))


def gradient(params: ModelParams, x, y) -> list:
    """Mean cross-entropy gradient over the batch, one array per parameter tensor."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyBatch("gradient of an empty batch")
    out, caches = _forward_cache(params, x)
    n = len(y)
    grad = softmax(out)
    grad[np.arange(n), y] -= 1.0
    grad /= n

    spec = params.spec
    grads = [None] * len(params.tensors)
    t = len(params.tensors)
    for layer, cache in zip(reversed(spec.layers[:-1]), reversed(caches)):
        if isinstance(layer, Dense):
            t -= 2
            w = params.tensors[t]
            grads[t] = cache.T @ grad
            grads[t + 1] = grad.sum(axis=0)
            grad = grad @ w.T
        elif isinstance(layer, Conv2d):
            t -= 2
            w = params.tensors[t]
            in_shape, cols, (ch, ri, ci) = cache
            g = grad.reshape(n, w.shape[0], -1).transpose(0, 2, 1)
            wm = w.reshape(w.shape[0], -1)
            grads[t] = np.einsum("npo,npk->ok", g, cols).reshape(w.shape)
            grads[t + 1] = g.sum(axis=(0, 1))
            dcols = g @ wm
            dx = np.zeros(in_shape)
            np.add.at(dx, (slice(None), ch, ri, ci), dcols)
            grad = dx
        elif isinstance(layer, ReLU):
            grad = grad * cache
        elif isinstance(layer, AvgPool):
            k = layer.window
            grad = np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k)
        elif isinstance(layer, Flatten):
            grad = grad.reshape(cache)
    return grads


def sgd_step(params: ModelParams, grads, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params.with_tensors(w - lr * g for w, g in zip(params.tensors, grads))


def predict(params: ModelParams, x) -> np.ndarray:
    return np.argmax(logits(params, x), axis=1)


def evaluate(params: ModelParams, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return float(np.mean(np.argmax(forward(params, data.inputs), axis=1) == data.labels))


# ---------------------------------------------------------------------------
# fixed-point bridge

def export_for_mpc(params: ModelParams, codec: FixedPointCodec = DEFAULT_CODEC) -> list:
    """Per-tensor ring encodings; raises OverflowError for unencodable weights."""
    return [np.asarray(encode_fixed(t, codec)) for t in params.tensors]


def import_probabilities(logits_real) -> np.ndarray:
    return softmax(np.asarray(logits_real, dtype=np.float64))


def quantized_logits(params: ModelParams, x, codec: FixedPointCodec = DEFAULT_CODEC) -> np.ndarray:
    """Integer-exact reference for the secure forward pass.

    Mirrors the secure kernels step by step: products accumulate at 2f
    fractional bits and are floor-shifted back to f before the bias add.
    The secure truncation may land one ulp above this floor per shift.
    """
    spec = params.spec
    f = codec.frac_bits
    x = _check_input(spec, x)
    q = np.asarray(encode_fixed(x, codec)).view(np.int64)
    ws = [np.asarray(encode_fixed(t, codec)).view(np.int64) for t in params.tensors]
    t = 0
    for layer in spec.layers[:-1]:
        if isinstance(layer, Dense):
            w, b = ws[t], ws[t + 1]
            t += 2
            q = ((q[:, :, None] * w[None]).sum(axis=1) >> f) + b
        elif isinstance(layer, Conv2d):
            w, b = ws[t], ws[t + 1]
            t += 2
            cols, _, (oh, ow) = _im2col(q, layer.kernel, layer.stride)
            wm = w.reshape(w.shape[0], -1).T
            out = ((cols[:, :, :, None] * wm[None, None]).sum(axis=2) >> f) + b
            q = out.transpose(0, 2, 1).reshape(q.shape[0], w.shape[0], oh, ow)
        elif isinstance(layer, ReLU):
            q = np.maximum(q, 0)
        elif isinstance(layer, AvgPool):
            n, c, hh, ww = q.shape
            k = layer.window
            s = q.reshape(n, c, hh // k, k, ww // k, k).sum(axis=(3, 5))
            q = (s * int(encode_fixed(1.0 / (k * k), codec))) >> f
        elif isinstance(layer, Flatten):
            q = q.reshape(q.shape[0], -1)
    return decode_fixed(q.view(np.uint64), codec)
