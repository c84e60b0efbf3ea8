"""Dataset loaders and partitioning.

Inputs are min-max scaled to [0, 1] on load.  Images keep a channel axis,
so 8x8 digits come out as ``(n, 1, 8, 8)``.
"""
from __future__ import annotations

import csv
import gzip
import struct
from pathlib import Path

import numpy as np

from .neural import LabeledDataset


def minmax_scale(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def load_digits() -> LabeledDataset:
    """The 1797-sample 8x8 handwritten digits set bundled with scikit-learn."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    return LabeledDataset(minmax_scale(d.images.astype(np.float64))[:, None], d.target, 10)


def make_blobs(n_samples: int = 600, n_features: int = 2, centers=3,
               cluster_std: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Gaussian clusters; ``centers`` is a count (random placement) or explicit coordinates."""
    from sklearn.datasets import make_blobs as _blobs

    if not isinstance(centers, int):
        centers = np.asarray(centers, dtype=np.float64)
        n_features = centers.shape[1]
    x, y = _blobs(n_samples=n_samples, n_features=n_features, centers=centers,
                  cluster_std=cluster_std, random_state=seed)
    k = centers if isinstance(centers, int) else len(centers)
    return LabeledDataset(minmax_scale(x), y, k)


def load_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """CSV with a header row of input dims, then rows of flattened input + label."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    dims = tuple(int(d) for d in rows[0] if d.strip())
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    size = int(np.prod(dims))
    if body.ndim != 2 or body.shape[1] != size + 1:
        raise ValueError(f"{path}: rows must hold {size} inputs plus a label")
    labels = body[:, -1].astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(minmax_scale(body[:, :-1]).reshape((-1,) + dims), labels, k)


def write_csv(data: LabeledDataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(data.inputs.shape[1:])
        for x, y in zip(data.inputs.reshape(len(data), -1), data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise ValueError(f"{path}: not an IDX file")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_TYPES[raw[2]], offset=4 + 4 * ndim)
    return data.reshape(dims)


def write_idx(arr: np.ndarray, path):
    codes = {v: k for k, v in _IDX_TYPES.items()}
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder(">").str if arr.dtype.itemsize > 1 else arr.dtype.str.replace("|", ">")
    header = bytes([0, 0, codes[dt], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + arr.astype(dt).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    images = read_idx(images_path).astype(np.float64)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(minmax_scale(images), labels, k)


def even_split(n: int, parts: int) -> list:
    """Contiguous, near-equal index ranges."""
    return [np.arange(a, b) for a, b in zip(*_bounds(n, parts))]


def _bounds(n, parts):
    edges = [n * i // parts for i in range(parts + 1)]
    return edges[:-1], edges[1:]


def dirichlet_split(labels: np.ndarray, parts: int, alpha: float, rng: np.random.Generator) -> list:
    """Label-skewed partition: each class is spread over parts by Dirichlet(alpha) shares."""
    out = [[] for _ in range(parts)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cuts = (np.cumsum(rng.dirichlet([alpha] * parts))[:-1] * len(idx)).astype(int)
        for p, chunk in enumerate(np.split(idx, cuts)):
            out[p].extend(chunk.tolist())
    return [np.sort(np.array(o, dtype=np.int64)) for o in out]
