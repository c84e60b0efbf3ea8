"""Weighted ensembles of per-hospital class probabilities and grid-search
tuning of the mixing weights."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import AlignmentMismatch, AllZeroWeights, LengthMismatch


@dataclass(frozen=True)
class ProbabilityMatrix:
    hospital_id: str
    model_id: str
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("probability matrix must be 2-D (samples x classes)")
        if rows.size and not np.allclose(rows.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError(f"{self.hospital_id}: rows do not sum to 1")
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return self.rows.shape[0]


@dataclass(frozen=True)
class EnsembleWeights:
    alpha: tuple
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if any(a < 0 for a in self.alpha):
            raise ValueError("ensemble weights must be non-negative")
        if self.normalized and abs(sum(self.alpha) - 1.0) > 1e-9:
            raise ValueError("normalized weights must sum to 1")


@dataclass(frozen=True)
class WeightGrid:
    values: tuple

    def __post_init__(self):
        vals = tuple(sorted(float(v) for v in self.values))
        if not vals or vals[0] < 0 or vals[-1] > 1:
            raise ValueError("grid values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_step(cls, step: float = 0.1) -> "WeightGrid":
        n = int(round(1.0 / step))
        if n < 1 or abs(n * step - 1.0) > 1e-9:
            raise ValueError(f"step {step} must divide 1")
        return cls(tuple(i / n for i in range(n + 1)))


def l1_normalize(alpha) -> EnsembleWeights:
    total = sum(abs(float(a)) for a in alpha)
    if total <= 0:
        raise AllZeroWeights("cannot normalize an all-zero weight vector")
    return EnsembleWeights(tuple(abs(float(a)) / total for a in alpha))


def _matrices(mats) -> list:
    rows = [m.rows if isinstance(m, ProbabilityMatrix) else np.asarray(m, dtype=np.float64) for m in mats]
    if not rows:
        raise AlignmentMismatch("no probability matrices")
    if any(r.shape != rows[0].shape for r in rows):
        raise AlignmentMismatch(f"matrix shapes differ: {[r.shape for r in rows]}")
    return rows


def _mix(rows, alpha) -> np.ndarray:
    # hospital-by-hospital accumulation keeps the float summation order fixed
    acc = alpha[0] * rows[0]
    for a, r in zip(alpha[1:], rows[1:]):
        acc = acc + a * r
    return acc


def ensemble_predict(mats, alpha) -> np.ndarray:
    """Row-wise argmax of sum_i alpha_i P_i; ties go to the lowest class index."""
    rows = _matrices(mats)
    a = alpha.alpha if isinstance(alpha, EnsembleWeights) else tuple(float(v) for v in alpha)
    if len(a) != len(rows):
        raise AlignmentMismatch(f"{len(a)} weights for {len(rows)} matrices")
    return np.argmax(_mix(rows, a), axis=1)


def accuracy_score(predicted, y) -> float:
    predicted, y = np.asarray(predicted), np.asarray(y)
    if predicted.shape != y.shape:
        raise LengthMismatch(f"{predicted.shape} predictions for {y.shape} labels")
    if y.size == 0:
        return 0.0
    return float(np.mean(predicted == y))


def _rational(v: float) -> Fraction:
    return Fraction(repr(v))


def candidate_weights(grid: WeightGrid, h: int):
    """Normalized candidates in lexicographic order of the Cartesian product.

    Each candidate is the grid tuple divided by its sum in exact rational
    arithmetic, then rounded to the nearest float.

    The all-zero tuple is skipped and candidates that normalize to an
    already-seen vector are dropped (their predictions are identical).
    """
    seen = set()
    for combo in itertools.product(grid.values, repeat=h):
        total = sum(combo)
        if total <= 0:
            continue
        exact = [_rational(v) for v in combo]
        s = sum(exact)
        key = tuple(v / s for v in exact)
        if key in seen:
            continue
        seen.add(key)
        # correctly rounded exact quotients, so alpha does not depend on float division order
        yield EnsembleWeights(tuple(float(v) for v in key))


def grid_search_weights(mats, y, grid: WeightGrid | None = None, h: int | None = None):
    """Return (best EnsembleWeights, best accuracy); only strict improvements replace the incumbent."""
    rows = _matrices(mats)
    y = np.asarray(y)
    if len(y) != rows[0].shape[0]:
        raise AlignmentMismatch(f"{len(y)} labels for {rows[0].shape[0]} rows")
    grid = grid if grid is not None else WeightGrid.from_step(0.1)
    h = h if h is not None else len(rows)
    if h != len(rows):
        raise AlignmentMismatch(f"h={h} but {len(rows)} matrices given")
    best, best_acc = None, -1.0
    for alpha in candidate_weights(grid, h):
        acc = accuracy_score(np.argmax(_mix(rows, alpha.alpha), axis=1), y)
        if acc > best_acc:
            best, best_acc = alpha, acc
    if best is None:
        raise AllZeroWeights("grid contains no non-zero candidate")
    return best, best_acc


def write_probability_csv(mat: ProbabilityMatrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hospital_id", "model_id"])
        w.writerow([mat.hospital_id, mat.model_id])
        w.writerow(["sample"] + [f"p{c}" for c in range(mat.rows.shape[1])])
        for i, row in enumerate(mat.rows):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_probability_csv(path) -> ProbabilityMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or rows[0][:2] != ["hospital_id", "model_id"]:
        raise ValueError(f"{path}: not a probability matrix CSV")
    hospital, model = rows[1][0], rows[1][1]
    body = rows[3:]
    idx = [int(r[0]) for r in body]
    if idx != list(range(len(body))):
        raise AlignmentMismatch(f"{path}: sample index out of order")
    k = len(rows[2]) - 1
    mat = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), k)
    return ProbabilityMatrix(hospital, model, mat)


def write_labels_csv(y, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "label"])
        for i, v in enumerate(y):
            w.writerow([i, int(v)])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([int(r[1]) for r in rows], dtype=np.int64)
