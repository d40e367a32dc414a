"""Household classifier: combine first-stage probabilities of two names.

A first-stage model gives P1 and P2, the probabilities that a person's
name and their relative's name belong to the positive class. A linear
SVM over handcrafted features of (P1, P2) produces the household score
C_M; the household is positive iff C_M > 0. Because the features include
products, maxima and logarithms, the boundary is non-linear in (P1, P2).

Feature pool, in fixed order::

    0 P1   1 P2   2 log P1   3 log P2   4 P1*P2   5 max(P1, P2)
    6 P1*log P2   7 P2*log P1   8 max(log P1, log P2)

Probabilities are clamped to [LOG_EPS, 1] before any logarithm.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linear import LinearModel, train_linear
from .corpus import class_weights

LOG_EPS = 1e-9
FEATURE_NAMES = (
    "p1", "p2", "log_p1", "log_p2", "p1_p2", "max_p", "p1_log_p2", "p2_log_p1", "max_log_p",
)


@dataclass(frozen=True)
class FeaturePool:
    mask: tuple[bool, ...] = (True,) * len(FEATURE_NAMES)

    def __post_init__(self):
        if len(self.mask) != len(FEATURE_NAMES):
            raise ValueError(f"mask needs {len(FEATURE_NAMES)} entries")
        if not any(self.mask):
            raise ValueError("feature mask selects nothing")

    @classmethod
    def of(cls, names: Sequence[str]) -> "FeaturePool":
        unknown = set(names) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown features {sorted(unknown)}")
        return cls(tuple(n in names for n in FEATURE_NAMES))

    @property
    def active(self) -> list[str]:
        return [n for n, m in zip(FEATURE_NAMES, self.mask) if m]

    @property
    def size(self) -> int:
        return sum(self.mask)


def _all_features(p1: np.ndarray, p2: np.ndarray, eps: float) -> np.ndarray:
    p1 = np.clip(np.asarray(p1, dtype=np.float64), 0.0, 1.0)
    p2 = np.clip(np.asarray(p2, dtype=np.float64), 0.0, 1.0)
    l1 = np.log(np.maximum(p1, eps))
    l2 = np.log(np.maximum(p2, eps))
    return np.stack([p1, p2, l1, l2, p1 * p2, np.maximum(p1, p2), p1 * l2, p2 * l1, np.maximum(l1, l2)],
                    axis=-1)


def stage_features(p1, p2, pool: FeaturePool = FeaturePool(), eps: float = LOG_EPS) -> np.ndarray:
    """Active features for scalar or array-valued (p1, p2), in pool order."""
    return _all_features(p1, p2, eps)[..., np.array(pool.mask)]


@dataclass
class StageTwoModel:
    weights: np.ndarray  # over active features
    bias: float
    pool: FeaturePool
    C: float
    positive_class: str = "1"
    stage1_ref: str = ""
    log_eps: float = LOG_EPS
    selection: list[tuple[int, float]] = field(default_factory=list)  # RFE (count, recall) trace

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.pool.size,):
            raise ValueError("weight length must equal the active feature count")

    def score(self, p1, p2) -> np.ndarray:
        return stage_features(p1, p2, self.pool, self.log_eps) @ self.weights + self.bias

    def predict(self, p1, p2) -> np.ndarray:
        return (self.score(p1, p2) > 0).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "mask": list(self.pool.mask),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "C": self.C,
            "positive_class": self.positive_class,
            "stage1_ref": self.stage1_ref,
            "log_eps": self.log_eps,
            "selection": [list(s) for s in self.selection],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageTwoModel":
        return cls(np.array(d["weights"]), float(d["bias"]), FeaturePool(tuple(bool(m) for m in d["mask"])),
                   float(d["C"]), d.get("positive_class", "1"), d.get("stage1_ref", ""),
                   float(d.get("log_eps", LOG_EPS)), [tuple(s) for s in d.get("selection", [])])


def _as_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def train_stage2(pairs, labels: Sequence[int], C: float = 1.0, seed: int = 0,
                 pool: FeaturePool = FeaturePool(), balanced: bool = True,
                 positive_class: str = "1", stage1_ref: str = "") -> StageTwoModel:
    """Linear SVM on the pooled features of (p1, p2) pairs; labels are 0/1."""
    p1, p2 = _as_pairs(pairs)
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("stage-two training needs both labels present")
    X = stage_features(p1, p2, pool)
    weights = class_weights(y, 2) if balanced else None
    lm: LinearModel = train_linear("svm", X, y, C, weights=weights, seed=seed, classes=["0", "1"])
    return StageTwoModel(lm.weights[1], float(lm.bias[1]), pool, float(C), positive_class, stage1_ref)


def macro_recall(pred: np.ndarray, truth: np.ndarray) -> float:
    classes = np.unique(truth)
    return float(np.mean([(pred[truth == c] == c).mean() for c in classes]))


def rfe_select(pool: FeaturePool, train_pairs, train_labels, val_pairs, val_labels,
               C: float = 1.0, seed: int = 0) -> tuple[FeaturePool, list[tuple[int, float]]]:
    """Recursive feature elimination by smallest |weight|.

    Returns the mask with the best validation macro-average recall (ties go
    to fewer features) and the (feature count, recall) trace.
    """
    if pool.size < 2:
        return pool, []
    mask = list(pool.mask)
    vp1, vp2 = _as_pairs(val_pairs)
    vy = np.asarray(val_labels, dtype=np.int64)
    trace: list[tuple[int, float, tuple[bool, ...]]] = []
    while True:
        current = FeaturePool(tuple(mask))
        model = train_stage2(train_pairs, train_labels, C, seed, current)
        recall = macro_recall(model.predict(vp1, vp2), vy)
        trace.append((current.size, recall, current.mask))
        if current.size == 1:
            break
        active = [i for i, m in enumerate(mask) if m]
        drop = active[int(np.argmin(np.abs(model.weights)))]
        mask[drop] = False
    best = max(trace, key=lambda t: (t[1], -t[0]))
    return FeaturePool(best[2]), [(n, r) for n, r, _ in trace]


def predict_household(stage1: Callable[[Sequence[str]], np.ndarray], stage2: StageTwoModel,
                      name1: str, name2: str | None) -> tuple[int, float]:
    """(class, C_M) for one household; a missing relative reuses the person's probability.

    `stage1` maps a list of canonical names to positive-class probabilities.
    """
    names = [name1] if name2 is None else [name1, name2]
    probs = np.asarray(stage1(names), dtype=np.float64)
    p1 = probs[0]
    p2 = probs[1] if name2 is not None else probs[0]
    score = float(stage2.score(p1, p2))
    return int(score > 0), score


def predict_households(stage1: Callable[[Sequence[str]], np.ndarray], stage2: StageTwoModel,
                       names1: Sequence[str], names2: Sequence[str | None]) -> tuple[np.ndarray, np.ndarray]:
    p1 = np.asarray(stage1(list(names1)), dtype=np.float64)
    rel = [n if n is not None else names1[i] for i, n in enumerate(names2)]
    p2 = np.asarray(stage1(rel), dtype=np.float64)
    scores = stage2.score(p1, p2)
    return (scores > 0).astype(np.int64), scores


def boundary_grid(model: StageTwoModel, resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(p1 grid, p2 grid, scores) on a resolution x resolution mesh of [0, 1]^2; rows index p1."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axis = np.linspace(0.0, 1.0, resolution)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    return g1, g2, model.score(g1, g2)


def export_boundary(model: StageTwoModel, resolution: int) -> str:
    """CSV ``p1,p2,score,class`` over the grid, p1 varying slowest."""
    g1, g2, s = boundary_grid(model, resolution)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p1", "p2", "score", "class"])
    for a, b, c in zip(g1.ravel(), g2.ravel(), s.ravel()):
        w.writerow([repr(float(a)), repr(float(b)), repr(float(c)), int(c > 0)])
    return buf.getvalue()
