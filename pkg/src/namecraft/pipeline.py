"""Trained-model wrappers with a common name-level prediction interface,
and the end-to-end training recipes used by the command line.

Every pipeline exposes ``predict(names, relatives=None)`` returning class
ids (negative ids for dictionary outcomes) and ``proba(names,
relatives=None)`` returning an (n, K) array or None when the model has no
probability output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import n2c
from .cnn import CnnConfig, CnnModel, encode_batch, train_cnn
from .corpus import (
    DEFAULT_CONFIG,
    Dataset,
    PreprocessConfig,
    augment_single,
    class_weights,
    split_dataset,
)
from .featurizer import FeatureSpace, fit_vocab
from .linear import LinearModel, argmax_lowest, scores_to_proba, train_linear
from .twostage import (
    FeaturePool,
    StageTwoModel,
    rfe_select,
    train_stage2,
)

log = logging.getLogger(__name__)

# Hyperparameters of the tuned single-name and household configurations.
LINEAR_DEFAULTS = {
    ("lr", "single"): {"C": 64.49, "max_n": 12},
    ("lr", "concat"): {"C": 33.39, "max_n": 10},
    ("svm", "single"): {"C": 79.53, "max_n": 11},
    ("svm", "concat"): {"C": 8.47, "max_n": 10},
}
STAGE2_C = 100.0
SPLIT_RATIOS = (0.7, 0.15, 0.15)
TWO_STAGE_RATIOS = (0.8, 0.1, 0.1)


@dataclass
class LinearPipeline:
    space: FeatureSpace
    model: LinearModel
    mode: str = "single"
    kind: str = field(init=False)

    def __post_init__(self):
        self.kind = self.model.kind

    @property
    def classes(self) -> tuple[str, ...]:
        return self.model.classes

    def scores(self, names: Sequence[str]) -> np.ndarray:
        return self.model.decision_matrix(self.space.transform(list(names)))

    def proba(self, names: Sequence[str], relatives=None) -> np.ndarray:
        return scores_to_proba(self.scores(names))

    def predict(self, names: Sequence[str], relatives=None) -> np.ndarray:
        return argmax_lowest(self.scores(names))


@dataclass
class CnnPipeline:
    model: CnnModel
    mode: str = "single"
    kind: str = "cnn"

    @property
    def classes(self) -> tuple[str, ...]:
        return self.model.classes

    def _raw(self, names: Sequence[str]) -> np.ndarray:
        x = encode_batch(list(names), self.model.config.max_len, self.model.config.alphabet, truncate=True)
        return self.model.predict_proba(x)

    def proba(self, names: Sequence[str], relatives=None) -> np.ndarray:
        p = self._raw(names)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, names: Sequence[str], relatives=None) -> np.ndarray:
        return argmax_lowest(self._raw(names))


@dataclass
class N2cPipeline:
    ref: n2c.ReferenceList
    majority_tiebreak: bool = False
    mode: str = "single"
    kind: str = "n2c"

    @property
    def classes(self) -> tuple[str, ...]:
        return self.ref.classes

    def proba(self, names, relatives=None):
        return None

    def predict(self, names: Sequence[str], relatives=None) -> np.ndarray:
        return n2c.classify_batch(list(names), self.ref, self.majority_tiebreak)


@dataclass
class TwoStagePipeline:
    """First-stage name model plus the household combiner.

    Scores are for the positive class `stage2.positive_class`; the other
    class of a two-class first stage is the negative one.
    """

    stage1: LinearPipeline | CnnPipeline
    stage2: StageTwoModel
    mode: str = "single"
    kind: str = "two_stage"

    @property
    def classes(self) -> tuple[str, ...]:
        return self.stage1.classes

    @property
    def positive(self) -> int:
        return self.classes.index(self.stage2.positive_class)

    def first_stage(self, names: Sequence[str]) -> np.ndarray:
        return self.stage1.proba(names)[:, self.positive]

    def scores(self, names: Sequence[str], relatives: Sequence[str | None] | None) -> np.ndarray:
        p1 = self.first_stage(names)
        if relatives is None:
            p2 = p1
        else:
            rel = [r if r else n for n, r in zip(names, relatives)]
            p2 = self.first_stage(rel)
        return self.stage2.score(p1, p2)

    def predict(self, names: Sequence[str], relatives=None) -> np.ndarray:
        s = self.scores(names, relatives)
        neg = 1 - self.positive
        return np.where(s > 0, self.positive, neg)

    def proba(self, names: Sequence[str], relatives=None) -> np.ndarray:
        """Logistic squashing of the household score; not a calibrated probability."""
        s = self.scores(names, relatives)
        out = np.empty((len(s), 2))
        out[:, self.positive] = 1.0 / (1.0 + np.exp(-np.clip(s, -500, 500)))
        out[:, 1 - self.positive] = 1.0 - out[:, self.positive]
        return out


# --- training recipes --------------------------------------------------------


def train_linear_pipeline(kind: str, mode: str, train: Dataset, seed: int, C: float | None = None,
                          max_n: int | None = None) -> LinearPipeline:
    d = LINEAR_DEFAULTS[(kind, mode)]
    C = d["C"] if C is None else C
    max_n = d["max_n"] if max_n is None else max_n
    space = fit_vocab(train.names, max_n)
    X = space.transform(train.names)
    weights = class_weights(train.labels, len(train.classes))
    model = train_linear(kind, X, train.labels, C, weights=weights, seed=seed, classes=train.class_names,
                         feature_space_ref=space.fingerprint())
    return LinearPipeline(space, model, mode)


def train_cnn_pipeline(mode: str, train: Dataset, val: Dataset, seed: int,
                       config: CnnConfig | None = None, dtype=np.float32):
    config = config or (CnnConfig.concat_defaults() if mode == "concat" else CnnConfig())
    weights = class_weights(train.labels, len(train.classes))
    model, history = train_cnn(config, train, val, weights, seed=seed, dtype=dtype)
    return CnnPipeline(model, mode), history


@dataclass
class TrainResult:
    pipeline: object
    train: Dataset
    val: Dataset
    test: Dataset
    history: object = None


def prepare_splits(ds: Dataset, mode: str, seed: int, ratios=SPLIT_RATIOS):
    """Split, then in single mode add relatives of training records as extra names."""
    train, val, test = split_dataset(ds, ratios, seed)
    if mode == "single":
        train = augment_single(train)
    return train, val, test


def train_pipeline(kind: str, mode: str, ds: Dataset, seed: int = 0, *, C: float | None = None,
                   max_n: int | None = None, cnn_config: CnnConfig | None = None, dtype=np.float32,
                   majority_tiebreak: bool = False, stage1: str = "lr", stage2_C: float = STAGE2_C,
                   rfe: bool = True, cfg: PreprocessConfig = DEFAULT_CONFIG) -> TrainResult:
    """Train any supported model kind on a labeled dataset."""
    if kind in ("lr", "svm"):
        train, val, test = prepare_splits(ds, mode, seed)
        return TrainResult(train_linear_pipeline(kind, mode, train, seed, C, max_n), train, val, test)
    if kind == "cnn":
        train, val, test = prepare_splits(ds, mode, seed)
        pipe, history = train_cnn_pipeline(mode, train, val, seed, cnn_config, dtype)
        return TrainResult(pipe, train, val, test, history)
    if kind == "n2c":
        train, val, test = split_dataset(ds, SPLIT_RATIOS, seed)
        ref = n2c.build_reference(train, cfg)
        return TrainResult(N2cPipeline(ref, majority_tiebreak, mode), train, val, test)
    if kind == "two_stage":
        return _train_two_stage(ds, seed, stage1, C, max_n, cnn_config, dtype, stage2_C, rfe)
    raise ValueError(f"unknown model kind {kind!r}")


def _train_two_stage(ds, seed, stage1, C, max_n, cnn_config, dtype, stage2_C, rfe) -> TrainResult:
    if len(ds.classes) != 2:
        raise ValueError("the household model needs exactly two classes")
    train, val, test = split_dataset(ds, TWO_STAGE_RATIOS, seed)
    names_train = augment_single(train)
    if stage1 == "cnn":
        first, _ = train_cnn_pipeline("single", names_train, val, seed, cnn_config, dtype)
    else:
        first = train_linear_pipeline(stage1, "single", names_train, seed, C, max_n)
    # the minority class of the training data is the positive one
    counts = np.bincount(train.labels, minlength=2)
    positive = int(np.argmin(counts))
    y_val = (val.labels == positive).astype(np.int64)
    p = first.proba(val.names)[:, positive]
    rel = [r.relative_name or r.primary_name for r in val.records]
    q = first.proba(rel)[:, positive]
    pairs = np.c_[p, q]
    pool = FeaturePool()
    trace = []
    if rfe:
        # selection is scored on the same validation pairs the stage is fitted on
        pool, trace = rfe_select(pool, pairs, y_val, pairs, y_val, stage2_C, seed)
    stage2 = train_stage2(pairs, y_val, stage2_C, seed, pool, positive_class=ds.classes[positive].name,
                          stage1_ref=first.kind)
    stage2.selection = trace
    return TrainResult(TwoStagePipeline(first, stage2), train, val, test)
