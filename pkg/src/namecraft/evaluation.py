"""Confusion matrices, precision/recall/F1, bootstrap standard errors,
Cohen's kappa and per-class character frequency profiles.

Predictions are integer class ids; negative ids mark dictionary outcomes
(-1 Unclassified, -2 Ambiguous). Those are tallied separately, excluded
from the confusion body and reported through coverage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import LETTERS, Dataset
from .errors import EmptyClassError, LengthMismatchError

UNCLASSIFIED = -1
AMBIGUOUS = -2


@dataclass
class ConfusionMatrix:
    matrix: np.ndarray  # (K, K), rows true, columns predicted
    unclassified: int = 0
    ambiguous: int = 0

    @property
    def classified(self) -> int:
        return int(self.matrix.sum())

    @property
    def total(self) -> int:
        return self.classified + self.unclassified + self.ambiguous

    @property
    def coverage(self) -> float:
        return self.classified / self.total if self.total else 0.0


def _check_lengths(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"{a.size} predictions vs {b.size} labels")
    return a, b


def confusion(preds: Sequence[int], truth: Sequence[int], k: int) -> ConfusionMatrix:
    preds, truth = _check_lengths(preds, truth)
    ok = preds >= 0
    if (preds >= k).any() or (truth < 0).any() or (truth >= k).any():
        raise ValueError("class ids out of range")
    m = np.bincount(truth[ok] * k + preds[ok], minlength=k * k).reshape(k, k)
    return ConfusionMatrix(m, int((preds == UNCLASSIFIED).sum()), int((preds == AMBIGUOUS).sum()))


@dataclass
class PRF:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    accuracy: float
    # classes whose precision or recall had a zero denominator
    undefined_precision: list[int] = field(default_factory=list)
    undefined_recall: list[int] = field(default_factory=list)


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros(num.shape, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out, ~ok


def prf(cm: ConfusionMatrix | np.ndarray) -> PRF:
    m = cm.matrix if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    diag = np.diag(m).astype(np.float64)
    precision, p_flag = _safe_div(diag, m.sum(axis=0).astype(np.float64))
    recall, r_flag = _safe_div(diag, m.sum(axis=1).astype(np.float64))
    f1, _ = _safe_div(2 * precision * recall, precision + recall)
    total = m.sum()
    return PRF(precision, recall, f1, float(f1.mean()), float(diag.sum() / total) if total else 0.0,
               np.flatnonzero(p_flag).tolist(), np.flatnonzero(r_flag).tolist())


def _metric_vector(preds: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    r = prf(confusion(preds, truth, k))
    return np.concatenate([[r.accuracy, r.macro_f1], r.precision, r.recall])


def bootstrap_se(preds: Sequence[int], truth: Sequence[int], k: int, B: int = 1000,
                 seed: int = 0) -> dict[str, np.ndarray | float]:
    """Nonparametric bootstrap over records; SE is the sample std over resamples.

    Resample b draws its indices from a generator seeded by (seed, b), so
    results do not depend on evaluation order.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    preds, truth = _check_lengths(preds, truth)
    n = preds.size
    if n == 0:
        raise ValueError("no records to resample")
    stats = np.empty((B, 2 + 2 * k))
    for b in range(B):
        idx = np.random.default_rng([seed, b]).integers(0, n, size=n)
        stats[b] = _metric_vector(preds[idx], truth[idx], k)
    se = stats.std(axis=0, ddof=1)
    return {"accuracy": float(se[0]), "macro_f1": float(se[1]),
            "precision": se[2:2 + k], "recall": se[2 + k:]}


def cohen_kappa(a1: Sequence, a2: Sequence) -> float:
    a1 = list(a1)
    a2 = list(a2)
    if len(a1) != len(a2):
        raise LengthMismatchError(f"{len(a1)} vs {len(a2)} annotations")
    if not a1:
        raise ValueError("no annotations")
    labels = sorted(set(a1) | set(a2), key=str)
    pos = {lab: i for i, lab in enumerate(labels)}
    t = np.zeros((len(labels), len(labels)))
    for x, y in zip(a1, a2):
        t[pos[x], pos[y]] += 1
    t /= t.sum()
    p_o = float(np.trace(t))
    p_e = float(t.sum(axis=1) @ t.sum(axis=0))
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def char_frequency_profile(ds: Dataset) -> dict[str, np.ndarray]:
    """Per class: mean count of each letter over mean letter count (markers excluded)."""
    labels = ds.labels
    out = {}
    lookup = {ch: i for i, ch in enumerate(LETTERS)}
    for c in ds.classes:
        names = [r.primary_name for r, y in zip(ds.records, labels) if y == c.id]
        if not names:
            raise EmptyClassError(f"class {c.name!r} has no records")
        counts = np.zeros(len(LETTERS))
        for name in names:
            for ch in name:
                i = lookup.get(ch)
                if i is not None:
                    counts[i] += 1
        # ratio of means: the 1/len(names) factors cancel
        out[c.name] = counts / counts.sum() if counts.sum() else counts
    return out


def char_frequency_csv(profile: dict[str, np.ndarray]) -> str:
    lines = ["class," + ",".join(LETTERS)]
    for name, row in profile.items():
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    classes: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    accuracy: float
    coverage: float
    n: int
    n_classified: int
    unclassified: int = 0
    ambiguous: int = 0
    confusion: list[list[int]] = field(default_factory=list)
    se: dict = field(default_factory=dict)
    undefined_precision: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Aligned table: P and R per class with SEs in parentheses."""

        def cell(v, s):
            return f"{v:.4f}" + (f" ({s:.4f})" if s is not None else "")

        prec_se = self.se.get("precision")
        rec_se = self.se.get("recall")
        width = max(8, *(len(c) for c in self.classes))
        rows = [f"{'class':<{width}}  {'P':<17}  {'R':<17}  {'F1':<6}"]
        for i, c in enumerate(self.classes):
            rows.append(
                f"{c:<{width}}  {cell(self.precision[i], prec_se[i] if prec_se else None):<17}  "
                f"{cell(self.recall[i], rec_se[i] if rec_se else None):<17}  {self.f1[i]:.4f}"
            )
        rows.append(f"{'macro-F1':<{width}}  {cell(self.macro_f1, self.se.get('macro_f1'))}")
        rows.append(f"{'accuracy':<{width}}  {cell(self.accuracy, self.se.get('accuracy'))}")
        rows.append(f"n = {self.n}; coverage = {100 * self.coverage:.2f}%"
                    + (f" ({self.unclassified} unclassified, {self.ambiguous} ambiguous)"
                       if self.unclassified or self.ambiguous else ""))
        return "\n".join(rows) + "\n"


def evaluate(preds: Sequence[int], truth: Sequence[int], classes: Sequence[str],
             B: int | None = 1000, seed: int = 0) -> MetricsReport:
    """Full report; bootstrap SEs are skipped when `B` is None."""
    k = len(classes)
    cm = confusion(preds, truth, k)
    r = prf(cm)
    se = {}
    if B:
        raw = bootstrap_se(preds, truth, k, B, seed)
        se = {key: (v.tolist() if isinstance(v, np.ndarray) else v) for key, v in raw.items()}
    return MetricsReport(
        list(classes), r.precision.tolist(), r.recall.tolist(), r.f1.tolist(), r.macro_f1, r.accuracy,
        cm.coverage, cm.total, cm.classified, cm.unclassified, cm.ambiguous, cm.matrix.tolist(), se,
        r.undefined_precision,
    )
