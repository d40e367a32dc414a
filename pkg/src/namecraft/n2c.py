"""Dictionary baseline: match name parts against a labeled reference list.

Each name part X is looked up by spelling and by phonetic code. For a
class Y the part certainty is

    I(X in Y) = q_s * q_p * (1 - (S_X - S_XY)/S_X * (P_X - P_XY)/P_X)

where S counts spelling matches, P phonetic matches and q_s, q_p are the
fractions of unambiguous keys (seen in one class only). Part certainties
combine into a name certainty

    I(N in Y) = 1 - prod_X (E_X - I(X in Y)) / E_X,    E_X = S_X + P_X.

A channel with no match contributes a ratio of 1 (no evidence) and zero
matches to E_X. Names with no matching part are Unclassified; names whose
two best classes tie exactly are Ambiguous.

Phonetic table
--------------
The phonetic code is a Soundex variant tuned for romanised South Asian
names. "PH" is first rewritten to "F"; then letters map to digit groups::

    1  B P
    2  F V W
    3  C G K Q X
    4  J S Z
    5  D T
    6  L R
    7  M N

A, E, I, O, U, Y and H carry no digit. The code is the group
representative of the first letter (the first letter listed above, e.g.
W -> F, Z -> J; vowels and H keep themselves) followed by three digits.
Adjacent equal digits collapse, also across H; a vowel between them keeps
both. The code is right-padded with zeros. This table is an approximation
written for this package, not a copy of any published Indic table.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import DEFAULT_CONFIG, Dataset, PreprocessConfig, split_parts
from .errors import EmptyCorpusError, ModelFormatError, NoMatchError

UNCLASSIFIED = -1
AMBIGUOUS = -2
OUTCOME_NAMES = {UNCLASSIFIED: "UNCLASSIFIED", AMBIGUOUS: "AMBIGUOUS"}

_GROUPS = ("BP", "FVW", "CGKQX", "JSZ", "DT", "LR", "MN")
_DIGIT = {ch: str(i) for i, g in enumerate(_GROUPS, start=1) for ch in g}
_HEAD = {ch: g[0] for g in _GROUPS for ch in g}


def soundex_code(part: str) -> str:
    """Four-character phonetic code of an A-Z name part.

    >>> soundex_code("KARIM") == soundex_code("KAREEM")
    True
    >>> soundex_code("A")
    'A000'
    """
    if not part or not part.isalpha() or not part.isupper():
        raise ValueError(f"expected a non-empty A-Z string, got {part!r}")
    s = part.replace("PH", "F")
    first = s[0]
    digits = []
    last = _DIGIT.get(first)
    for ch in s[1:]:
        d = _DIGIT.get(ch)
        if d is None:
            if ch != "H":  # vowels separate repeats, H does not
                last = None
            continue
        if d != last:
            digits.append(d)
        last = d
    return (_HEAD.get(first, first) + "".join(digits[:3])).ljust(4, "0")


def certainty_from_counts(s_x: float, s_xy: float, p_x: float, p_xy: float,
                          q_s: float, q_p: float) -> float:
    """Part certainty from raw counts; a zero total means no evidence on that channel."""
    rs = (s_x - s_xy) / s_x if s_x > 0 else 1.0
    rp = (p_x - p_xy) / p_x if p_x > 0 else 1.0
    return q_s * q_p * (1.0 - rs * rp)


def aggregate_certainty(parts: Iterable[tuple[float, float]]) -> float:
    """Combine (E_X, I(X in Y)) pairs into a name certainty."""
    prod = 1.0
    seen = False
    for e, i in parts:
        prod *= (e - i) / e
        seen = True
    if not seen:
        raise NoMatchError("no matching name part")
    return 1.0 - prod


def _unambiguous_fraction(table: Mapping[str, np.ndarray]) -> float:
    if not table:
        return 0.0
    return sum(int(np.count_nonzero(v) == 1) for v in table.values()) / len(table)


@dataclass(frozen=True)
class ReferenceList:
    """Per-class spelling and phonetic counts of reference name parts."""

    classes: tuple[str, ...]
    spelling_counts: Mapping[str, np.ndarray]
    phonetic_counts: Mapping[str, np.ndarray]
    q_s: float
    q_p: float
    class_totals: np.ndarray  # records per class, for the majority tie-break

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def majority_class(self) -> int:
        return int(np.argmax(self.class_totals))

    def spelling(self, part: str) -> tuple[float, np.ndarray]:
        v = self.spelling_counts.get(part)
        return (0.0, np.zeros(self.n_classes)) if v is None else (float(v.sum()), v)

    def phonetic(self, part: str) -> tuple[float, np.ndarray]:
        v = self.phonetic_counts.get(soundex_code(part))
        return (0.0, np.zeros(self.n_classes)) if v is None else (float(v.sum()), v)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "q_s": self.q_s,
            "q_p": self.q_p,
            "class_totals": self.class_totals.astype(int).tolist(),
            "spelling": {k: self.spelling_counts[k].astype(int).tolist() for k in sorted(self.spelling_counts)},
            "phonetic": {k: self.phonetic_counts[k].astype(int).tolist() for k in sorted(self.phonetic_counts)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReferenceList":
        classes = tuple(d["classes"])
        k = len(classes)

        def table(raw):
            out = {}
            for key, counts in raw.items():
                arr = np.asarray(counts, dtype=np.float64)
                if arr.shape != (k,) or (arr < 0).any():
                    raise ModelFormatError(f"bad counts for reference key {key!r}")
                out[key] = arr
            return out

        q_s, q_p = float(d["q_s"]), float(d["q_p"])
        if not (0.0 <= q_s <= 1.0 and 0.0 <= q_p <= 1.0):
            raise ModelFormatError("quality factors must lie in [0, 1]")
        totals = np.asarray(d.get("class_totals", [0] * k), dtype=np.float64)
        return cls(classes, table(d["spelling"]), table(d["phonetic"]), q_s, q_p, totals)

    def save_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "ReferenceList":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_reference(train: Dataset, cfg: PreprocessConfig = DEFAULT_CONFIG) -> ReferenceList:
    """Count every name part (relative names included) under its record's label."""
    if len(train) == 0:
        raise EmptyCorpusError("cannot build a reference list from an empty dataset")
    k = len(train.classes)
    labels = train.labels
    spelling: dict[str, np.ndarray] = {}
    phonetic: dict[str, np.ndarray] = {}
    for rec in train.records:
        docs = [rec.primary_name]
        # single mode: relatives count as extra names; concat mode already holds them
        if rec.relative_name and cfg.name_separator not in rec.primary_name:
            docs.append(rec.relative_name)
        for part in (p for d in docs for p in split_parts(d, cfg)):
            spelling.setdefault(part, np.zeros(k))[rec.label] += 1
            phonetic.setdefault(soundex_code(part), np.zeros(k))[rec.label] += 1
    totals = np.bincount(labels, minlength=k).astype(np.float64)
    return ReferenceList(
        tuple(train.class_names), spelling, phonetic,
        _unambiguous_fraction(spelling), _unambiguous_fraction(phonetic), totals,
    )


def part_certainty(part: str, y: int, ref: ReferenceList) -> float:
    s_x, s = ref.spelling(part)
    p_x, p = ref.phonetic(part)
    if s_x == 0 and p_x == 0:
        raise NoMatchError(f"name part {part!r} not in the reference list")
    return certainty_from_counts(s_x, s[y], p_x, p[y], ref.q_s, ref.q_p)


def _part_vector(part: str, ref: ReferenceList) -> tuple[float, np.ndarray] | None:
    """(E_X, certainty for every class) or None when the part is unknown."""
    s_x, s = ref.spelling(part)
    p_x, p = ref.phonetic(part)
    if s_x == 0 and p_x == 0:
        return None
    rs = (s_x - s) / s_x if s_x > 0 else np.ones(ref.n_classes)
    rp = (p_x - p) / p_x if p_x > 0 else np.ones(ref.n_classes)
    return s_x + p_x, ref.q_s * ref.q_p * (1.0 - rs * rp)


def certainty_scores(name: str, ref: ReferenceList, cfg: PreprocessConfig = DEFAULT_CONFIG,
                     cache: dict | None = None) -> tuple[np.ndarray, int, int]:
    """Per-class name certainties plus (matched parts, total parts).

    Raises NoMatchError when no part matches.
    """
    parts = split_parts(name, cfg)
    prod = np.ones(ref.n_classes)
    matched = 0
    for part in parts:
        if cache is not None and part in cache:
            hit = cache[part]
        else:
            hit = _part_vector(part, ref)
            if cache is not None:
                cache[part] = hit
        if hit is None:
            continue
        e, i = hit
        prod *= (e - i) / e
        matched += 1
    if matched == 0:
        raise NoMatchError(f"no part of {name!r} is in the reference list")
    return 1.0 - prod, matched, len(parts)


def name_certainty(name: str, y: int, ref: ReferenceList, cfg: PreprocessConfig = DEFAULT_CONFIG) -> float:
    return float(certainty_scores(name, ref, cfg)[0][y])


def classify_n2c(name: str, ref: ReferenceList, majority_tiebreak: bool = False,
                 cfg: PreprocessConfig = DEFAULT_CONFIG, cache: dict | None = None) -> int:
    """Class id, UNCLASSIFIED or AMBIGUOUS (or the majority class when tie-breaking)."""
    try:
        scores = certainty_scores(name, ref, cfg, cache)[0]
    except NoMatchError:
        return ref.majority_class if majority_tiebreak else UNCLASSIFIED
    order = np.argsort(-scores, kind="stable")
    if scores.size > 1 and scores[order[0]] == scores[order[1]]:
        return ref.majority_class if majority_tiebreak else AMBIGUOUS
    return int(order[0])


def classify_batch(names: Sequence[str], ref: ReferenceList, majority_tiebreak: bool = False,
                   cfg: PreprocessConfig = DEFAULT_CONFIG) -> np.ndarray:
    cache: dict = {}
    return np.array([classify_n2c(n, ref, majority_tiebreak, cfg, cache) for n in names], dtype=np.int64)


def coverage(preds: Sequence[int]) -> float:
    preds = np.asarray(preds)
    return float((preds >= 0).mean()) if preds.size else 0.0


def outcome_counts(preds: Sequence[int]) -> Counter:
    return Counter(OUTCOME_NAMES.get(int(p), "classified") for p in preds)
