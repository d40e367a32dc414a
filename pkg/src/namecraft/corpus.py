"""Records, datasets, name canonicalisation, splitting and synthetic corpora.

A canonical name is a run of parts such as ``{ABDUL}{KARIM}``; a household
string joins two canonical names with the separator, ``{RAM}|{SITA}``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    BadProfileError,
    EmptyClassError,
    EmptyNameError,
    LabelError,
    RatioError,
    SchemaError,
)

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
CSV_HEADER = ("name", "relative_name", "label")

_NON_ALPHA = re.compile(r"[^A-Za-z]+")


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str


@dataclass(frozen=True)
class PreprocessConfig:
    part_open: str = "{"
    part_close: str = "}"
    name_separator: str = "|"

    def __post_init__(self):
        markers = (self.part_open, self.part_close, self.name_separator)
        for m in markers:
            if len(m) != 1 or m in LETTERS or m in LETTERS.lower() or m.isspace():
                raise ValueError(f"invalid marker character {m!r}")
        if len(set(markers)) != 3:
            raise ValueError("markers must be distinct")

    @property
    def alphabet(self) -> str:
        """Every character a canonical household string may contain."""
        return LETTERS + self.part_open + self.part_close + self.name_separator

    def to_dict(self) -> dict:
        return {
            "part_open": self.part_open,
            "part_close": self.part_close,
            "name_separator": self.name_separator,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PreprocessConfig":
        return cls(d["part_open"], d["part_close"], d["name_separator"])


DEFAULT_CONFIG = PreprocessConfig()


@dataclass(frozen=True)
class NameRecord:
    primary_name: str
    relative_name: str | None = None
    label: int | None = None


@dataclass(frozen=True)
class Dataset:
    records: tuple[NameRecord, ...]
    classes: tuple[ClassLabel, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "classes", tuple(self.classes))
        for i, c in enumerate(self.classes):
            if c.id != i:
                raise ValueError("class ids must be dense 0..K-1")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise ValueError("class names must be unique")
        k = len(self.classes)
        for r in self.records:
            if r.label is not None and not 0 <= r.label < k:
                raise ValueError(f"label {r.label} out of range for {k} classes")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[NameRecord]:
        return iter(self.records)

    @property
    def names(self) -> list[str]:
        return [r.primary_name for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise ValueError("dataset contains unlabeled records")
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def subset(self, indices: Iterable[int], provenance: str | None = None) -> "Dataset":
        recs = [self.records[i] for i in indices]
        return Dataset(tuple(recs), self.classes, provenance or self.provenance)

    def stats(self) -> dict:
        """Per-class record counts and mean canonical letter counts."""
        out = {}
        for c in self.classes:
            names = [r.primary_name for r in self.records if r.label == c.id]
            lengths = [sum(ch in LETTERS for ch in n) for n in names]
            out[c.name] = {
                "count": len(names),
                "mean_letters": float(np.mean(lengths)) if lengths else 0.0,
            }
        return out


def make_classes(names: Sequence[str]) -> tuple[ClassLabel, ...]:
    return tuple(ClassLabel(i, n) for i, n in enumerate(names))


def preprocess_name(raw: str, cfg: PreprocessConfig = DEFAULT_CONFIG) -> str:
    """Canonicalise a raw name: ``"Abdul  Karim!"`` becomes ``{ABDUL}{KARIM}``.

    Whitespace separates parts; every other non A-Z character is dropped,
    including non-ASCII letters.
    """
    parts = []
    for token in raw.split():
        letters = _NON_ALPHA.sub("", token).upper()
        if letters:
            parts.append(f"{cfg.part_open}{letters}{cfg.part_close}")
    if not parts:
        raise EmptyNameError(raw)
    return "".join(parts)


def concat_names(primary: str, relative: str, cfg: PreprocessConfig = DEFAULT_CONFIG) -> str:
    return primary + cfg.name_separator + relative


def split_parts(canonical: str, cfg: PreprocessConfig = DEFAULT_CONFIG) -> list[str]:
    """Letters of each name part, across all names of a household string."""
    pattern = re.escape(cfg.part_open) + "([A-Z]+)" + re.escape(cfg.part_close)
    return re.findall(pattern, canonical)


def part_spans(canonical: str, cfg: PreprocessConfig = DEFAULT_CONFIG) -> list[tuple[int, int]]:
    """(start, stop) offsets of the letters of each part inside `canonical`."""
    pattern = re.escape(cfg.part_open) + "([A-Z]+)" + re.escape(cfg.part_close)
    return [m.span(1) for m in re.finditer(pattern, canonical)]


def _resolve_label(raw: str, lookup: Mapping[str, int], row: int) -> int:
    key = raw.strip().casefold()
    if key not in lookup:
        raise LabelError(raw, row)
    return lookup[key]


def iter_csv_rows(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (row number, row dict) from a names CSV, validating the header.

    Row numbers count data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip().lstrip("﻿") for h in header]
        if tuple(header) != CSV_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise SchemaError(f"{path}: row {i} has {len(row)} columns, expected 3")
            yield i, dict(zip(CSV_HEADER, row))


def canonical_row(row: dict, mode: str, cfg: PreprocessConfig, rownum: int) -> tuple[str, str | None]:
    """Canonical (document, relative) pair for one CSV row."""
    try:
        primary = preprocess_name(row["name"], cfg)
    except EmptyNameError:
        raise EmptyNameError(row["name"], rownum) from None
    relative = None
    if row["relative_name"].strip():
        try:
            relative = preprocess_name(row["relative_name"], cfg)
        except EmptyNameError:
            raise EmptyNameError(row["relative_name"], rownum) from None
    if mode == "concat" and relative is not None:
        primary = concat_names(primary, relative, cfg)
    return primary, relative


def load_dataset(
    path: str | Path,
    mode: str = "single",
    cfg: PreprocessConfig = DEFAULT_CONFIG,
    classes: Sequence[str] | None = None,
) -> Dataset:
    """Read a ``name,relative_name,label`` CSV into a Dataset.

    If `classes` is None the class list is the sorted set of labels in the
    file. Rows with an empty label become unlabeled records.
    """
    if mode not in ("single", "concat"):
        raise ValueError(f"mode must be 'single' or 'concat', got {mode!r}")
    rows = list(iter_csv_rows(path))
    if classes is None:
        seen = {}
        for _, row in rows:
            lab = row["label"].strip()
            if lab:
                seen.setdefault(lab.casefold(), lab)
        classes = [seen[k] for k in sorted(seen)]
    lookup = {name.casefold(): i for i, name in enumerate(classes)}
    records = []
    for rownum, row in rows:
        doc, relative = canonical_row(row, mode, cfg, rownum)
        label = _resolve_label(row["label"], lookup, rownum) if row["label"].strip() else None
        records.append(NameRecord(doc, relative, label))
    return Dataset(tuple(records), make_classes(classes), f"{path} ({mode})")


def write_dataset_csv(ds: Dataset, path: str | Path, cfg: PreprocessConfig = DEFAULT_CONFIG) -> None:
    """Write records back out as raw space-separated names."""

    def raw(canonical: str) -> str:
        return " ".join(split_parts(canonical.split(cfg.name_separator)[0], cfg))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in ds.records:
            rel = " ".join(split_parts(r.relative_name, cfg)) if r.relative_name else ""
            label = ds.classes[r.label].name if r.label is not None else ""
            w.writerow([raw(r.primary_name), rel, label])


def augment_single(ds: Dataset) -> Dataset:
    """Append each non-empty relative name as an extra record with the same label."""
    extra = tuple(
        NameRecord(r.relative_name, None, r.label) for r in ds.records if r.relative_name
    )
    return Dataset(ds.records + extra, ds.classes, ds.provenance + " +augmented")


def split_dataset(
    ds: Dataset, ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split.

    Each class is shuffled and cut at floor(n_c * ratio) for val and test;
    rounding remainders go to train. Records keep their source order within
    each split.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise RatioError(f"ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    labels = ds.labels
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in range(len(ds.classes)):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        n_val = math.floor(idx.size * ratios[1] + 1e-9)
        n_test = math.floor(idx.size * ratios[2] + 1e-9)
        n_train = idx.size - n_val - n_test
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train:n_train + n_val].tolist())
        parts[2].extend(idx[n_train + n_val:].tolist())
    names = ("train", "val", "test")
    return tuple(
        ds.subset(sorted(p), f"{ds.provenance} [{n} seed={seed}]") for p, n in zip(parts, names)
    )


def class_weights(labels: Sequence[int], k: int) -> dict[int, float]:
    """Balanced weights N / (K * N_c) for class ids 0..k-1."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=k)[:k]
    if labels.size == 0 or (counts == 0).any():
        missing = [c for c in range(k) if counts[c] == 0]
        raise EmptyClassError(f"classes with no examples: {missing}")
    n = labels.size
    return {c: n / (k * int(counts[c])) for c in range(k)}


# --- synthetic corpora -------------------------------------------------------


@dataclass(frozen=True)
class ClassProfile:
    name: str
    proportion: float
    letter_weights: tuple[float, ...]
    part_length: tuple[int, int] = (3, 8)
    part_count: tuple[int, int] = (2, 2)
    relative_rate: float = 0.0
    # which class profiles generate the primary / relative names of this class
    primary_mix: tuple[tuple[str, float], ...] = ()
    relative_mix: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class SyntheticProfile:
    classes: tuple[ClassProfile, ...]

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticProfile":
        profiles = []
        for c in d["classes"]:
            lw = c["letter_weights"]
            unknown = set(lw) - set(LETTERS)
            if unknown:
                raise BadProfileError(f"class {c['name']}: letters outside A-Z: {sorted(unknown)}")
            weights = tuple(float(lw.get(ch, 0.0)) for ch in LETTERS)
            profiles.append(
                ClassProfile(
                    name=c["name"],
                    proportion=float(c["proportion"]),
                    letter_weights=weights,
                    part_length=tuple(c.get("part_length", (3, 8))),
                    part_count=tuple(c.get("part_count", (2, 2))),
                    relative_rate=float(c.get("relative_rate", 0.0)),
                    primary_mix=tuple(sorted(c.get("primary_mix", {}).items())),
                    relative_mix=tuple(sorted(c.get("relative_mix", {}).items())),
                )
            )
        prof = cls(tuple(profiles))
        prof.validate()
        return prof

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticProfile":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def validate(self) -> None:
        names = [c.name for c in self.classes]
        if not names or len(set(names)) != len(names):
            raise BadProfileError("profile needs at least one class with unique names")
        if abs(sum(c.proportion for c in self.classes) - 1.0) > 1e-6:
            raise BadProfileError("class proportions must sum to 1")
        for c in self.classes:
            w = np.asarray(c.letter_weights)
            if (w < 0).any() or abs(w.sum() - 1.0) > 1e-6:
                raise BadProfileError(f"class {c.name}: letter weights must be a distribution")
            for lo, hi in (c.part_length, c.part_count):
                if lo < 1 or hi < lo:
                    raise BadProfileError(f"class {c.name}: bad range ({lo}, {hi})")
            if not 0.0 <= c.relative_rate <= 1.0:
                raise BadProfileError(f"class {c.name}: relative_rate outside [0, 1]")
            for mix in (c.primary_mix, c.relative_mix):
                if mix:
                    if any(k not in names for k, _ in mix):
                        raise BadProfileError(f"class {c.name}: mix refers to unknown class")
                    if abs(sum(p for _, p in mix) - 1.0) > 1e-6 or any(p < 0 for _, p in mix):
                        raise BadProfileError(f"class {c.name}: mix must be a distribution")


def default_profile() -> SyntheticProfile:
    """Two-class profile with F/Q/Z versus P/V/W letter asymmetries."""
    return SyntheticProfile.from_json(Path(__file__).parent / "data" / "synthetic_profile.json")


def household_profile() -> SyntheticProfile:
    """Minority class whose primary names partly look like the majority's.

    Every record carries a relative name; minority households always have
    a relative drawn from the minority profile.
    """
    return SyntheticProfile.from_json(Path(__file__).parent / "data" / "household_profile.json")


def _class_counts(proportions: Sequence[float], n: int) -> list[int]:
    # largest-remainder apportionment, ties to the lower class index
    raw = [p * n for p in proportions]
    counts = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _draw_name(rng: np.random.Generator, prof: ClassProfile, cfg: PreprocessConfig) -> str:
    n_parts = int(rng.integers(prof.part_count[0], prof.part_count[1] + 1))
    lengths = rng.integers(prof.part_length[0], prof.part_length[1] + 1, size=n_parts)
    # inverse-CDF draw of all letters at once
    cdf = np.cumsum(prof.letter_weights)
    idx = np.searchsorted(cdf / cdf[-1], rng.random(int(lengths.sum())), side="right")
    letters = "".join(LETTERS[min(i, 25)] for i in idx)
    parts, start = [], 0
    for length in lengths.tolist():
        parts.append(cfg.part_open + letters[start:start + length] + cfg.part_close)
        start += length
    return "".join(parts)


def generate_synthetic(
    profile: SyntheticProfile, n: int, seed: int = 0, cfg: PreprocessConfig = DEFAULT_CONFIG
) -> Dataset:
    """Sample `n` labeled canonical names from per-class letter profiles.

    Class counts follow the requested proportions exactly (largest
    remainder); record order is shuffled deterministically.
    """
    profile.validate()
    by_name = {c.name: c for c in profile.classes}
    rng = np.random.default_rng(seed)
    counts = _class_counts([c.proportion for c in profile.classes], n)

    def pick(mix, default):
        if not mix:
            return default
        keys = [k for k, _ in mix]
        probs = np.array([p for _, p in mix])
        return by_name[keys[int(rng.choice(len(keys), p=probs / probs.sum()))]]

    records = []
    for label, (prof, count) in enumerate(zip(profile.classes, counts)):
        for _ in range(count):
            primary = _draw_name(rng, pick(prof.primary_mix, prof), cfg)
            relative = None
            if prof.relative_rate > 0 and rng.random() < prof.relative_rate:
                relative = _draw_name(rng, pick(prof.relative_mix, prof), cfg)
            records.append(NameRecord(primary, relative, label))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    classes = make_classes([c.name for c in profile.classes])
    return Dataset(tuple(records), classes, f"synthetic(n={n}, seed={seed})")


def concat_dataset(ds: Dataset, cfg: PreprocessConfig = DEFAULT_CONFIG) -> Dataset:
    """Household documents: primary joined with relative where one exists."""
    recs = tuple(
        NameRecord(concat_names(r.primary_name, r.relative_name, cfg) if r.relative_name else r.primary_name,
                   r.relative_name, r.label)
        for r in ds.records
    )
    return Dataset(recs, ds.classes, ds.provenance + " (concat)")
