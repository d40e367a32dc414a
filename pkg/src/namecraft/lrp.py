"""Layer-wise relevance propagation for the character CNN.

The target class's pre-sigmoid logit is redistributed backwards with the
epsilon rule

    R_i = sum_j a_i w_ij / (z_j + eps * sign(z_j)) * R_j,

where z_j = sum_k a_k w_kj + b_j is the pre-activation of unit j. Element-
wise activations pass relevance through unchanged, max-over-time pooling
routes each filter's relevance to its argmax position, and batch norm is
folded into the convolution before propagation. The bias share
b_j R_j / (z_j + eps*sign) and the stabiliser share are not passed on;
both are accumulated so that

    sum(R_input) + absorbed_bias + absorbed_eps == logit

holds up to rounding.
"""

from __future__ import annotations

import csv
import html
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cnn import CnnModel, encode_batch
from .corpus import DEFAULT_CONFIG, PreprocessConfig, part_spans
from .errors import LengthMismatchError, ModelMismatchError

EPSILON = 1e-7


@dataclass
class RelevanceMap:
    """Input relevances R[c, d] for one name and one target class."""

    name: str
    relevances: np.ndarray  # (len(name), embed_dim)
    target_class: int
    logit: float
    absorbed_bias: float = 0.0
    absorbed_eps: float = 0.0
    # per kernel width: (positions, filters) relevance at the conv output
    conv_relevance: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.relevances.sum())

    def conservation_error(self) -> float:
        """|sum R + absorbed bias - logit|; the stabiliser residue is left in."""
        return abs(self.total + self.absorbed_bias - self.logit)


def _stab(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _resolve_target(model: CnnModel, target) -> int:
    if isinstance(target, str):
        if target not in model.classes:
            raise ModelMismatchError(f"unknown class {target!r}; model has {list(model.classes)}")
        return model.classes.index(target)
    t = int(target)
    if not 0 <= t < model.n_classes:
        raise ModelMismatchError(f"target class {t} out of range for {model.n_classes} classes")
    return t


def _folded_conv(model: CnnModel, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Conv weights and bias with inference-mode batch norm folded in."""
    cfg, p, buf = model.config, model.params, model.buffers
    W = p[f"conv{k}.W"]
    b = p[f"conv{k}.b"] if cfg.conv_bias else np.zeros(W.shape[2])
    if not cfg.batch_norm:
        return W, b
    scale = p[f"bn{k}.gamma"] / np.sqrt(buf[f"bn{k}.var"] + cfg.bn_epsilon)
    return W * scale, (b - buf[f"bn{k}.mean"]) * scale + p[f"bn{k}.beta"]


def lrp_batch(model: CnnModel, x: np.ndarray, target, eps: float = EPSILON,
              keep_conv: bool = False) -> dict:
    """Vectorised LRP over a batch of encoded sequences.

    Returns a dict with ``relevance`` (B, max_len, D), ``logit`` (B,),
    ``absorbed_bias`` (B,), ``absorbed_eps`` (B,) and, with `keep_conv`,
    ``conv`` mapping kernel width to (B, T, F) conv-output relevances.
    """
    if not isinstance(model, CnnModel):
        raise ModelMismatchError("LRP requires the neural model")
    cfg, p = model.config, model.params
    c = _resolve_target(model, target)
    _, cache = model.forward(x, training=False)
    B = cache["logits"].shape[0]
    bias_acc = np.zeros(B)
    eps_acc = np.zeros(B)

    def dense(a, W, b, z, r):
        # epsilon rule through one affine map a @ W + b = z
        zs = _stab(z, eps)
        ratio = r / zs
        nonlocal bias_acc, eps_acc
        bias_acc = bias_acc + (ratio * b).sum(axis=1)
        eps_acc = eps_acc + (ratio * (zs - z)).sum(axis=1)
        return a * (ratio @ W.T)

    logit = cache["logits"][:, c]
    r = dense(cache["g"], p["out.W"][:, [c]], p["out.b"][[c]], logit[:, None], logit[:, None])
    if cfg.dense_units:
        r = dense(cache["h"], p["dense.W"], p["dense.b"], cache["dense_z"], r)
    e = cache["e"]
    _, L, D = e.shape
    r_in = np.zeros_like(e)
    conv_maps = {}
    offset = 0
    for k, f in zip(cfg.kernel_sizes, cfg.filters):
        layer = cache[f"conv{k}"]
        r_pool = r[:, offset:offset + f]
        offset += f
        W, b = _folded_conv(model, k)
        idx = layer["idx"]  # (B, F)
        pre = np.take_along_axis(layer["pre"], idx[:, None, :], axis=1)[:, 0, :]
        zs = _stab(pre, eps)
        ratio = r_pool / zs
        bias_acc += (ratio * b).sum(axis=1)
        eps_acc += (ratio * (zs - pre)).sum(axis=1)
        T = L - k + 1
        A = np.zeros((B, T, f))
        np.put_along_axis(A, idx[:, None, :], ratio[:, None, :], axis=1)
        if keep_conv:
            R_conv = np.zeros((B, T, f))
            np.put_along_axis(R_conv, idx[:, None, :], r_pool[:, None, :], axis=1)
            conv_maps[k] = R_conv
        back = (A.reshape(B * T, f) @ W.reshape(k * D, f).T).reshape(B, T, k, D)
        for o in range(k):
            r_in[:, o:o + T, :] += back[:, :, o, :]
    r_in *= e
    out = {"relevance": r_in, "logit": logit.copy(), "absorbed_bias": bias_acc, "absorbed_eps": eps_acc}
    if keep_conv:
        out["conv"] = conv_maps
    return out


def relevance_maps(model: CnnModel, names: Sequence[str], target, eps: float = EPSILON,
                   batch_size: int = 256, keep_conv: bool = False) -> list[RelevanceMap]:
    """One RelevanceMap per canonical name; overlong names are truncated."""
    if not isinstance(model, CnnModel):
        raise ModelMismatchError("LRP requires the neural model")
    c = _resolve_target(model, target)
    L = model.config.max_len
    out = []
    for start in range(0, len(names), batch_size):
        chunk = list(names[start:start + batch_size])
        x = encode_batch(chunk, L, model.config.alphabet, truncate=True)
        res = lrp_batch(model, x, c, eps, keep_conv)
        for i, name in enumerate(chunk):
            name = name[:L]
            out.append(RelevanceMap(
                name=name,
                relevances=res["relevance"][i, :len(name)].copy(),
                target_class=c,
                logit=float(res["logit"][i]),
                absorbed_bias=float(res["absorbed_bias"][i]),
                absorbed_eps=float(res["absorbed_eps"][i]),
                conv_relevance={k: v[i] for k, v in res.get("conv", {}).items()},
            ))
    return out


def lrp_relevance(model: CnnModel, name: str, target, eps: float = EPSILON,
                  keep_conv: bool = True) -> RelevanceMap:
    return relevance_maps(model, [name], target, eps, keep_conv=keep_conv)[0]


def char_relevance(rmap: RelevanceMap | np.ndarray) -> np.ndarray:
    """Per-character relevance: the sum over embedding dimensions."""
    r = rmap.relevances if isinstance(rmap, RelevanceMap) else np.asarray(rmap, dtype=np.float64)
    return r.sum(axis=1)


# --- aggregate reports ----------------------------------------------------------


@dataclass
class NgramReport:
    n: int
    min_count: int
    entries: list[tuple[str, float, int]]  # (ngram, mean relevance, count), best first

    def top(self, m: int) -> list[str]:
        return [g for g, _, _ in self.entries[:m]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ngram", "mean_relevance", "count"])
        for g, mean, count in self.entries:
            w.writerow([g, repr(mean), count])
        return buf.getvalue()


def ngram_from_chars(names: Sequence[str], char_rels: Sequence[np.ndarray], n: int,
                     min_count: int = 25) -> NgramReport:
    """Mean summed relevance of every n-gram occurrence, filtered by count."""
    if n < 1:
        raise ValueError("n must be positive")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, rel in zip(names, char_rels):
        if len(rel) != len(name):
            raise LengthMismatchError(f"{len(rel)} relevances for a name of length {len(name)}")
        window = np.convolve(rel, np.ones(n), mode="valid") if len(name) >= n else []
        for i, value in enumerate(window):
            g = name[i:i + n]
            sums[g] = sums.get(g, 0.0) + float(value)
            counts[g] = counts.get(g, 0) + 1
    entries = [(g, sums[g] / counts[g], counts[g]) for g in counts if counts[g] >= min_count]
    entries.sort(key=lambda t: (-t[1], t[0]))
    return NgramReport(n, min_count, entries)


def ngram_relevance(model: CnnModel, names: Sequence[str], n: int, target,
                    min_count: int = 25) -> NgramReport:
    """Rank n-grams by mean LRP relevance toward `target` over `names`."""
    maps = relevance_maps(model, names, target)
    return ngram_from_chars([m.name for m in maps], [char_relevance(m) for m in maps], n, min_count)


def correctly_classified(model: CnnModel, names: Sequence[str], labels: Sequence[int]) -> list[int]:
    """Indices of names the model assigns to their true class."""
    x = encode_batch(list(names), model.config.max_len, model.config.alphabet, truncate=True)
    pred = model.predict_proba(x).argmax(axis=1)
    return np.flatnonzero(pred == np.asarray(labels)).tolist()


@dataclass
class PositionalProfile:
    bins: int
    # (part index, bin, mean |relevance|, count, 95% CI half-width)
    rows: list[tuple[int, int, float, int, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["part", "bin", "bin_start", "bin_end", "mean_abs_relevance", "count", "ci95"])
        for part, b, mean, count, ci in self.rows:
            w.writerow([part, b, repr(b / self.bins), repr((b + 1) / self.bins), repr(mean), count, repr(ci)])
        return buf.getvalue()

    def table(self) -> dict[tuple[int, int], tuple[float, int, float]]:
        return {(p, b): (m, c, ci) for p, b, m, c, ci in self.rows}


def profile_from_chars(names: Sequence[str], char_rels: Sequence[np.ndarray], bins: int,
                       cfg: PreprocessConfig = DEFAULT_CONFIG) -> PositionalProfile:
    """Bin |relevance| by normalised position within each name part.

    Position i of a part of length m maps to i / (m - 1); single-letter
    parts map to 0.5. Part indices count from 1 across the whole string.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values: dict[tuple[int, int], list[float]] = {}
    for name, rel in zip(names, char_rels):
        if len(rel) != len(name):
            raise LengthMismatchError(f"{len(rel)} relevances for a name of length {len(name)}")
        for part_no, (lo, hi) in enumerate(part_spans(name, cfg), start=1):
            m = hi - lo
            for i in range(m):
                pos = 0.5 if m == 1 else i / (m - 1)
                b = min(int(pos * bins), bins - 1)
                values.setdefault((part_no, b), []).append(abs(float(rel[lo + i])))
    rows = []
    for key in sorted(values):
        v = np.asarray(values[key])
        ci = 1.96 * v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
        rows.append((key[0], key[1], float(v.mean()), int(v.size), float(ci)))
    return PositionalProfile(bins, rows)


def positional_profile(model: CnnModel, names: Sequence[str], bins: int, target) -> PositionalProfile:
    maps = relevance_maps(model, names, target)
    return profile_from_chars([m.name for m in maps], [char_relevance(m) for m in maps], bins)


# --- rendering ----------------------------------------------------------------------


def _shade(r: float, peak: float) -> str:
    a = abs(r) / peak if peak > 0 else 0.0
    fade = round(255 * (1.0 - a))
    if r > 0:
        return f"rgb(255,{fade},{fade})"
    if r < 0:
        return f"rgb({fade},{fade},255)"
    return "rgb(255,255,255)"


def render_heatmap(name: str, relevances: Sequence[float]) -> str:
    """Inline HTML: one span per character, red for positive, blue for negative."""
    rel = np.asarray(relevances, dtype=np.float64)
    if rel.shape != (len(name),):
        raise LengthMismatchError(f"{rel.size} relevances for a name of length {len(name)}")
    peak = float(np.abs(rel).max()) if rel.size else 0.0
    spans = [
        f'<span style="background-color:{_shade(float(r), peak)}" title="{float(r):.6g}">{html.escape(ch)}</span>'
        for ch, r in zip(name, rel)
    ]
    return '<div class="name" style="font-family:monospace">' + "".join(spans) + "</div>"


def heatmap_page(rows: Sequence[tuple[str, Sequence[float]]], title: str = "relevance") -> str:
    body = "\n".join(render_heatmap(n, r) for n, r in rows)
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>"
        + html.escape(title)
        + "</title></head><body>\n"
        + body
        + "\n</body></html>\n"
    )
