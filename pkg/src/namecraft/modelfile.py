"""Versioned model files.

A model file is one JSON document::

    {"format": "namecraft-model", "format_version": 1, "model_kind": ...,
     "classes": [...], "mode": ..., "preprocess": {...}, "seed": ...,
     "training": {...}, "payload": {...}, "tensors": {...}}

Tensors are stored as base64 of little-endian float64 bytes with their
shape, so numbers round-trip exactly. Keys are sorted and the layout is
fixed, which makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from . import n2c
from .cnn import CnnConfig, CnnModel
from .corpus import DEFAULT_CONFIG, PreprocessConfig
from .errors import ModelFormatError, ModelMismatchError
from .featurizer import FeatureSpace
from .linear import LinearModel
from .pipeline import CnnPipeline, LinearPipeline, N2cPipeline, TwoStagePipeline
from .twostage import StageTwoModel

FORMAT = "namecraft-model"
FORMAT_VERSION = 1
KINDS = ("lr", "svm", "cnn", "n2c", "two_stage")


def encode_tensor(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(d: Mapping) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return a.reshape(d["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"corrupt tensor: {exc}") from None


# --- per-kind payloads -------------------------------------------------------------


def _linear_parts(p: LinearPipeline) -> tuple[dict, dict]:
    payload = {
        "feature_space": p.space.to_dict(),
        "feature_space_ref": p.model.feature_space_ref,
        "reg_strength": p.model.reg_strength,
    }
    tensors = {"weights": p.model.weights, "bias": p.model.bias}
    return payload, tensors


def _linear_from(kind: str, classes, mode: str, payload: Mapping, tensors: Mapping) -> LinearPipeline:
    space = FeatureSpace.from_dict(payload["feature_space"])
    ref = payload.get("feature_space_ref", "")
    if ref and ref != space.fingerprint():
        raise ModelMismatchError("linear weights were trained on a different feature space")
    model = LinearModel(kind, decode_tensor(tensors["weights"]), decode_tensor(tensors["bias"]),
                        tuple(classes), float(payload["reg_strength"]), ref)
    if model.n_features != len(space):
        raise ModelMismatchError("weight width does not match the feature space size")
    return LinearPipeline(space, model, mode)


def _cnn_parts(p: CnnPipeline) -> tuple[dict, dict]:
    tensors = {f"param.{k}": v for k, v in p.model.params.items()}
    tensors.update({f"buffer.{k}": v for k, v in p.model.buffers.items()})
    return {"config": p.model.config.to_dict()}, tensors


def _cnn_from(classes, mode: str, payload: Mapping, tensors: Mapping) -> CnnPipeline:
    config = CnnConfig.from_dict(payload["config"])
    params = {k[len("param."):]: decode_tensor(v) for k, v in tensors.items() if k.startswith("param.")}
    buffers = {k[len("buffer."):]: decode_tensor(v) for k, v in tensors.items() if k.startswith("buffer.")}
    return CnnPipeline(CnnModel(config, classes, params, buffers), mode)


def _parts(pipe) -> tuple[str, dict, dict]:
    if isinstance(pipe, LinearPipeline):
        return (pipe.kind, *_linear_parts(pipe))
    if isinstance(pipe, CnnPipeline):
        return ("cnn", *_cnn_parts(pipe))
    if isinstance(pipe, N2cPipeline):
        return "n2c", {"reference": pipe.ref.to_dict(), "majority_tiebreak": pipe.majority_tiebreak}, {}
    if isinstance(pipe, TwoStagePipeline):
        kind1, payload1, tensors1 = _parts(pipe.stage1)
        payload = {"stage1_kind": kind1, "stage1": payload1, "stage2": pipe.stage2.to_dict()}
        return "two_stage", payload, {f"stage1.{k}": v for k, v in tensors1.items()}
    raise TypeError(f"cannot serialise {type(pipe).__name__}")


def _build(kind: str, classes, mode: str, payload: Mapping, tensors: Mapping):
    if kind in ("lr", "svm"):
        return _linear_from(kind, classes, mode, payload, tensors)
    if kind == "cnn":
        return _cnn_from(classes, mode, payload, tensors)
    if kind == "n2c":
        ref = n2c.ReferenceList.from_dict(payload["reference"])
        return N2cPipeline(ref, bool(payload.get("majority_tiebreak", False)), mode)
    if kind == "two_stage":
        inner = {k[len("stage1."):]: v for k, v in tensors.items() if k.startswith("stage1.")}
        first = _build(payload["stage1_kind"], classes, "single", payload["stage1"], inner)
        return TwoStagePipeline(first, StageTwoModel.from_dict(payload["stage2"]), mode)
    raise ModelFormatError(f"unknown model kind {kind!r}")


# --- envelope ----------------------------------------------------------------------


def to_document(pipe, seed: int = 0, training: Mapping | None = None,
                cfg: PreprocessConfig = DEFAULT_CONFIG) -> dict:
    kind, payload, tensors = _parts(pipe)
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "model_kind": kind,
        "classes": list(pipe.classes),
        "mode": pipe.mode,
        "preprocess": cfg.to_dict(),
        "seed": int(seed),
        "training": dict(training or {}),
        "payload": payload,
        "tensors": {k: encode_tensor(v) for k, v in tensors.items()},
    }


def dumps(doc: Mapping) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


def save_model(path: str | Path, pipe, seed: int = 0, training: Mapping | None = None,
               cfg: PreprocessConfig = DEFAULT_CONFIG) -> None:
    text = dumps(to_document(pipe, seed, training, cfg))
    Path(path).write_text(text, encoding="utf-8")


def from_document(doc: Mapping):
    """(pipeline, preprocess config, full document) from a parsed model file."""
    if not isinstance(doc, Mapping) or doc.get("format") != FORMAT:
        raise ModelFormatError("not a namecraft model file")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    kind = doc.get("model_kind")
    if kind not in KINDS:
        raise ModelFormatError(f"unknown model kind {kind!r}")
    try:
        cfg = PreprocessConfig.from_dict(doc["preprocess"])
        pipe = _build(kind, tuple(doc["classes"]), doc["mode"], doc["payload"], doc["tensors"])
    except KeyError as exc:
        raise ModelFormatError(f"model file is missing field {exc}") from None
    return pipe, cfg, doc


def load_model(path: str | Path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    return from_document(doc)


def resave(doc: Mapping) -> str:
    """Serialise a loaded model again, keeping seed and training metadata."""
    pipe, cfg, _ = from_document(doc)
    return dumps(to_document(pipe, doc.get("seed", 0), doc.get("training"), cfg))
