"""Two-stream fusion network.

Low-level stream: (C3D FC6 ⊕ scaled captioning) vs. sentence embedding.
High-level stream: (scaled object evidence ⊕ activity concepts) vs. the
verb/object embedding. Each pair is compared by a multi-modal processing
unit (element-wise sum, element-wise product, and both inputs,
concatenated); the two unit outputs feed a hidden layer that emits an
alignment score and two location offsets.

Feature slots controlled by a toggle keep their width and are fed zeros
when disabled, so ablations share parameter shapes and a disabled pathway
contributes exactly nothing.

Parameters live in a plain dict of float64 arrays under canonical keys;
gradients are hand-derived and mirror those shapes. Parameters are
immutable during evaluation, so scoring is safe to parallelize across
queries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .archive import TensorRecord, read_archive, write_archive
from .data import DEFAULT_DIMS, FeatureKind, Interval
from .features import (
    HighLevelFusionConfig,
    build_low_input,
    normalize_and_scale,
    temporal_avg_pool,
    temporal_max_pool,
)
from .proposals import ClipCandidate, apply_offsets
from .util import derive_seed

PARAM_KEYS = (
    "proj_low.w",
    "proj_low.b",
    "proj_sent.w",
    "proj_sent.b",
    "proj_high.w",
    "proj_high.b",
    "proj_vo.w",
    "proj_vo.b",
    "head_hidden.w",
    "head_hidden.b",
    "head_out.w",
    "head_out.b",
)

_SENTENCE_KINDS = (
    FeatureKind.SENTENCE_BERT,
    FeatureKind.SENTENCE_SKIPTHOUGHT,
    FeatureKind.SENTENCE_ROBERTA,
)
_VO_KINDS = (FeatureKind.VO_GLOVE, FeatureKind.VO_BERT)

# Feature toggles per published ablation row: (sentence kind, VO kind,
# object features, captioning features).
TABLE_FEATURE_MATRIX: dict[str, tuple[FeatureKind, FeatureKind, bool, bool]] = {
    "baseline": (FeatureKind.SENTENCE_SKIPTHOUGHT, FeatureKind.VO_GLOVE, False, False),
    "model1": (FeatureKind.SENTENCE_BERT, FeatureKind.VO_GLOVE, False, False),
    "model2": (FeatureKind.SENTENCE_SKIPTHOUGHT, FeatureKind.VO_GLOVE, True, False),
    "model3": (FeatureKind.SENTENCE_BERT, FeatureKind.VO_GLOVE, True, False),
    "model4": (FeatureKind.SENTENCE_SKIPTHOUGHT, FeatureKind.VO_BERT, True, False),
    "model5": (FeatureKind.SENTENCE_BERT, FeatureKind.VO_BERT, True, False),
    "model6": (FeatureKind.SENTENCE_ROBERTA, FeatureKind.VO_GLOVE, True, False),
    "model7": (FeatureKind.SENTENCE_BERT, FeatureKind.VO_GLOVE, True, True),
}

# Published full-scale (R@1, R@5) per row, documentation-level only.
REFERENCE_RESULTS: dict[str, tuple[float, float]] = {
    "baseline_authors": (0.304, 0.648),
    "baseline_pytorch": (0.297, 0.641),
    "model1": (0.299, 0.647),
    "model2": (0.308, 0.646),
    "model3": (0.313, 0.659),
    "model4": (0.302, 0.642),
    "model5": (0.301, 0.647),
    "model6": (0.238, 0.574),
    "model7": (0.319, 0.651),
}


class MissingFeatureError(KeyError):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"missing feature key {self.key!r}"


class StaleTapeError(Exception):
    """backward() called without a matching recorded forward pass."""


@dataclass(frozen=True)
class ModelConfig:
    sentence_kind: FeatureKind = FeatureKind.SENTENCE_BERT
    vo_kind: FeatureKind = FeatureKind.VO_GLOVE
    use_object_features: bool = True
    use_captioning_features: bool = False
    common_dim: int = 256
    hidden_dim: int = 256
    fusion: HighLevelFusionConfig = field(default_factory=HighLevelFusionConfig)
    s_cap: float = 0.005
    dims: Mapping[str, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.sentence_kind not in _SENTENCE_KINDS:
            raise ValueError(f"sentence_kind must be a sentence kind, got {self.sentence_kind}")
        if self.vo_kind not in _VO_KINDS:
            raise ValueError(f"vo_kind must be a VO kind, got {self.vo_kind}")
        if self.common_dim < 1 or self.hidden_dim < 1:
            raise ValueError("common_dim and hidden_dim must be positive")
        if not (0.0 <= self.s_cap <= 1.0):
            raise ValueError(f"s_cap must lie in [0, 1], got {self.s_cap}")
        dims = dict(self.dims)
        for k, v in dims.items():
            if k not in FeatureKind._value2member_map_:
                raise ValueError(f"dims: unknown feature kind {k!r}")
            if int(v) < 1:
                raise ValueError(f"dims[{k!r}] must be positive")
        object.__setattr__(self, "dims", dims)

    def dim(self, kind: FeatureKind) -> int:
        return int(self.dims.get(kind.value, DEFAULT_DIMS[kind]))

    @property
    def low_input_dim(self) -> int:
        return self.dim(FeatureKind.C3D_FC6) + self.dim(FeatureKind.VIDEO_CAPTIONING)

    @property
    def high_input_dim(self) -> int:
        return self.dim(FeatureKind.OBJECT_SEGMENTATION) + self.dim(
            FeatureKind.VISUAL_ACTIVITY_CONCEPTS
        )

    def to_dict(self) -> dict:
        return {
            "sentence_kind": self.sentence_kind.value,
            "vo_kind": self.vo_kind.value,
            "use_object_features": self.use_object_features,
            "use_captioning_features": self.use_captioning_features,
            "common_dim": self.common_dim,
            "hidden_dim": self.hidden_dim,
            "fusion": {
                "s_obj": self.fusion.s_obj,
                "d_obj": self.fusion.d_obj,
                "d_vac": self.fusion.d_vac,
            },
            "s_cap": self.s_cap,
            "dims": dict(self.dims),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelConfig":
        obj = dict(obj)
        fusion = obj.pop("fusion", {})
        return cls(
            sentence_kind=FeatureKind(obj.pop("sentence_kind", "sentence_bert")),
            vo_kind=FeatureKind(obj.pop("vo_kind", "vo_glove")),
            fusion=HighLevelFusionConfig(**dict(fusion)),
            **obj,
        )


def preset_config(row: str, **overrides) -> ModelConfig:
    """ModelConfig matching one published feature-matrix row."""
    sentence_kind, vo_kind, use_obj, use_cap = TABLE_FEATURE_MATRIX[row]
    cfg = ModelConfig(
        sentence_kind=sentence_kind,
        vo_kind=vo_kind,
        use_object_features=use_obj,
        use_captioning_features=use_cap,
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class PredictionRecord:
    clip: ClipCandidate
    alignment_score: float
    actionness: float
    weighted_score: float
    refined: Interval

    def __post_init__(self):
        if not (0.0 <= self.actionness <= 1.0):
            raise ValueError(f"actionness must lie in [0, 1], got {self.actionness}")


def mpu_fuse(v, s) -> np.ndarray:
    """[v+s ; v*s ; v ; s] for two equal-length vectors (output dim 4d)."""
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if v.ndim != 1 or v.shape != s.shape:
        raise ValueError(f"dim mismatch: {v.shape} vs {s.shape}")
    return np.concatenate([v + s, v * s, v, s])


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded Glorot-uniform weights, zero biases."""
    d, h = cfg.common_dim, cfg.hidden_dim
    shapes = {
        "proj_low.w": (d, cfg.low_input_dim),
        "proj_low.b": (d,),
        "proj_sent.w": (d, cfg.dim(cfg.sentence_kind)),
        "proj_sent.b": (d,),
        "proj_high.w": (d, cfg.high_input_dim),
        "proj_high.b": (d,),
        "proj_vo.w": (d, cfg.dim(cfg.vo_kind)),
        "proj_vo.b": (d,),
        "head_hidden.w": (h, 8 * d),
        "head_hidden.b": (h,),
        "head_out.w": (3, h),
        "head_out.b": (3,),
    }
    rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    params: dict[str, np.ndarray] = {}
    for key in PARAM_KEYS:
        shape = shapes[key]
        if key.endswith(".b"):
            params[key] = np.zeros(shape, dtype=np.float64)
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[key] = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return params


@dataclass(frozen=True)
class BatchInputs:
    """Pre-assembled model inputs, one row per (clip, query) pair.

    ``obj_scaled`` is the max-pooled object vector already normalized and
    scaled by s_obj (zeros when the pathway is off); dropout happens inside
    the forward pass so it can respect mode and seed.
    """

    low: np.ndarray
    obj_scaled: np.ndarray
    vac: np.ndarray
    sent: np.ndarray
    vo: np.ndarray

    @property
    def n(self) -> int:
        return self.low.shape[0]


@dataclass
class ForwardTape:
    params_ref: dict
    x_low: np.ndarray
    x_high: np.ndarray
    x_sent: np.ndarray
    x_vo: np.ndarray
    a_low: np.ndarray
    a_sent: np.ndarray
    a_high: np.ndarray
    a_vo: np.ndarray
    z: np.ndarray
    a_hidden: np.ndarray


def _dropout_matrix(x: np.ndarray, ratio: float, mode: str, seed: int) -> np.ndarray:
    if mode == "eval" or ratio == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = rng.random(x.shape) >= ratio
    return x * mask / (1.0 - ratio)


def forward_batch(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    inputs: BatchInputs,
    mode: str = "eval",
    seed: int = 0,
) -> tuple[np.ndarray, ForwardTape]:
    """Batched forward pass; returns (n, 3) outputs and the tape backward needs.

    Output columns: alignment score (raw, unsquashed), start offset, end
    offset. Deterministic given (params, inputs, seed).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x_obj = _dropout_matrix(inputs.obj_scaled, cfg.fusion.d_obj, mode, derive_seed(seed, "obj"))
    x_vac = _dropout_matrix(inputs.vac, cfg.fusion.d_vac, mode, derive_seed(seed, "vac"))
    x_high = np.concatenate([x_obj, x_vac], axis=1)
    x_low, x_sent, x_vo = inputs.low, inputs.sent, inputs.vo

    a_low = np.tanh(x_low @ params["proj_low.w"].T + params["proj_low.b"])
    a_sent = np.tanh(x_sent @ params["proj_sent.w"].T + params["proj_sent.b"])
    a_high = np.tanh(x_high @ params["proj_high.w"].T + params["proj_high.b"])
    a_vo = np.tanh(x_vo @ params["proj_vo.w"].T + params["proj_vo.b"])

    z = np.concatenate(
        [
            a_low + a_sent,
            a_low * a_sent,
            a_low,
            a_sent,
            a_high + a_vo,
            a_high * a_vo,
            a_high,
            a_vo,
        ],
        axis=1,
    )
    a_hidden = np.tanh(z @ params["head_hidden.w"].T + params["head_hidden.b"])
    out = a_hidden @ params["head_out.w"].T + params["head_out.b"]
    tape = ForwardTape(
        params_ref=params if isinstance(params, dict) else dict(params),
        x_low=x_low,
        x_high=x_high,
        x_sent=x_sent,
        x_vo=x_vo,
        a_low=a_low,
        a_sent=a_sent,
        a_high=a_high,
        a_vo=a_vo,
        z=z,
        a_hidden=a_hidden,
    )
    return out, tape


def backward(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    tape: Optional[ForwardTape],
    out_grads: np.ndarray,
) -> dict[str, np.ndarray]:
    """Analytic parameter gradients for a recorded forward pass.

    ``out_grads`` is d(loss)/d(outputs), shape (n, 3). Raises StaleTapeError
    when no tape is given or it was recorded for different parameters or a
    different batch size.
    """
    if tape is None:
        raise StaleTapeError("no recorded forward pass")
    if tape.params_ref is not params:
        raise StaleTapeError("forward tape was recorded for different parameters")
    out_grads = np.asarray(out_grads, dtype=np.float64)
    if out_grads.shape != (tape.a_hidden.shape[0], 3):
        raise StaleTapeError(
            f"gradient shape {out_grads.shape} does not match recorded batch "
            f"({tape.a_hidden.shape[0]}, 3)"
        )
    d = cfg.common_dim
    grads: dict[str, np.ndarray] = {}

    grads["head_out.w"] = out_grads.T @ tape.a_hidden
    grads["head_out.b"] = out_grads.sum(axis=0)
    g_hidden = (out_grads @ params["head_out.w"]) * (1.0 - tape.a_hidden**2)
    grads["head_hidden.w"] = g_hidden.T @ tape.z
    grads["head_hidden.b"] = g_hidden.sum(axis=0)
    g_z = g_hidden @ params["head_hidden.w"]

    def mpu_back(g, a, b):
        g1, g2, g3, g4 = g[:, :d], g[:, d : 2 * d], g[:, 2 * d : 3 * d], g[:, 3 * d :]
        return g1 + g2 * b + g3, g1 + g2 * a + g4

    g_alow, g_asent = mpu_back(g_z[:, : 4 * d], tape.a_low, tape.a_sent)
    g_ahigh, g_avo = mpu_back(g_z[:, 4 * d :], tape.a_high, tape.a_vo)

    for name, g_act, act, x in (
        ("proj_low", g_alow, tape.a_low, tape.x_low),
        ("proj_sent", g_asent, tape.a_sent, tape.x_sent),
        ("proj_high", g_ahigh, tape.a_high, tape.x_high),
        ("proj_vo", g_avo, tape.a_vo, tape.x_vo),
    ):
        g_pre = g_act * (1.0 - act**2)
        grads[f"{name}.w"] = g_pre.T @ x
        grads[f"{name}.b"] = g_pre.sum(axis=0)
    return {key: grads[key] for key in PARAM_KEYS}


def clip_input_vectors(cfg: ModelConfig, clip_features: Mapping[str, np.ndarray]) -> dict:
    """Turn raw per-clip archive arrays into the model's input slots.

    Frame-sequence kinds arrive as (frames, dim) and are pooled here: object
    evidence by temporal max, captioning by temporal average. Disabled
    pathways become zero slots of the configured width.
    """

    def fetch(kind: FeatureKind, required: bool) -> Optional[np.ndarray]:
        arr = clip_features.get(kind.value)
        if arr is None:
            if required:
                raise MissingFeatureError(kind.value)
            return None
        return np.asarray(arr, dtype=np.float64)

    fc6 = fetch(FeatureKind.C3D_FC6, required=True)
    _check_dim(fc6, cfg.dim(FeatureKind.C3D_FC6), FeatureKind.C3D_FC6)

    d_cap = cfg.dim(FeatureKind.VIDEO_CAPTIONING)
    if cfg.use_captioning_features:
        cap = fetch(FeatureKind.VIDEO_CAPTIONING, required=True)
        if cap.ndim == 2:
            cap = temporal_avg_pool(cap)
        _check_dim(cap, d_cap, FeatureKind.VIDEO_CAPTIONING)
    else:
        cap = np.zeros(d_cap)

    d_obj = cfg.dim(FeatureKind.OBJECT_SEGMENTATION)
    if cfg.use_object_features:
        obj = fetch(FeatureKind.OBJECT_SEGMENTATION, required=True)
        if obj.ndim == 2:
            obj = temporal_max_pool(obj)
        _check_dim(obj, d_obj, FeatureKind.OBJECT_SEGMENTATION)
        obj_scaled = normalize_and_scale(obj, cfg.fusion.s_obj)
    else:
        obj_scaled = np.zeros(d_obj)

    vac = fetch(FeatureKind.VISUAL_ACTIVITY_CONCEPTS, required=True)
    _check_dim(vac, cfg.dim(FeatureKind.VISUAL_ACTIVITY_CONCEPTS), FeatureKind.VISUAL_ACTIVITY_CONCEPTS)

    act = clip_features.get(FeatureKind.ACTIONNESS.value)
    if act is None:
        actionness = 1.0
    else:
        actionness = float(np.asarray(act).reshape(-1)[0])
        if not (0.0 <= actionness <= 1.0):
            raise ValueError(f"actionness must lie in [0, 1], got {actionness}")

    return {
        "low": build_low_input(fc6, cap, cfg.s_cap),
        "obj_scaled": obj_scaled,
        "vac": vac,
        "actionness": actionness,
    }


def query_input_vectors(cfg: ModelConfig, query_features: Mapping[str, np.ndarray]) -> dict:
    sent = query_features.get(cfg.sentence_kind.value)
    if sent is None:
        raise MissingFeatureError(cfg.sentence_kind.value)
    sent = np.asarray(sent, dtype=np.float64)
    _check_dim(sent, cfg.dim(cfg.sentence_kind), cfg.sentence_kind)
    vo = query_features.get(cfg.vo_kind.value)
    if vo is None:
        raise MissingFeatureError(cfg.vo_kind.value)
    vo = np.asarray(vo, dtype=np.float64)
    _check_dim(vo, cfg.dim(cfg.vo_kind), cfg.vo_kind)
    return {"sent": sent, "vo": vo}


def _check_dim(arr: np.ndarray, expected: int, kind: FeatureKind):
    if arr.ndim != 1 or arr.shape[0] != expected:
        raise ValueError(
            f"{kind.value}: expected a vector of dim {expected}, got shape {arr.shape}"
        )


def batch_from_rows(clip_rows: Sequence[dict], query_rows: Sequence[dict]) -> BatchInputs:
    return BatchInputs(
        low=np.stack([c["low"] for c in clip_rows]),
        obj_scaled=np.stack([c["obj_scaled"] for c in clip_rows]),
        vac=np.stack([c["vac"] for c in clip_rows]),
        sent=np.stack([q["sent"] for q in query_rows]),
        vo=np.stack([q["vo"] for q in query_rows]),
    )


def forward(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    clip_features: Mapping[str, np.ndarray],
    query_features: Mapping[str, np.ndarray],
    mode: str = "eval",
    seed: int = 0,
) -> tuple[float, float, float]:
    """Single-pair forward: (alignment score, start offset, end offset)."""
    clip_row = clip_input_vectors(cfg, clip_features)
    query_row = query_input_vectors(cfg, query_features)
    out, _ = forward_batch(params, cfg, batch_from_rows([clip_row], [query_row]), mode, seed)
    return float(out[0, 0]), float(out[0, 1]), float(out[0, 2])


def score_clip_rows(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    clips: Sequence[ClipCandidate],
    clip_rows: Sequence[dict],
    query_row: dict,
    duration: float,
) -> list[PredictionRecord]:
    """Rank pre-assembled clip rows against one query.

    Sorted by actionness-weighted alignment score, descending; ties break
    toward the earlier clip start, then the smaller scale index.
    """
    if not clips:
        raise ValueError("candidates must be non-empty")
    out, _ = forward_batch(
        params, cfg, batch_from_rows(clip_rows, [query_row] * len(clip_rows)), "eval", 0
    )
    records = []
    for clip, row, vec in zip(clips, clip_rows, out):
        score, so, eo = float(vec[0]), float(vec[1]), float(vec[2])
        actionness = row["actionness"]
        records.append(
            PredictionRecord(
                clip=clip,
                alignment_score=score,
                actionness=actionness,
                weighted_score=score * actionness,
                refined=apply_offsets(clip, so, eo, duration),
            )
        )
    records.sort(key=lambda r: (-r.weighted_score, r.clip.bounds.start, r.clip.scale_index))
    return records


def score_candidates(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    candidates: Sequence[tuple[ClipCandidate, Mapping[str, np.ndarray]]],
    query_features: Mapping[str, np.ndarray],
    duration: float,
) -> list[PredictionRecord]:
    """Score every candidate clip (raw feature mappings) against one query."""
    if not candidates:
        raise ValueError("candidates must be non-empty")
    clip_rows = [clip_input_vectors(cfg, feats) for _, feats in candidates]
    query_row = query_input_vectors(cfg, query_features)
    return score_clip_rows(
        params, cfg, [c for c, _ in candidates], clip_rows, query_row, duration
    )


def save_checkpoint(
    params: Mapping[str, np.ndarray], cfg: ModelConfig, path, extra: Optional[dict] = None
) -> None:
    """Write parameters as an MMLF archive plus a JSON config sidecar."""
    records = [TensorRecord.from_array(key, params[key]) for key in PARAM_KEYS]
    write_archive(records, path)
    sidecar = {"model": cfg.to_dict(), "params": list(PARAM_KEYS)}
    if extra:
        sidecar.update(extra)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    by_key = {rec.key: rec for rec in read_archive(path)}
    with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    cfg = ModelConfig.from_dict(sidecar["model"])
    params = {}
    for key in PARAM_KEYS:
        if key not in by_key:
            raise MissingFeatureError(key)
        params[key] = by_key[key].as_array()
    return params, cfg, sidecar


def _sidecar_path(path) -> Path:
    return Path(path).with_suffix(Path(path).suffix + ".json")


def pack_params(params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in PARAM_KEYS])


def unpack_params(theta: np.ndarray, like: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    i = 0
    for key in PARAM_KEYS:
        shape = like[key].shape
        n = int(np.prod(shape)) if shape else 1
        out[key] = theta[i : i + n].reshape(shape).copy()
        i += n
    if i != theta.size:
        raise ValueError(f"theta has {theta.size} entries, expected {i}")
    return out
