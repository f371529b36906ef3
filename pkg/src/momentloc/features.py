"""Clip-level feature aggregation: per-frame class means, temporal pooling,
L2-normalize-and-scale, and inverted dropout.

Everything here is a pure float64 function of its inputs (plus an explicit
seed where randomness is involved), so clips can be processed in parallel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import derive_seed

FRAME_SAMPLING_STRIDE = 16


@dataclass(frozen=True)
class FrameClassMap:
    """Per-pixel class distributions for one frame, shape (H, W, C)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[0] < 1 or probs.shape[1] < 1:
            raise ValueError(f"probs must be (H, W, C), got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("pixel distributions must be finite and non-negative")
        sums = probs.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("pixel distributions must sum to 1 (±1e-6)")
        object.__setattr__(self, "probs", probs)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]


@dataclass(frozen=True)
class HighLevelFusionConfig:
    """Scale and dropout ratios for the high-level (object + activity) input."""

    s_obj: float = 0.005
    d_obj: float = 0.5
    d_vac: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.s_obj <= 1.0):
            raise ValueError(f"s_obj must lie in [0, 1], got {self.s_obj}")
        for name, ratio in (("d_obj", self.d_obj), ("d_vac", self.d_vac)):
            if not (0.0 <= ratio < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {ratio}")


def sample_frame_indices(frame_count: int) -> list[int]:
    """Indices of every 16th frame, starting at 0; always at least one."""
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    return list(range(0, frame_count, FRAME_SAMPLING_STRIDE))


def frame_class_means(frame: FrameClassMap) -> np.ndarray:
    """Mean class distribution over all pixels of one frame."""
    return frame.probs.mean(axis=(0, 1))


def temporal_max_pool(frames) -> np.ndarray:
    stacked = _stack_frames(frames)
    return stacked.max(axis=0)


def temporal_avg_pool(frames) -> np.ndarray:
    stacked = _stack_frames(frames)
    return stacked.mean(axis=0)


def _stack_frames(frames) -> np.ndarray:
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) == 0:
        raise ValueError("cannot pool an empty frame list")
    dims = {f.shape for f in frames}
    if len(dims) > 1:
        raise ValueError(f"ragged frame dims: {sorted(dims)}")
    return np.stack(frames, axis=0)


def normalize_and_scale(v, scale: float) -> np.ndarray:
    """(v / ||v||_2) * scale; the zero vector maps to zero (no NaNs)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite feature vector")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    return (v / norm) * scale


def apply_dropout(v, ratio: float, mode: str, rng_seed: int) -> np.ndarray:
    """Inverted dropout: identity in eval mode; in train mode each entry is
    zeroed with probability ``ratio`` and survivors scaled by 1/(1-ratio)."""
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    v = np.asarray(v, dtype=np.float64)
    if mode == "eval" or ratio == 0.0:
        return v.copy()
    rng = np.random.default_rng(rng_seed)
    mask = rng.random(v.shape) >= ratio
    return v * mask / (1.0 - ratio)


def build_mlp_high_input(
    v_obj, v_vac, cfg: HighLevelFusionConfig, mode: str, rng_seed: int
) -> np.ndarray:
    """High-level visual input: scaled+dropped object vector concatenated
    with the (dropped) visual activity concept vector."""
    obj = apply_dropout(
        normalize_and_scale(v_obj, cfg.s_obj), cfg.d_obj, mode, derive_seed(rng_seed, "obj")
    )
    vac = apply_dropout(
        np.asarray(v_vac, dtype=np.float64), cfg.d_vac, mode, derive_seed(rng_seed, "vac")
    )
    return np.concatenate([obj, vac])


def build_low_input(fc6, captioning, s_cap: float) -> np.ndarray:
    """Low-level visual input: FC6 vector concatenated with the normalized,
    scaled captioning vector."""
    fc6 = np.asarray(fc6, dtype=np.float64)
    captioning = np.asarray(captioning, dtype=np.float64)
    if fc6.ndim != 1 or captioning.ndim != 1:
        raise ValueError(
            f"expected 1-d vectors, got shapes {fc6.shape} and {captioning.shape}"
        )
    return np.concatenate([fc6, normalize_and_scale(captioning, s_cap)])
