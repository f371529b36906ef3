"""Sliding-window clip proposals and offset-based interval refinement.

Pure functions; safe to call in parallel per video.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .data import Interval, VideoMeta

# Multi-scale windows of 128 and 256 frames at 30 fps, the usual convention
# for this proposal style; both are dataset-tunable.
DEFAULT_WINDOW_LENGTHS = (128 / 30.0, 256 / 30.0)
DEFAULT_OVERLAP_RATIO = 0.8

_MIN_STRIDE = 1e-9
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class ProposalConfig:
    window_lengths: tuple[float, ...] = DEFAULT_WINDOW_LENGTHS
    overlap_ratio: float = DEFAULT_OVERLAP_RATIO

    def __post_init__(self):
        object.__setattr__(self, "window_lengths", tuple(float(w) for w in self.window_lengths))
        if not self.window_lengths:
            raise ValueError("window_lengths must be non-empty")
        if any(not math.isfinite(w) or w <= 0 for w in self.window_lengths):
            raise ValueError(f"window_lengths must be positive, got {self.window_lengths}")
        if not (0.0 <= self.overlap_ratio < 1.0):
            raise ValueError(f"overlap_ratio must lie in [0, 1), got {self.overlap_ratio}")


@dataclass(frozen=True)
class ClipCandidate:
    video_id: str
    bounds: Interval
    scale_index: int


def generate_proposals(meta: VideoMeta, cfg: ProposalConfig) -> list[ClipCandidate]:
    """Overlapping windows at every scale, ordered by scale then start.

    For window length L and stride s = (1 - overlap) * L the starts are
    0, s, 2s, ...; the final clip is clamped to the video end when the
    duration is not on the stride grid.
    """
    duration = meta.duration
    clips: list[ClipCandidate] = []
    for scale_index, length in enumerate(cfg.window_lengths):
        stride = (1.0 - cfg.overlap_ratio) * length
        if stride < _MIN_STRIDE:
            raise ValueError(
                f"stride underflow: overlap {cfg.overlap_ratio} at window {length} "
                f"gives stride {stride}"
            )
        i = 0
        last_end = None
        while True:
            start = i * stride
            if start + length <= duration + _GRID_EPS:
                end = min(start + length, duration)
                clips.append(
                    ClipCandidate(meta.video_id, Interval(start, end), scale_index)
                )
                last_end = end
                i += 1
            else:
                break
        if last_end is None or last_end < duration - _GRID_EPS:
            # one clamped clip at the next grid start, reaching the video end
            start = i * stride
            if start < duration:
                clips.append(
                    ClipCandidate(meta.video_id, Interval(start, duration), scale_index)
                )
    return clips


def apply_offsets(
    clip: ClipCandidate, start_offset: float, end_offset: float, duration: float
) -> Interval:
    """Refine clip bounds by predicted offsets, clamped into [0, duration].

    Degenerate refinements (end <= start) fall back to the unrefined clip
    bounds so evaluation never crashes on an untrained model.
    """
    if not (math.isfinite(start_offset) and math.isfinite(end_offset)):
        raise ValueError(f"non-finite offsets ({start_offset}, {end_offset})")
    start = min(max(clip.bounds.start + start_offset, 0.0), duration)
    end = min(max(clip.bounds.end + end_offset, 0.0), duration)
    if end <= start:
        return clip.bounds
    return Interval(start, end)
