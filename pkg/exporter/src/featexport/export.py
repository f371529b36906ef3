"""Export job orchestration: run extractor backends over videos and query
texts, then emit an MMLF archive plus a manifest fragment.

Per-item failures (one video, one text) are skipped and listed in an
errors sidecar; only misconfiguration (an unknown backend, a missing
dependency for a hub adapter) aborts the job. Videos are independent and
could be processed in parallel; archive assembly stays single-writer.

The per-clip frame recipe mirrors the consumer's contract: clips are
overlapping windows (stride = (1 - overlap) * length, final clip clamped
to the video end), and within a clip every ``stride``-th frame is sampled
starting at the clip's first frame. Object-segmentation records store
per-sampled-frame class-mean vectors (temporal pooling is deliberately the
consumer's job); captioning records store per-sampled-frame features;
FC6-style and activity-concept records store one clip-level vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .extractors import (
    build_projection_backend,
    build_segmentation_backend,
    build_text_backend,
)
from .mmlf import write_mmlf

DEFAULT_FRAME_STRIDE = 16

SEQUENCE_KINDS = ("object_segmentation", "video_captioning")
CLIP_VECTOR_KINDS = ("c3d_fc6", "visual_activity_concepts")
TEXT_KINDS = ("sentence_bert", "sentence_skipthought", "sentence_roberta")
VO_KINDS = ("vo_glove", "vo_bert")


@dataclass(frozen=True)
class VideoItem:
    video_id: str
    frames_path: str
    frame_rate: float


@dataclass(frozen=True)
class TextItem:
    query_id: str
    text: str
    verb: str = ""
    object: str = ""


@dataclass(frozen=True)
class ExportJob:
    archive_path: str
    fragment_path: str
    errors_path: str
    videos: tuple[VideoItem, ...] = ()
    texts: tuple[TextItem, ...] = ()
    extractors: Mapping[str, dict] = field(default_factory=dict)
    window_lengths: tuple[float, ...] = (128 / 30.0, 256 / 30.0)
    overlap_ratio: float = 0.8
    frame_stride: int = DEFAULT_FRAME_STRIDE
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ExportJob":
        obj = dict(obj)
        proposal = obj.pop("proposal", {})
        return cls(
            archive_path=obj["archive"],
            fragment_path=obj["fragment"],
            errors_path=obj.get("errors", str(Path(obj["archive"]).with_suffix(".errors.jsonl"))),
            videos=tuple(VideoItem(**v) for v in obj.get("videos", [])),
            texts=tuple(TextItem(**t) for t in obj.get("texts", [])),
            extractors=dict(obj.get("extractors", {})),
            window_lengths=tuple(proposal.get("window_lengths", (128 / 30.0, 256 / 30.0))),
            overlap_ratio=float(proposal.get("overlap_ratio", 0.8)),
            frame_stride=int(obj.get("frame_stride", DEFAULT_FRAME_STRIDE)),
            seed=int(obj.get("seed", 0)),
        )


def load_frames(path) -> np.ndarray:
    """Frames as (n, H, W, 3). Supports .npz tensor dumps (array 'frames')
    and, when OpenCV is available, common video containers."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            if "frames" not in data:
                raise ValueError(f"{path}: npz dump must contain a 'frames' array")
            frames = np.asarray(data["frames"])
    elif path.suffix in (".mp4", ".avi", ".mkv", ".mov"):
        try:
            import cv2
        except ImportError as exc:
            raise RuntimeError("OpenCV is required to decode video files") from exc
        cap = cv2.VideoCapture(str(path))
        collected = []
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            collected.append(frame[:, :, ::-1])
        cap.release()
        if not collected:
            raise ValueError(f"{path}: no decodable frames")
        frames = np.stack(collected)
    else:
        raise ValueError(f"{path}: unsupported input (use .npz or a video file)")
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"{path}: frames must be (n, H, W, 3), got {frames.shape}")
    return frames


def clip_windows(duration: float, window_lengths: Sequence[float], overlap: float):
    """Overlapping (start, end) windows per scale; the final clip is clamped
    to the video end. Matches the consumer's proposal grid."""
    clips = []
    for length in window_lengths:
        stride = (1.0 - overlap) * length
        if stride < 1e-9:
            raise ValueError(f"stride underflow at window {length}")
        i = 0
        last_end = None
        while i * stride + length <= duration + 1e-9:
            clips.append((i * stride, min(i * stride + length, duration)))
            last_end = clips[-1][1]
            i += 1
        if (last_end is None or last_end < duration - 1e-9) and i * stride < duration:
            clips.append((i * stride, duration))
    return clips


def sampled_frame_indices(n_frames: int, stride: int) -> list[int]:
    if n_frames < 1:
        raise ValueError("clip with no frames")
    return list(range(0, n_frames, stride))


@dataclass
class ExportResult:
    archive_path: Path
    fragment_path: Path
    errors_path: Path
    n_records: int
    n_skipped: int


def export(job: ExportJob) -> ExportResult:
    backends = {}
    for kind, spec in job.extractors.items():
        if kind in TEXT_KINDS or kind in VO_KINDS:
            backends[kind] = build_text_backend(spec, job.seed)
        elif kind == "object_segmentation":
            backends[kind] = build_segmentation_backend(spec, job.seed)
        elif kind in ("video_captioning",) + CLIP_VECTOR_KINDS:
            backends[kind] = build_projection_backend(spec, job.seed, label=kind)
        else:
            raise ValueError(f"unknown feature kind {kind!r}")

    records: list[tuple[str, np.ndarray]] = []
    fragment_lines: list[dict] = []
    errors: list[dict] = []

    for video in job.videos:
        try:
            frames = load_frames(video.frames_path)
            duration = frames.shape[0] / video.frame_rate
            clips = clip_windows(duration, job.window_lengths, job.overlap_ratio)
            refs: dict[str, list[str]] = {
                kind: [] for kind in job.extractors if kind not in TEXT_KINDS + VO_KINDS
            }
            video_records: list[tuple[str, np.ndarray]] = []
            for ci, (start, end) in enumerate(clips):
                f0 = int(round(start * video.frame_rate))
                f1 = max(f0 + 1, int(round(end * video.frame_rate)))
                clip_frames = frames[f0 : min(f1, frames.shape[0])]
                sampled = clip_frames[sampled_frame_indices(clip_frames.shape[0], job.frame_stride)]
                base = f"{video.video_id}/clip{ci:03d}"
                for kind in refs:
                    backend = backends[kind]
                    if kind == "object_segmentation":
                        payload = backend.frame_class_means(sampled)
                    elif kind == "video_captioning":
                        payload = backend.frame_features(sampled)
                    else:
                        payload = backend.clip_feature(sampled)
                    key = f"{base}/{kind}"
                    refs[kind].append(key)
                    video_records.append((key, payload))
            records.extend(video_records)
            fragment_lines.append(
                {
                    "type": "video",
                    "video_id": video.video_id,
                    "duration": duration,
                    "frame_rate": video.frame_rate,
                    "clip_feature_refs": refs,
                }
            )
        except Exception as exc:
            errors.append({"item": f"video:{video.video_id}", "error": str(exc)})

    for item in job.texts:
        try:
            embedding_refs: dict[str, str] = {}
            for kind in job.extractors:
                if kind in TEXT_KINDS:
                    key = f"emb/{item.query_id}/{kind}"
                    records.append((key, backends[kind].embed([item.text])[0]))
                    embedding_refs[kind] = key
                elif kind in VO_KINDS:
                    key = f"emb/{item.query_id}/{kind}"
                    records.append(
                        (key, backends[kind].embed([f"{item.verb} {item.object}"])[0])
                    )
                    embedding_refs[kind] = key
            fragment_lines.append(
                {
                    "type": "query_fragment",
                    "query_id": item.query_id,
                    "embedding_refs": embedding_refs,
                }
            )
        except Exception as exc:
            errors.append({"item": f"text:{item.query_id}", "error": str(exc)})

    archive_path = Path(job.archive_path)
    archive_path.parent.mkdir(parents=True, exist_ok=True)
    write_mmlf(records, archive_path)

    fragment_path = Path(job.fragment_path)
    fragment_path.parent.mkdir(parents=True, exist_ok=True)
    with open(fragment_path, "w", encoding="utf-8") as fh:
        for line in fragment_lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")

    meta = {
        "frame_stride": job.frame_stride,
        "proposal": {
            "window_lengths": list(job.window_lengths),
            "overlap_ratio": job.overlap_ratio,
        },
        "extractors": {kind: backends[kind].provenance for kind in sorted(backends)},
    }
    with open(fragment_path.with_suffix(".meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    errors_path = Path(job.errors_path)
    errors_path.parent.mkdir(parents=True, exist_ok=True)
    with open(errors_path, "w", encoding="utf-8") as fh:
        for err in errors:
            fh.write(json.dumps(err, sort_keys=True) + "\n")

    return ExportResult(
        archive_path=archive_path,
        fragment_path=fragment_path,
        errors_path=errors_path,
        n_records=len(records),
        n_skipped=len(errors),
    )
