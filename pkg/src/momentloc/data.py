"""Domain types and the line-delimited dataset manifest.

A manifest is UTF-8 text, one self-describing JSON record per line:

    {"type": "video", "video_id": ..., "duration": ..., "frame_rate": ...,
     "clip_feature_refs": {kind: [key, ...]}}
    {"type": "query", "video_id": ..., "query_id": ..., "text": ...,
     "vo_pair": {"verb": ..., "object": ...}, "gt": {"start": ..., "end": ...},
     "embedding_refs": {kind: key}}

All types are immutable after construction and safe to share across
concurrent readers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional


class ManifestError(Exception):
    """Malformed or inconsistent manifest content."""


class FeatureKind(str, Enum):
    SENTENCE_BERT = "sentence_bert"
    SENTENCE_SKIPTHOUGHT = "sentence_skipthought"
    SENTENCE_ROBERTA = "sentence_roberta"
    VO_GLOVE = "vo_glove"
    VO_BERT = "vo_bert"
    C3D_FC6 = "c3d_fc6"
    VISUAL_ACTIVITY_CONCEPTS = "visual_activity_concepts"
    OBJECT_SEGMENTATION = "object_segmentation"
    VIDEO_CAPTIONING = "video_captioning"
    ACTIONNESS = "actionness"


# Default dimensionality per feature kind. BERT/skip-thought/GloVe/the
# segmentation classes/the captioning width are fixed by the extractors;
# C3D FC6 (4096) and the Kinetics-400 class count (400) are the usual
# checkpoint conventions and may be overridden per dataset.
DEFAULT_DIMS: dict[FeatureKind, int] = {
    FeatureKind.SENTENCE_BERT: 768,
    FeatureKind.SENTENCE_SKIPTHOUGHT: 4800,
    FeatureKind.SENTENCE_ROBERTA: 768,
    FeatureKind.VO_GLOVE: 300,
    FeatureKind.VO_BERT: 768,
    FeatureKind.C3D_FC6: 4096,
    FeatureKind.VISUAL_ACTIVITY_CONCEPTS: 400,
    FeatureKind.OBJECT_SEGMENTATION: 150,
    FeatureKind.VIDEO_CAPTIONING: 2048,
    FeatureKind.ACTIONNESS: 1,
}

# Kinds stored per clip as a (frames, dim) sequence; the rest are single
# vectors (per clip or per query) or the per-clip actionness scalar.
FRAME_SEQUENCE_KINDS = frozenset(
    {FeatureKind.OBJECT_SEGMENTATION, FeatureKind.VIDEO_CAPTIONING}
)
VISUAL_KINDS = frozenset(
    {
        FeatureKind.C3D_FC6,
        FeatureKind.VISUAL_ACTIVITY_CONCEPTS,
        FeatureKind.OBJECT_SEGMENTATION,
        FeatureKind.VIDEO_CAPTIONING,
        FeatureKind.ACTIONNESS,
    }
)


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: FeatureKind
    dim: int

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"{self.kind.value}: dim must be positive, got {self.dim}")

    @classmethod
    def for_kind(cls, kind: FeatureKind, dim: Optional[int] = None) -> "EmbeddingSpec":
        """Spec with the kind's default dim unless explicitly overridden."""
        return cls(kind=kind, dim=DEFAULT_DIMS[kind] if dim is None else dim)


@dataclass(frozen=True, order=True)
class Interval:
    """A [start, end] time span in seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"invalid interval: non-finite bounds ({self.start}, {self.end})")
        if self.start < 0:
            raise ValueError(f"invalid interval: negative start {self.start}")
        if self.end < self.start:
            raise ValueError(f"invalid interval: end {self.end} < start {self.start}")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration: float
    frame_rate: float
    # kind value -> per-clip archive keys, index-aligned with the canonical
    # proposal ordering for this video.
    clip_feature_refs: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ValueError(f"video {self.video_id!r}: duration must be > 0")
        if not (math.isfinite(self.frame_rate) and self.frame_rate > 0):
            raise ValueError(f"video {self.video_id!r}: frame_rate must be > 0")
        refs = {k: tuple(v) for k, v in dict(self.clip_feature_refs).items()}
        for kind in refs:
            if kind not in FeatureKind._value2member_map_:
                raise ValueError(f"video {self.video_id!r}: unknown feature kind {kind!r}")
        lengths = {len(v) for v in refs.values()}
        if len(lengths) > 1:
            raise ValueError(
                f"video {self.video_id!r}: clip_feature_refs lists differ in length {sorted(lengths)}"
            )
        object.__setattr__(self, "clip_feature_refs", refs)

    @property
    def clip_count(self) -> int:
        for v in self.clip_feature_refs.values():
            return len(v)
        return 0


@dataclass(frozen=True)
class QueryRecord:
    video_id: str
    query_id: str
    text: str
    vo_pair: tuple[str, str]
    gt: Interval
    embedding_refs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "vo_pair", tuple(self.vo_pair))
        if len(self.vo_pair) != 2:
            raise ValueError(f"query {self.query_id!r}: vo_pair must be (verb, object)")
        refs = dict(self.embedding_refs)
        for kind in refs:
            if kind not in FeatureKind._value2member_map_:
                raise ValueError(f"query {self.query_id!r}: unknown feature kind {kind!r}")
        object.__setattr__(self, "embedding_refs", refs)


_VIDEO_FIELDS = {"type", "video_id", "duration", "frame_rate", "clip_feature_refs"}
_QUERY_FIELDS = {"type", "video_id", "query_id", "text", "vo_pair", "gt", "embedding_refs"}


def _check_fields(obj: dict, allowed: set, required: set, lineno: int):
    unknown = set(obj) - allowed
    if unknown:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ManifestError(f"line {lineno}: missing fields {sorted(missing)}")


def parse_manifest(
    path, archive_keys: Optional[set[str]] = None
) -> tuple[list[VideoMeta], list[QueryRecord]]:
    """Parse a manifest file; order of the output lists matches the file.

    When ``archive_keys`` is given, every clip feature ref and query
    embedding ref must resolve against it.
    """
    videos: list[VideoMeta] = []
    queries: list[QueryRecord] = []
    by_video: dict[str, VideoMeta] = {}
    query_ids: set[str] = set()

    with open(Path(path), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "type" not in obj:
                raise ManifestError(f"line {lineno}: record must be an object with a 'type'")
            kind = obj["type"]
            try:
                if kind == "video":
                    _check_fields(obj, _VIDEO_FIELDS, _VIDEO_FIELDS, lineno)
                    meta = VideoMeta(
                        video_id=str(obj["video_id"]),
                        duration=float(obj["duration"]),
                        frame_rate=float(obj["frame_rate"]),
                        clip_feature_refs={
                            k: tuple(str(x) for x in v)
                            for k, v in dict(obj["clip_feature_refs"]).items()
                        },
                    )
                    if meta.video_id in by_video:
                        raise ManifestError(f"line {lineno}: duplicate video_id {meta.video_id!r}")
                    by_video[meta.video_id] = meta
                    videos.append(meta)
                elif kind == "query":
                    _check_fields(obj, _QUERY_FIELDS, _QUERY_FIELDS, lineno)
                    gt_obj = obj["gt"]
                    vo = obj["vo_pair"]
                    rec = QueryRecord(
                        video_id=str(obj["video_id"]),
                        query_id=str(obj["query_id"]),
                        text=str(obj["text"]),
                        vo_pair=(str(vo["verb"]), str(vo["object"])),
                        gt=Interval(float(gt_obj["start"]), float(gt_obj["end"])),
                        embedding_refs={str(k): str(v) for k, v in dict(obj["embedding_refs"]).items()},
                    )
                    if rec.query_id in query_ids:
                        raise ManifestError(f"line {lineno}: duplicate query_id {rec.query_id!r}")
                    query_ids.add(rec.query_id)
                    queries.append(rec)
                else:
                    raise ManifestError(f"line {lineno}: unknown record type {kind!r}")
            except ManifestError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc

    for rec in queries:
        meta = by_video.get(rec.video_id)
        if meta is None:
            raise ManifestError(f"query {rec.query_id!r}: unknown video_id {rec.video_id!r}")
        if rec.gt.end > meta.duration:
            raise ManifestError(
                f"query {rec.query_id!r}: gt [{rec.gt.start}, {rec.gt.end}] exceeds "
                f"video duration {meta.duration}"
            )

    if archive_keys is not None:
        for meta in videos:
            for kind, keys in meta.clip_feature_refs.items():
                for key in keys:
                    if key not in archive_keys:
                        raise ManifestError(
                            f"video {meta.video_id!r}: dangling archive key {key!r} ({kind})"
                        )
        for rec in queries:
            for kind, key in rec.embedding_refs.items():
                if key not in archive_keys:
                    raise ManifestError(
                        f"query {rec.query_id!r}: dangling archive key {key!r} ({kind})"
                    )

    return videos, queries


def write_manifest(videos: Iterable[VideoMeta], queries: Iterable[QueryRecord], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for m in videos:
            fh.write(
                json.dumps(
                    {
                        "type": "video",
                        "video_id": m.video_id,
                        "duration": m.duration,
                        "frame_rate": m.frame_rate,
                        "clip_feature_refs": {k: list(v) for k, v in m.clip_feature_refs.items()},
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for q in queries:
            fh.write(
                json.dumps(
                    {
                        "type": "query",
                        "video_id": q.video_id,
                        "query_id": q.query_id,
                        "text": q.text,
                        "vo_pair": {"verb": q.vo_pair[0], "object": q.vo_pair[1]},
                        "gt": {"start": q.gt.start, "end": q.gt.end},
                        "embedding_refs": dict(q.embedding_refs),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
