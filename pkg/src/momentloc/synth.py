"""Deterministic synthetic datasets with recoverable localization signal.

For every query a ground-truth interval is drawn; sampled frames inside it
carry activation ``signal_strength`` above a sigma-Gaussian noise floor on
the class channel assigned to the query's object (object segmentation
kind) and on the action channels assigned to its verb (activity-concept /
FC6 / captioning kinds). Sentence and VO embeddings are fixed seeded
random codes per (verb, object), composed from per-word halves so held-out
pairs stay decodable.

Vocabulary words are named ``verb<k>``/``object<k>``; the trailing index IS
the channel assignment (objects on segmentation channels, the last channel
reserved as background; verbs on action channels). The decoding oracle
below relies only on that convention plus the manifest and archive, so it
stays independent of the model pipeline it is used to bound.

Generation is single-threaded on purpose: determinism first.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .archive import TensorRecord, write_archive
from .data import FeatureKind, Interval, QueryRecord, VideoMeta, write_manifest
from .evaluation import EvalSpec, recall_at_n
from .features import sample_frame_indices
from .proposals import ClipCandidate, ProposalConfig, generate_proposals
from .util import derive_seed

SYNTH_DIMS = {
    "sentence_bert": 48,
    "vo_glove": 32,
    "c3d_fc6": 64,
    "visual_activity_concepts": 64,
    "video_captioning": 64,
    "object_segmentation": 150,
}

DEFAULT_CHANNEL_KINDS = (
    FeatureKind.OBJECT_SEGMENTATION.value,
    FeatureKind.C3D_FC6.value,
    FeatureKind.VISUAL_ACTIVITY_CONCEPTS.value,
    FeatureKind.VIDEO_CAPTIONING.value,
)


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 50
    n_queries: int = 200
    duration_range: tuple[float, float] = (28.0, 45.0)
    n_verbs: int = 12
    n_objects: int = 20
    signal_strength: float = 1.0
    noise_sigma: float = 0.1
    channels: tuple[str, ...] = DEFAULT_CHANNEL_KINDS
    dims: Mapping[str, int] = field(default_factory=lambda: dict(SYNTH_DIMS))
    sentence_kind: str = FeatureKind.SENTENCE_BERT.value
    vo_kind: str = FeatureKind.VO_GLOVE.value
    proposal: ProposalConfig = field(default_factory=lambda: ProposalConfig((6.0,), 0.8))
    gt_length_rel_range: tuple[float, float] = (1.0, 1.4)
    frame_rate: float = 30.0
    raw_map_clips: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_videos < 1 or self.n_queries < 1:
            raise ValueError("need at least one video and one query")
        if self.signal_strength <= 0:
            raise ValueError("signal_strength must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        dims = dict(self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "channels", tuple(self.channels))
        for kind in self.channels:
            if kind not in FeatureKind._value2member_map_:
                raise ValueError(f"unknown channel kind {kind!r}")
        d_obj = dims[FeatureKind.OBJECT_SEGMENTATION.value]
        if self.n_objects > d_obj - 1:
            raise ValueError(
                f"object vocabulary ({self.n_objects}) exceeds segmentation channel "
                f"capacity ({d_obj - 1}, one channel reserved for background)"
            )
        for kind in (
            FeatureKind.C3D_FC6.value,
            FeatureKind.VISUAL_ACTIVITY_CONCEPTS.value,
            FeatureKind.VIDEO_CAPTIONING.value,
        ):
            if self.n_verbs > dims[kind]:
                raise ValueError(
                    f"verb vocabulary ({self.n_verbs}) exceeds {kind} capacity ({dims[kind]})"
                )
        per_video = -(-self.n_queries // self.n_videos)
        if per_video > min(self.n_verbs, self.n_objects):
            raise ValueError(
                f"{per_video} queries per video need distinct channels but the "
                f"vocabulary has only {self.n_verbs} verbs / {self.n_objects} objects"
            )

    def to_dict(self) -> dict:
        return {
            "n_videos": self.n_videos,
            "n_queries": self.n_queries,
            "duration_range": list(self.duration_range),
            "n_verbs": self.n_verbs,
            "n_objects": self.n_objects,
            "signal_strength": self.signal_strength,
            "noise_sigma": self.noise_sigma,
            "channels": list(self.channels),
            "dims": dict(self.dims),
            "sentence_kind": self.sentence_kind,
            "vo_kind": self.vo_kind,
            "proposal": {
                "window_lengths": list(self.proposal.window_lengths),
                "overlap_ratio": self.proposal.overlap_ratio,
            },
            "gt_length_rel_range": list(self.gt_length_rel_range),
            "frame_rate": self.frame_rate,
            "raw_map_clips": self.raw_map_clips,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SynthConfig":
        obj = dict(obj)
        if "proposal" in obj:
            p = obj.pop("proposal")
            obj["proposal"] = ProposalConfig(
                tuple(p["window_lengths"]), p["overlap_ratio"]
            )
        for key in ("duration_range", "gt_length_rel_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "channels" in obj:
            obj["channels"] = tuple(obj["channels"])
        return cls(**obj)


@dataclass
class SynthDataset:
    cfg: SynthConfig
    videos: list[VideoMeta]
    queries: list[QueryRecord]
    records: list[TensorRecord]
    candidates: dict[str, list[ClipCandidate]]


def _word_index(word: str) -> int:
    m = re.search(r"(\d+)$", word)
    if m is None:
        raise ValueError(f"synthetic vocabulary word {word!r} carries no channel index")
    return int(m.group(1))


def object_channel(word: str) -> int:
    return _word_index(word)


def verb_channel(word: str) -> int:
    return _word_index(word)


def _clip_frame_times(bounds: Interval, frame_rate: float) -> np.ndarray:
    n_frames = max(1, int(round(bounds.length * frame_rate)))
    idx = sample_frame_indices(n_frames)
    return bounds.start + np.asarray(idx, dtype=np.float64) / frame_rate


def _word_code(seed: int, label: str, word: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, label, word))
    return rng.normal(size=dim) / np.sqrt(dim)


def pair_code(seed: int, label: str, verb: str, obj: str, dim: int) -> np.ndarray:
    left = _word_code(seed, label + "/verb", verb, (dim + 1) // 2)
    right = _word_code(seed, label + "/object", obj, dim // 2)
    return np.concatenate([left, right])


def generate(cfg: SynthConfig) -> SynthDataset:
    verbs = [f"verb{i:02d}" for i in range(cfg.n_verbs)]
    objects = [f"object{i:02d}" for i in range(cfg.n_objects)]
    d = cfg.dims

    # Durations snap to the first scale's stride grid so the final clip is
    # full-length; short clamped tails otherwise dominate noisy mean pooling.
    base_window = cfg.proposal.window_lengths[0]
    stride = (1.0 - cfg.proposal.overlap_ratio) * base_window
    videos: list[VideoMeta] = []
    durations: dict[str, float] = {}
    for vi in range(cfg.n_videos):
        rng = np.random.default_rng(derive_seed(cfg.seed, "video", vi))
        vid = f"v{vi:03d}"
        raw = float(rng.uniform(*cfg.duration_range))
        snapped = base_window + max(0.0, round((raw - base_window) / stride)) * stride
        durations[vid] = snapped
        videos.append(VideoMeta(vid, durations[vid], cfg.frame_rate, {}))

    # Queries on one video get distinct verbs and objects, keeping the
    # planted channels unambiguous within that video.
    min_window = min(cfg.proposal.window_lengths)
    queries: list[QueryRecord] = []
    per_video_queries: dict[str, list[QueryRecord]] = {v.video_id: [] for v in videos}
    video_words: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for v in videos:
        rng = np.random.default_rng(derive_seed(cfg.seed, "video_words", v.video_id))
        video_words[v.video_id] = (
            rng.permutation(cfg.n_verbs),
            rng.permutation(cfg.n_objects),
        )
    for qi in range(cfg.n_queries):
        rng = np.random.default_rng(derive_seed(cfg.seed, "query", qi))
        vid = videos[qi % cfg.n_videos].video_id
        slot = len(per_video_queries[vid])
        verb_perm, obj_perm = video_words[vid]
        verb = verbs[int(verb_perm[slot % cfg.n_verbs])]
        obj = objects[int(obj_perm[slot % cfg.n_objects])]
        length = float(
            rng.uniform(cfg.gt_length_rel_range[0], cfg.gt_length_rel_range[1]) * min_window
        )
        length = min(length, durations[vid] * 0.9)
        start = float(rng.uniform(0.0, durations[vid] - length))
        qid = f"q{qi:04d}"
        rec = QueryRecord(
            video_id=vid,
            query_id=qid,
            text=f"person {verb} the {obj}",
            vo_pair=(verb, obj),
            gt=Interval(start, start + length),
            embedding_refs={
                cfg.sentence_kind: f"emb/sent/{verb}_{obj}",
                cfg.vo_kind: f"emb/vo/{verb}_{obj}",
            },
        )
        queries.append(rec)
        per_video_queries[vid].append(rec)

    records: list[TensorRecord] = []
    emitted_codes: set[str] = set()
    for q in queries:
        verb, obj = q.vo_pair
        skey = q.embedding_refs[cfg.sentence_kind]
        if skey not in emitted_codes:
            emitted_codes.add(skey)
            records.append(
                TensorRecord.from_array(
                    skey, pair_code(cfg.seed, "sent", verb, obj, d[cfg.sentence_kind])
                )
            )
        vkey = q.embedding_refs[cfg.vo_kind]
        if vkey not in emitted_codes:
            emitted_codes.add(vkey)
            records.append(
                TensorRecord.from_array(
                    vkey, pair_code(cfg.seed, "vo", verb, obj, d[cfg.vo_kind])
                )
            )

    signal_kinds = set(cfg.channels)
    obj_kind = FeatureKind.OBJECT_SEGMENTATION.value
    fc6_kind = FeatureKind.C3D_FC6.value
    vac_kind = FeatureKind.VISUAL_ACTIVITY_CONCEPTS.value
    cap_kind = FeatureKind.VIDEO_CAPTIONING.value

    candidates: dict[str, list[ClipCandidate]] = {}
    final_videos: list[VideoMeta] = []
    raw_maps_left = cfg.raw_map_clips
    for meta in videos:
        vid = meta.video_id
        clips = generate_proposals(meta, cfg.proposal)
        candidates[vid] = clips
        vq = per_video_queries[vid]
        refs: dict[str, list[str]] = {obj_kind: [], fc6_kind: [], vac_kind: [], cap_kind: []}
        rng = np.random.default_rng(derive_seed(cfg.seed, "features", vid))
        for ci, clip in enumerate(clips):
            times = _clip_frame_times(clip.bounds, cfg.frame_rate)
            t_count = times.shape[0]
            inside = {
                q.query_id: (times >= q.gt.start) & (times < q.gt.end) for q in vq
            }

            obj_mat = np.zeros((t_count, d[obj_kind]))
            if obj_kind in signal_kinds:
                for q in vq:
                    obj_mat[inside[q.query_id], object_channel(q.vo_pair[1])] += (
                        cfg.signal_strength
                    )
            totals = obj_mat.sum(axis=1)
            over = totals > 1.0
            obj_mat[over] /= totals[over, None]
            obj_mat[:, -1] = np.maximum(0.0, 1.0 - obj_mat[:, :-1].sum(axis=1))
            if cfg.noise_sigma > 0:
                obj_mat = obj_mat + rng.normal(0.0, cfg.noise_sigma, obj_mat.shape)
                obj_mat = np.maximum(obj_mat, 0.0)
                sums = obj_mat.sum(axis=1)
                flat = sums <= 0
                obj_mat[flat, -1] = 1.0
                sums[flat] = 1.0
                obj_mat /= sums[:, None]

            fracs = {
                q.query_id: float(inside[q.query_id].mean()) for q in vq
            }

            fc6_vec = np.zeros(d[fc6_kind])
            vac_vec = np.zeros(d[vac_kind])
            cap_mat = np.zeros((t_count, d[cap_kind]))
            for q in vq:
                ch = verb_channel(q.vo_pair[0])
                if fc6_kind in signal_kinds:
                    fc6_vec[ch] += cfg.signal_strength * fracs[q.query_id]
                if vac_kind in signal_kinds:
                    vac_vec[ch] += cfg.signal_strength * fracs[q.query_id]
                if cap_kind in signal_kinds:
                    cap_mat[inside[q.query_id], ch] += cfg.signal_strength
            if cfg.noise_sigma > 0:
                fc6_vec = fc6_vec + rng.normal(0.0, cfg.noise_sigma, fc6_vec.shape)
                vac_vec = vac_vec + rng.normal(0.0, cfg.noise_sigma, vac_vec.shape)
                cap_mat = cap_mat + rng.normal(0.0, cfg.noise_sigma, cap_mat.shape)

            base = f"{vid}/clip{ci:03d}"
            for kind, payload in (
                (obj_kind, obj_mat),
                (fc6_kind, fc6_vec),
                (vac_kind, vac_vec),
                (cap_kind, cap_mat),
            ):
                key = f"{base}/{kind}"
                refs[kind].append(key)
                records.append(TensorRecord.from_array(key, payload))

            if raw_maps_left > 0:
                raw_maps_left -= 1
                for fi in range(t_count):
                    records.append(
                        TensorRecord.from_array(
                            f"{base}/rawmap{fi:02d}",
                            _raw_map_for_means(obj_mat[fi], rng),
                        )
                    )
        final_videos.append(
            VideoMeta(vid, meta.duration, meta.frame_rate, {k: tuple(v) for k, v in refs.items()})
        )

    return SynthDataset(cfg, final_videos, queries, records, candidates)


def _raw_map_for_means(mean_vec: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A 4x4 map of valid pixel distributions whose class mean is exactly
    ``mean_vec``: pixels come in +/- perturbed pairs."""
    h = w = 4
    maps = np.tile(mean_vec, (h, w, 1))
    order = np.argsort(mean_vec)[::-1]
    a, b = int(order[0]), int(order[1])
    eps = min(mean_vec[a], mean_vec[b], 0.01)
    if eps > 0:
        delta = np.zeros_like(mean_vec)
        delta[a], delta[b] = eps, -eps
        flat = maps.reshape(-1, mean_vec.shape[0])
        flat[0::2] += delta
        flat[1::2] -= delta
    return maps


def write_dataset(ds: SynthDataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    archive = out / "features.mmlf"
    info = out / "dataset.json"
    write_manifest(ds.videos, ds.queries, manifest)
    write_archive(ds.records, archive)
    with open(info, "w", encoding="utf-8") as fh:
        json.dump(ds.cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"manifest": manifest, "archive": archive, "info": info}


# ---------------------------------------------------------------------------
# Bounding oracles. Both rank each query's own candidate clips without the
# trained model: the decoding oracle reads the planted signal channel, the
# random oracle measures chance level for the proposal grid.
# ---------------------------------------------------------------------------


def _oracle_value(kind: str, record_arr: np.ndarray, channel: int) -> float:
    if record_arr.ndim == 2:
        return float(record_arr[:, channel].mean())
    return float(record_arr[channel])


def decoding_oracle_rankings(
    videos: Sequence[VideoMeta],
    queries: Sequence[QueryRecord],
    archive: Mapping,
    channels: Sequence[str] = DEFAULT_CHANNEL_KINDS,
    proposal: Optional[ProposalConfig] = None,
    vo_override: Optional[Mapping[str, tuple[str, str]]] = None,
) -> dict[str, list[Interval]]:
    """Rank clips by the mean pooled value on the query's signal channel.

    Ties break toward longer clips (maximizing expected overlap), then the
    earlier start. ``vo_override`` substitutes (verb, object) per query; used
    by the shuffled-assignment control.
    """
    proposal = proposal or ProposalConfig((6.0,), 0.8)
    by_video = {v.video_id: v for v in videos}
    preferred = [
        k
        for k in (
            FeatureKind.OBJECT_SEGMENTATION.value,
            FeatureKind.VISUAL_ACTIVITY_CONCEPTS.value,
            FeatureKind.C3D_FC6.value,
            FeatureKind.VIDEO_CAPTIONING.value,
        )
        if k in channels
    ]
    if not preferred:
        raise ValueError("no signal channels to decode")
    kind = preferred[0]
    rankings: dict[str, list[Interval]] = {}
    for q in queries:
        meta = by_video[q.video_id]
        clips = generate_proposals(meta, proposal)
        verb, obj = vo_override[q.query_id] if vo_override else q.vo_pair
        channel = (
            object_channel(obj)
            if kind == FeatureKind.OBJECT_SEGMENTATION.value
            else verb_channel(verb)
        )
        keys = meta.clip_feature_refs[kind]
        scored = []
        for clip, key in zip(clips, keys):
            value = _oracle_value(kind, archive[key].as_array(), channel)
            scored.append((value, clip))
        scored.sort(key=lambda t: (-t[0], -(t[1].bounds.length), t[1].bounds.start))
        rankings[q.query_id] = [clip.bounds for _, clip in scored]
    return rankings


def random_oracle_rankings(
    videos: Sequence[VideoMeta],
    queries: Sequence[QueryRecord],
    proposal: Optional[ProposalConfig] = None,
    seed: int = 0,
) -> dict[str, list[Interval]]:
    proposal = proposal or ProposalConfig((6.0,), 0.8)
    by_video = {v.video_id: v for v in videos}
    rankings = {}
    for q in queries:
        clips = generate_proposals(by_video[q.video_id], proposal)
        rng = np.random.default_rng(derive_seed(seed, "random_oracle", q.query_id))
        order = rng.permutation(len(clips))
        rankings[q.query_id] = [clips[i].bounds for i in order]
    return rankings


def oracle_recall(
    rankings: Mapping[str, Sequence[Interval]],
    queries: Sequence[QueryRecord],
    n_values: tuple[int, ...] = (1, 5),
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    gts = {q.query_id: q.gt for q in queries}
    res = recall_at_n(rankings, gts, EvalSpec(n_values=n_values, iou_threshold=iou_threshold))
    return dict(res.recall)
