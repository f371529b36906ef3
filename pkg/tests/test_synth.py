import numpy as np
import pytest

from momentloc.archive import read_archive
from momentloc.data import FeatureKind, parse_manifest
from momentloc.features import FrameClassMap, frame_class_means, temporal_max_pool
from momentloc.proposals import ProposalConfig
from momentloc.synth import (
    SynthConfig,
    decoding_oracle_rankings,
    generate,
    object_channel,
    oracle_recall,
    random_oracle_rankings,
    write_dataset,
)

SMALL = dict(
    n_videos=4,
    n_queries=12,
    duration_range=(20.0, 28.0),
    n_verbs=4,
    n_objects=5,
    dims={
        "sentence_bert": 16,
        "vo_glove": 12,
        "c3d_fc6": 12,
        "visual_activity_concepts": 12,
        "video_captioning": 10,
        "object_segmentation": 24,
    },
)


def test_noiseless_construction_exact_values():
    # one query per video: no overlapping intervals share frame mass, so the
    # planted values are exact
    cfg = SynthConfig(
        noise_sigma=0.0, signal_strength=1.0, **{**SMALL, "n_queries": SMALL["n_videos"]}
    )
    ds = generate(cfg)
    archive = {r.key: r for r in ds.records}
    checked_inside = checked_outside = 0
    for q in ds.queries:
        meta = next(v for v in ds.videos if v.video_id == q.video_id)
        channel = object_channel(q.vo_pair[1])
        keys = meta.clip_feature_refs[FeatureKind.OBJECT_SEGMENTATION.value]
        for clip, key in zip(ds.candidates[q.video_id], keys):
            pooled = temporal_max_pool(archive[key].as_array())
            if clip.bounds.end <= q.gt.start or clip.bounds.start >= q.gt.end:
                assert pooled[channel] == 0.0
                checked_outside += 1
            elif q.gt.start <= clip.bounds.start and clip.bounds.end <= q.gt.end:
                # clip inside the interval: every sampled frame carries the signal
                assert pooled[channel] == 1.0
                checked_inside += 1
    assert checked_inside > 0 and checked_outside > 0


def test_same_seed_bitwise_identical(tmp_path):
    cfg = SynthConfig(seed=9, **SMALL)
    a = tmp_path / "a"
    b = tmp_path / "b"
    write_dataset(generate(cfg), a)
    write_dataset(generate(cfg), b)
    assert (a / "features.mmlf").read_bytes() == (b / "features.mmlf").read_bytes()
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    c = tmp_path / "c"
    write_dataset(generate(SynthConfig(seed=10, **SMALL)), c)
    assert (a / "features.mmlf").read_bytes() != (c / "features.mmlf").read_bytes()


def test_gt_intervals_within_video_bounds():
    ds = generate(SynthConfig(seed=3, **SMALL))
    durations = {v.video_id: v.duration for v in ds.videos}
    for q in ds.queries:
        assert 0.0 <= q.gt.start < q.gt.end <= durations[q.video_id]


def test_dataset_passes_manifest_validation(tmp_path):
    ds = generate(SynthConfig(**SMALL))
    paths = write_dataset(ds, tmp_path)
    keys = {r.key for r in read_archive(paths["archive"])}
    videos, queries = parse_manifest(paths["manifest"], archive_keys=keys)
    assert len(videos) == 4 and len(queries) == 12


def test_vocabulary_capacity_errors():
    with pytest.raises(ValueError, match="exceeds segmentation"):
        SynthConfig(
            n_objects=24,
            dims={**SMALL["dims"]},
            n_videos=4,
            n_queries=8,
            n_verbs=4,
        )
    with pytest.raises(ValueError, match="exceeds c3d_fc6"):
        SynthConfig(
            n_verbs=13,
            dims={**SMALL["dims"]},
            n_videos=4,
            n_queries=8,
            n_objects=5,
        )
    with pytest.raises(ValueError, match="distinct channels"):
        SynthConfig(
            n_videos=1,
            n_queries=6,
            n_verbs=4,
            n_objects=5,
            dims={**SMALL["dims"]},
        )


def test_decoding_oracle_beats_point_nine_on_defaults():
    cfg = SynthConfig()
    ds = generate(cfg)
    archive = {r.key: r for r in ds.records}
    rankings = decoding_oracle_rankings(ds.videos, ds.queries, archive, cfg.channels, cfg.proposal)
    recall = oracle_recall(rankings, ds.queries)
    assert recall[1] >= 0.9


def test_random_oracle_near_chance_on_defaults():
    cfg = SynthConfig()
    ds = generate(cfg)
    rankings = random_oracle_rankings(ds.videos, ds.queries, cfg.proposal, seed=1)
    recall = oracle_recall(rankings, ds.queries)
    assert recall[1] <= 0.2


def test_shuffled_assignment_destroys_oracle():
    cfg = SynthConfig()
    ds = generate(cfg)
    archive = {r.key: r for r in ds.records}
    rng = np.random.default_rng(5)
    perm = rng.permutation(len(ds.queries))
    shuffled = {
        q.query_id: ds.queries[perm[i]].vo_pair for i, q in enumerate(ds.queries)
    }
    rankings = decoding_oracle_rankings(
        ds.videos, ds.queries, archive, cfg.channels, cfg.proposal, vo_override=shuffled
    )
    recall = oracle_recall(rankings, ds.queries)
    baseline = oracle_recall(
        decoding_oracle_rankings(ds.videos, ds.queries, archive, cfg.channels, cfg.proposal),
        ds.queries,
    )
    assert recall[1] <= 0.35
    assert baseline[1] - recall[1] >= 0.5


def test_raw_map_mode_consistent_with_stored_means():
    cfg = SynthConfig(raw_map_clips=2, noise_sigma=0.05, **SMALL)
    ds = generate(cfg)
    archive = {r.key: r for r in ds.records}
    raw_keys = sorted(k for k in archive if "/rawmap" in k)
    assert raw_keys, "raw map mode stores frame maps"
    for key in raw_keys:
        base, frame = key.rsplit("/rawmap", 1)
        means_rec = archive[f"{base}/object_segmentation"]
        stored = means_rec.as_array()[int(frame)]
        frame_map = FrameClassMap(archive[key].as_array())
        np.testing.assert_allclose(frame_class_means(frame_map), stored, atol=1e-6)


def test_config_round_trip():
    cfg = SynthConfig(
        proposal=ProposalConfig((4.0, 8.0), 0.75), raw_map_clips=1, **SMALL
    )
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
