import pytest

from momentloc.data import (
    DEFAULT_DIMS,
    EmbeddingSpec,
    FeatureKind,
    Interval,
    ManifestError,
    QueryRecord,
    VideoMeta,
    parse_manifest,
    write_manifest,
)


def test_default_dims_match_extractor_widths():
    # Fixed by the published extractors themselves.
    assert DEFAULT_DIMS[FeatureKind.SENTENCE_BERT] == 768
    assert DEFAULT_DIMS[FeatureKind.SENTENCE_SKIPTHOUGHT] == 4800
    assert DEFAULT_DIMS[FeatureKind.VO_GLOVE] == 300
    assert DEFAULT_DIMS[FeatureKind.VO_BERT] == 768
    assert DEFAULT_DIMS[FeatureKind.OBJECT_SEGMENTATION] == 150
    assert DEFAULT_DIMS[FeatureKind.VIDEO_CAPTIONING] == 2048
    # Conventional checkpoint widths, overridable per dataset.
    assert DEFAULT_DIMS[FeatureKind.C3D_FC6] == 4096
    assert DEFAULT_DIMS[FeatureKind.VISUAL_ACTIVITY_CONCEPTS] == 400


def test_embedding_spec_default_and_override():
    assert EmbeddingSpec.for_kind(FeatureKind.SENTENCE_BERT).dim == 768
    assert EmbeddingSpec.for_kind(FeatureKind.C3D_FC6, dim=512).dim == 512
    with pytest.raises(ValueError):
        EmbeddingSpec(FeatureKind.SENTENCE_BERT, dim=0)


def test_interval_invariants():
    iv = Interval(2.0, 5.0)
    assert iv.length == 3.0
    with pytest.raises(ValueError, match="invalid interval"):
        Interval(5.0, 2.0)
    with pytest.raises(ValueError, match="invalid interval"):
        Interval(-1.0, 2.0)
    with pytest.raises(ValueError, match="invalid interval"):
        Interval(0.0, float("inf"))


def test_empty_manifest(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert parse_manifest(path) == ([], [])


def _one_video_one_query(tmp_path, **gt):
    gt = gt or {"start": 2.0, "end": 5.0}
    path = tmp_path / "m.jsonl"
    path.write_text(
        '{"type": "video", "video_id": "v0", "duration": 30.0, "frame_rate": 30.0,'
        ' "clip_feature_refs": {"c3d_fc6": ["v0/c0/fc6"]}}\n'
        '{"type": "query", "video_id": "v0", "query_id": "q0", "text": "person opens a door",'
        ' "vo_pair": {"verb": "open", "object": "door"},'
        f' "gt": {{"start": {gt["start"]}, "end": {gt["end"]}}},'
        ' "embedding_refs": {"sentence_bert": "q0/sent"}}\n'
    )
    return path


def test_round_trip_single_records(tmp_path):
    videos, queries = parse_manifest(_one_video_one_query(tmp_path))
    assert len(videos) == 1 and len(queries) == 1
    assert queries[0].gt.start == 2.0
    assert queries[0].gt.end == 5.0
    assert queries[0].vo_pair == ("open", "door")
    assert videos[0].clip_count == 1


def test_invalid_interval_rejected(tmp_path):
    path = _one_video_one_query(tmp_path, start=5.0, end=2.0)
    with pytest.raises(ManifestError, match="invalid interval"):
        parse_manifest(path)


def test_gt_beyond_duration_rejected(tmp_path):
    path = _one_video_one_query(tmp_path, start=2.0, end=55.0)
    with pytest.raises(ManifestError, match="duration"):
        parse_manifest(path)


def test_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type": "video", "video_id": "v0", "duration": 10.0, "frame_rate": 30.0, "clip_feature_refs": {}}\n{nope\n')
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest(path)


def test_unknown_field_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type": "video", "video_id": "v0", "duration": 10.0, "frame_rate": 30.0, "clip_feature_refs": {}, "extra": 1}\n')
    with pytest.raises(ManifestError, match="unknown fields"):
        parse_manifest(path)


def test_unknown_video_reference(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"type": "query", "video_id": "ghost", "query_id": "q0", "text": "t",'
        ' "vo_pair": {"verb": "a", "object": "b"}, "gt": {"start": 0, "end": 1},'
        ' "embedding_refs": {}}\n'
    )
    with pytest.raises(ManifestError, match="ghost"):
        parse_manifest(path)


def test_dangling_archive_key_named(tmp_path):
    path = _one_video_one_query(tmp_path)
    with pytest.raises(ManifestError, match="q0/sent"):
        parse_manifest(path, archive_keys={"v0/c0/fc6"})
    # complete key set passes
    parse_manifest(path, archive_keys={"v0/c0/fc6", "q0/sent"})


def test_write_parse_round_trip_preserves_order(tmp_path):
    videos = [
        VideoMeta("v1", 20.0, 30.0, {"c3d_fc6": ("v1/a",)}),
        VideoMeta("v0", 10.0, 30.0, {"c3d_fc6": ("v0/a",)}),
    ]
    queries = [
        QueryRecord("v1", "qB", "b", ("v", "o"), Interval(1.0, 2.0), {}),
        QueryRecord("v0", "qA", "a", ("v", "o"), Interval(0.0, 9.0), {}),
    ]
    path = tmp_path / "m.jsonl"
    write_manifest(videos, queries, path)
    back_videos, back_queries = parse_manifest(path)
    assert [v.video_id for v in back_videos] == ["v1", "v0"]
    assert [q.query_id for q in back_queries] == ["qB", "qA"]
    assert back_queries[0].gt == Interval(1.0, 2.0)


def test_video_meta_ragged_refs_rejected():
    with pytest.raises(ValueError, match="length"):
        VideoMeta("v", 10.0, 30.0, {"c3d_fc6": ("a",), "object_segmentation": ("b", "c")})
