import json
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from featexport.export import ExportJob, clip_windows, export, sampled_frame_indices
from featexport.extractors import HashedTextEmbedder, OfflineProjection, OfflineSegmentation
from featexport.mmlf import MAGIC, VERSION, write_mmlf

EXTRACTORS = {
    "object_segmentation": {"backend": "offline_segmentation", "dim": 150},
    "video_captioning": {"backend": "offline_projection", "dim": 2048},
    "c3d_fc6": {"backend": "offline_projection", "dim": 4096},
    "visual_activity_concepts": {"backend": "offline_projection", "dim": 400},
    "sentence_bert": {"backend": "hashed_text", "dim": 768},
    "vo_glove": {"backend": "hashed_text", "dim": 300},
}


def make_video_npz(path, n_frames, h=24, w=24, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n_frames, h, w, 3), dtype=np.uint8)
    np.savez_compressed(path, frames=frames)
    return frames


def make_job(tmp_path, videos, texts=(), window_lengths=(6.0,), overlap=0.5, stride=16):
    return ExportJob(
        archive_path=str(tmp_path / "out" / "features.mmlf"),
        fragment_path=str(tmp_path / "out" / "fragment.jsonl"),
        errors_path=str(tmp_path / "out" / "errors.jsonl"),
        videos=videos,
        texts=texts,
        extractors=EXTRACTORS,
        window_lengths=window_lengths,
        overlap_ratio=overlap,
        frame_stride=stride,
    )


def read_mmlf(path):
    """Minimal reader used only by these tests."""
    records = {}
    with open(path, "rb") as fh:
        assert fh.read(4) == MAGIC
        version, count = struct.unpack("<II", fh.read(8))
        assert version == VERSION
        for _ in range(count):
            (klen,) = struct.unpack("<I", fh.read(4))
            key = fh.read(klen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            records[key] = data
        assert fh.read() == b""
    return records


# -- units ---------------------------------------------------------------------


def test_clip_windows_match_documented_grid():
    # 100 s, window 10, overlap 0.5 -> starts 0, 5, ..., 90
    clips = clip_windows(100.0, (10.0,), 0.5)
    assert len(clips) == 19
    assert clips[0] == (0.0, 10.0)
    assert clips[-1] == (90.0, 100.0)
    # short video: one clamped clip
    assert clip_windows(5.0, (10.0,), 0.5) == [(0.0, 5.0)]


def test_sampled_frame_indices_every_16th():
    assert sampled_frame_indices(1, 16) == [0]
    assert sampled_frame_indices(32, 16) == [0, 16]
    assert sampled_frame_indices(48, 16) == [0, 16, 32]
    with pytest.raises(ValueError):
        sampled_frame_indices(0, 16)


def test_offline_segmentation_outputs_distributions():
    seg = OfflineSegmentation(150, seed=3)
    frames = np.random.default_rng(0).integers(0, 256, size=(4, 33, 47, 3))
    means = seg.frame_class_means(frames)
    assert means.shape == (4, 150)
    assert np.all(means >= 0)
    np.testing.assert_allclose(means.sum(axis=1), 1.0, atol=1e-9)


def test_offline_projection_shapes_and_determinism():
    proj = OfflineProjection(64, seed=1, label="x")
    frames = np.random.default_rng(0).integers(0, 256, size=(5, 20, 20, 3))
    a = proj.frame_features(frames)
    b = proj.frame_features(frames)
    assert a.shape == (5, 64)
    np.testing.assert_array_equal(a, b)
    assert proj.clip_feature(frames).shape == (64,)


def test_hashed_text_embedder_properties():
    emb = HashedTextEmbedder(128, seed=0)
    vecs = emb.embed(["person opens a door", "person opens a door", "dog runs"])
    np.testing.assert_array_equal(vecs[0], vecs[1])
    assert np.linalg.norm(vecs[0]) == pytest.approx(1.0)
    assert not np.array_equal(vecs[0], vecs[2])
    assert np.all(emb.embed([""])[0] == 0.0)


def test_mmlf_writer_rejects_bad_records(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        write_mmlf([("k", np.zeros(2)), ("k", np.ones(2))], tmp_path / "x.mmlf")
    with pytest.raises(ValueError, match="non-finite"):
        write_mmlf([("k", np.array([np.nan]))], tmp_path / "y.mmlf")


# -- export jobs ------------------------------------------------------------------


def test_zero_videos_empty_archive_valid_header(tmp_path):
    job = make_job(tmp_path, videos=())
    result = export(job)
    assert result.n_records == 0
    blob = Path(result.archive_path).read_bytes()
    assert blob == MAGIC + struct.pack("<II", VERSION, 0)


def test_single_32_frame_clip_two_vectors_per_sequence_kind(tmp_path):
    from featexport.export import VideoItem

    # 32 frames at 4 fps = 8 s; a single 10 s window clamps to one clip
    make_video_npz(tmp_path / "v.npz", n_frames=32)
    job = make_job(
        tmp_path,
        videos=(VideoItem("v0", str(tmp_path / "v.npz"), 4.0),),
        window_lengths=(10.0,),
    )
    result = export(job)
    records = read_mmlf(result.archive_path)
    assert records["v0/clip000/object_segmentation"].shape == (2, 150)
    assert records["v0/clip000/video_captioning"].shape == (2, 2048)
    assert records["v0/clip000/c3d_fc6"].shape == (4096,)
    assert records["v0/clip000/visual_activity_concepts"].shape == (400,)


def test_object_vectors_sum_to_one(tmp_path):
    from featexport.export import VideoItem

    make_video_npz(tmp_path / "v.npz", n_frames=60, seed=5)
    job = make_job(tmp_path, videos=(VideoItem("v0", str(tmp_path / "v.npz"), 10.0),))
    result = export(job)
    records = read_mmlf(result.archive_path)
    seg_keys = [k for k in records if k.endswith("object_segmentation")]
    assert seg_keys
    for key in seg_keys:
        sums = records[key].sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-4)


def test_failed_item_skipped_and_listed(tmp_path):
    from featexport.export import VideoItem

    make_video_npz(tmp_path / "good.npz", n_frames=40)
    job = make_job(
        tmp_path,
        videos=(
            VideoItem("good", str(tmp_path / "good.npz"), 8.0),
            VideoItem("missing", str(tmp_path / "nope.npz"), 8.0),
        ),
    )
    result = export(job)
    assert result.n_skipped == 1
    errors = [json.loads(line) for line in Path(result.errors_path).read_text().splitlines()]
    assert errors[0]["item"] == "video:missing"
    fragment = [json.loads(line) for line in Path(result.fragment_path).read_text().splitlines()]
    assert [f["video_id"] for f in fragment if f["type"] == "video"] == ["good"]


def test_export_deterministic(tmp_path):
    from featexport.export import TextItem, VideoItem

    make_video_npz(tmp_path / "v.npz", n_frames=50, seed=2)
    items = dict(
        videos=(VideoItem("v0", str(tmp_path / "v.npz"), 10.0),),
        texts=(TextItem("q0", "person waves", "waves", "hand"),),
    )
    a = make_job(tmp_path / "a", **items)
    b = make_job(tmp_path / "b", **items)
    export(a)
    export(b)
    assert Path(a.archive_path).read_bytes() == Path(b.archive_path).read_bytes()
    assert Path(a.fragment_path).read_text() == Path(b.fragment_path).read_text()


def test_job_round_trip_from_dict(tmp_path):
    job_dict = {
        "archive": str(tmp_path / "f.mmlf"),
        "fragment": str(tmp_path / "f.jsonl"),
        "videos": [{"video_id": "v", "frames_path": "v.npz", "frame_rate": 30.0}],
        "texts": [{"query_id": "q", "text": "t", "verb": "a", "object": "b"}],
        "extractors": {"sentence_bert": {"backend": "hashed_text", "dim": 768}},
        "proposal": {"window_lengths": [6.0], "overlap_ratio": 0.8},
        "frame_stride": 16,
        "seed": 3,
    }
    job = ExportJob.from_dict(job_dict)
    assert job.videos[0].video_id == "v"
    assert job.texts[0].query_id == "q"
    assert job.window_lengths == (6.0,)
    assert job.seed == 3


# -- A10: conformance against the consumer's validate CLI ---------------------------


def test_A10_exported_archive_passes_consumer_validation(tmp_path):
    from featexport.export import TextItem, VideoItem

    rng = np.random.default_rng(7)
    videos = []
    durations = {}
    for vi in range(2):
        vid = f"v{vi:03d}"
        n_frames = 90
        fps = 7.5
        make_video_npz(tmp_path / f"{vid}.npz", n_frames=n_frames, seed=vi)
        videos.append(VideoItem(vid, str(tmp_path / f"{vid}.npz"), fps))
        durations[vid] = n_frames / fps
    texts = tuple(
        TextItem(f"q{qi}", f"person moves object {qi}", "moves", f"object{qi}")
        for qi in range(3)
    )
    job = make_job(tmp_path, videos=tuple(videos), texts=texts, window_lengths=(6.0,), overlap=0.5)
    result = export(job)
    assert result.n_skipped == 0

    # merge the fragment with ground-truth info into a full manifest
    fragment = [json.loads(line) for line in Path(result.fragment_path).read_text().splitlines()]
    manifest_path = tmp_path / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for line in fragment:
            if line["type"] == "video":
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        for qi, line in enumerate(l for l in fragment if l["type"] == "query_fragment"):
            vid = videos[qi % len(videos)].video_id
            start = float(rng.uniform(0, durations[vid] - 5.0))
            record = {
                "type": "query",
                "video_id": vid,
                "query_id": line["query_id"],
                "text": texts[qi].text,
                "vo_pair": {"verb": texts[qi].verb, "object": texts[qi].object},
                "gt": {"start": start, "end": start + 4.0},
                "embedding_refs": line["embedding_refs"],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    config = {
        "paths": {
            "manifest": str(manifest_path),
            "archive": str(result.archive_path),
            "out_dir": str(tmp_path / "runs"),
        },
        "proposal": {"window_lengths": [6.0], "overlap_ratio": 0.5},
        "seed": 0,
    }
    config_path = tmp_path / "validate.json"
    config_path.write_text(json.dumps(config))
    proc = subprocess.run(
        [sys.executable, "-m", "momentloc.cli", "validate", "--config", str(config_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, f"validate failed:\n{proc.stdout}\n{proc.stderr}"
    assert "OK" in proc.stdout

    # the consumer must also reject a deliberately corrupted copy
    bad = tmp_path / "bad.mmlf"
    bad.write_bytes(Path(result.archive_path).read_bytes()[:-10])
    config["paths"]["archive"] = str(bad)
    config_path.write_text(json.dumps(config))
    proc = subprocess.run(
        [sys.executable, "-m", "momentloc.cli", "validate", "--config", str(config_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 3
