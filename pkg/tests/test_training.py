import logging
import math

import numpy as np
import pytest

from conftest import tiny_config
from momentloc.data import Interval, QueryRecord, VideoMeta
from momentloc.evaluation import temporal_iou
from momentloc.model import backward, forward_batch, init_params, pack_params, unpack_params
from momentloc.proposals import ClipCandidate, ProposalConfig, apply_offsets, generate_proposals
from momentloc.synth import SynthConfig, generate
from momentloc.training import (
    Optimizer,
    TrainConfig,
    TrainingDivergedError,
    TrainingPair,
    assemble_dataset,
    batch_inputs_for_pairs,
    loss,
    loss_and_output_grads,
    mine_pairs,
    train,
    train_step,
    validation_split,
)


def _clip(start, end, video="v", scale=0):
    return ClipCandidate(video, Interval(start, end), scale)


def _query(qid, video, gt):
    return QueryRecord(video, qid, "t", ("verb00", "object00"), gt, {})


# -- mine_pairs ---------------------------------------------------------------


def test_exact_match_clip_is_positive_with_zero_offsets():
    q = _query("q0", "v", Interval(5.0, 10.0))
    cands = {"v": [_clip(5.0, 10.0), _clip(20.0, 25.0)]}
    pairs = mine_pairs([q], cands, TrainConfig(), seed=0)
    positives = [p for p in pairs if p.label == "positive"]
    assert len(positives) == 1
    assert positives[0].offset_target == (0.0, 0.0)


def test_hand_iou_offsets():
    # gt [12,18] vs clip [10,20]: IoU 6/10 = 0.6 -> positive, offsets (+2, -2)
    q = _query("q0", "v", Interval(12.0, 18.0))
    cands = {"v": [_clip(10.0, 20.0)]}
    pairs = mine_pairs([q], cands, TrainConfig(positive_iou_threshold=0.5), seed=0)
    assert pairs[0].label == "positive"
    assert pairs[0].offset_target == (2.0, -2.0)


def test_threshold_one_skips_query_with_warning(caplog):
    q = _query("q0", "v", Interval(5.0, 10.0))
    cands = {"v": [_clip(5.0, 10.5)]}
    with caplog.at_level(logging.WARNING):
        pairs = mine_pairs([q], cands, TrainConfig(positive_iou_threshold=1.0), seed=0)
    assert pairs == []
    assert any("q0" in rec.message for rec in caplog.records)


def test_offset_targets_round_trip_to_gt():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dur = rng.uniform(20, 40)
        meta = VideoMeta("v", dur, 30.0, {})
        clips = generate_proposals(meta, ProposalConfig((6.0,), 0.8))
        glen = rng.uniform(5.0, 9.0)
        gs = rng.uniform(0, dur - glen)
        q = _query("q0", "v", Interval(gs, gs + glen))
        pairs = mine_pairs([q], {"v": clips}, TrainConfig(), seed=1)
        for p in pairs:
            if p.label == "positive":
                so, eo = p.offset_target
                refined = apply_offsets(p.clip, so, eo, dur)
                assert refined.start == pytest.approx(q.gt.start, abs=1e-12)
                assert refined.end == pytest.approx(q.gt.end, abs=1e-12)


def test_negative_sampling_seeded_and_constrained():
    videos = {
        "a": [_clip(i * 3.0, i * 3.0 + 6.0, video="a") for i in range(5)],
        "b": [_clip(i * 3.0, i * 3.0 + 6.0, video="b") for i in range(5)],
    }
    queries = [
        _query("q0", "a", Interval(0.0, 6.0)),
        _query("q1", "b", Interval(3.0, 9.0)),
    ]
    cfg = TrainConfig(negatives_per_positive=3)
    pairs1 = mine_pairs(queries, videos, cfg, seed=5)
    pairs2 = mine_pairs(queries, videos, cfg, seed=5)
    assert pairs1 == pairs2
    for p in pairs1:
        if p.label == "negative" and p.clip.video_id == next(
            q.video_id for q in queries if q.query_id == p.query_id
        ):
            gt = next(q.gt for q in queries if q.query_id == p.query_id)
            assert temporal_iou(p.clip.bounds, gt) < 0.15


def test_mine_pairs_missing_video_errors():
    q = _query("q0", "ghost", Interval(0.0, 5.0))
    with pytest.raises(KeyError, match="ghost"):
        mine_pairs([q], {}, TrainConfig(), seed=0)


def test_training_pair_validation():
    with pytest.raises(ValueError):
        TrainingPair("q", _clip(0, 1), 0, "positive")  # positive needs a target
    with pytest.raises(ValueError):
        TrainingPair("q", _clip(0, 1), 0, "negative", (0.0, 0.0))
    with pytest.raises(ValueError):
        TrainingPair("q", _clip(0, 1), 0, "meh")


# -- loss ----------------------------------------------------------------------


def _pos(offsets=(0.0, 0.0)):
    return TrainingPair("q", _clip(0, 1), 0, "positive", offsets)


def _neg():
    return TrainingPair("q", _clip(0, 1), 0, "negative")


def test_loss_logistic_at_zero():
    out = np.zeros((1, 3))
    total, aln, reg = loss(out, [_pos()], lambda_reg=0.5)
    assert aln == pytest.approx(math.log(2))
    assert reg == 0.0
    assert total == pytest.approx(math.log(2))


def test_loss_negative_symmetry():
    out = np.zeros((1, 3))
    _, aln, _ = loss(out, [_neg()], lambda_reg=0.5)
    assert aln == pytest.approx(math.log(2))


def test_loss_confident_positive():
    out = np.array([[10.0, 0.0, 0.0]])
    _, aln, _ = loss(out, [_pos()], lambda_reg=0.0)
    assert aln == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert aln == pytest.approx(4.5398899216870535e-05, rel=1e-6)


def test_loss_regression_term():
    # positive with offset error (0.5, 2.0): smooth-L1 = 0.125 + 1.5
    out = np.array([[0.0, 0.5, 2.0]])
    total, aln, reg = loss(out, [_pos((0.0, 0.0))], lambda_reg=0.01)
    assert reg == pytest.approx(0.125 + 1.5)
    assert total == pytest.approx(aln + 0.01 * reg)


def test_loss_non_negative_and_zero_reg_on_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 8))
        pairs = []
        out = np.zeros((n, 3))
        for i in range(n):
            if rng.random() < 0.5:
                tgt = tuple(rng.normal(size=2))
                pairs.append(_pos(tgt))
                out[i] = [rng.normal(), *tgt]
            else:
                pairs.append(_neg())
                out[i] = [rng.normal(), rng.normal(), rng.normal()]
        total, aln, reg = loss(out, pairs, lambda_reg=0.3)
        assert total >= 0 and aln >= 0
        assert reg == pytest.approx(0.0, abs=1e-15)


def test_loss_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        loss(np.zeros((0, 3)), [], 0.1)


def test_loss_gradients_match_fd():
    rng = np.random.default_rng(3)
    pairs = [_pos((0.3, -0.2)), _neg(), _pos((2.0, 0.0)), _neg()]
    out = rng.normal(size=(4, 3))
    lam = 0.17
    _, _, _, grads = loss_and_output_grads(out, pairs, lam)
    h = 1e-6
    for i in range(4):
        for j in range(3):
            up, dn = out.copy(), out.copy()
            up[i, j] += h
            dn[i, j] -= h
            num = (loss(up, pairs, lam)[0] - loss(dn, pairs, lam)[0]) / (2 * h)
            assert grads[i, j] == pytest.approx(num, abs=1e-8)


# -- end-to-end gradient (network + loss) -------------------------------------------


def test_end_to_end_gradient_matches_fd():
    scfg = SynthConfig(
        n_videos=2, n_queries=4, duration_range=(20.0, 24.0), n_verbs=3, n_objects=4,
        dims={"sentence_bert": 8, "vo_glove": 6, "c3d_fc6": 7,
              "visual_activity_concepts": 6, "video_captioning": 5,
              "object_segmentation": 9},
        seed=3,
    )
    raw = generate(scfg)
    archive = {r.key: r for r in raw.records}
    mcfg = tiny_config(dims=dict(scfg.dims), fusion=tiny_config().fusion)
    ds = assemble_dataset(raw.videos, raw.queries, archive, mcfg, scfg.proposal)
    pairs = mine_pairs(ds.queries, ds.candidates, TrainConfig(negatives_per_positive=1), seed=0)[:6]
    inputs = batch_inputs_for_pairs(ds, pairs)
    params = init_params(mcfg)
    lam = 0.05
    seed = 11

    outputs, tape = forward_batch(params, mcfg, inputs, "train", seed)
    _, _, _, out_grads = loss_and_output_grads(outputs, pairs, lam)
    analytic = pack_params(backward(params, mcfg, tape, out_grads))

    def loss_fn(p):
        out, _ = forward_batch(p, mcfg, inputs, "train", seed)
        return loss_and_output_grads(out, pairs, lam)[0]

    theta = pack_params(params)
    numeric = np.zeros_like(theta)
    h = 1e-5
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        numeric[i] = (loss_fn(unpack_params(up, params)) - loss_fn(unpack_params(dn, params))) / (2 * h)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)
    assert float(np.max(np.abs(analytic - numeric) / denom)) < 1e-6


# -- optimizer / train loop -----------------------------------------------------------


def _tiny_synth_dataset(seed=0, epochs_cfg=None):
    scfg = SynthConfig(
        n_videos=6,
        n_queries=24,
        duration_range=(20.0, 30.0),
        n_verbs=5,
        n_objects=6,
        dims={"sentence_bert": 16, "vo_glove": 12, "c3d_fc6": 16,
              "visual_activity_concepts": 16, "video_captioning": 12,
              "object_segmentation": 20},
        seed=seed,
    )
    raw = generate(scfg)
    archive = {r.key: r for r in raw.records}
    mcfg = tiny_config(
        common_dim=8, hidden_dim=8, dims=dict(scfg.dims),
        use_captioning_features=False,
    )
    ds = assemble_dataset(raw.videos, raw.queries, archive, mcfg, scfg.proposal)
    return ds, mcfg


def test_single_batch_overfit():
    ds, mcfg = _tiny_synth_dataset()
    pairs = mine_pairs(ds.queries, ds.candidates, TrainConfig(negatives_per_positive=2), seed=0)
    batch = pairs[:16]
    inputs = batch_inputs_for_pairs(ds, batch)
    params = init_params(mcfg)
    opt = Optimizer("sgd", lr=0.5)
    out0, _ = forward_batch(params, mcfg, inputs, "train", 0)
    initial = loss(out0, batch, 0.01)[0]
    for _ in range(20):
        params, total = train_step(params, mcfg, inputs, batch, opt, 0.01, seed=0)
    out1, _ = forward_batch(params, mcfg, inputs, "train", 0)
    final = loss(out1, batch, 0.01)[0]
    assert final <= 0.5 * initial


def test_epochs_zero_returns_init():
    ds, mcfg = _tiny_synth_dataset()
    res = train(ds, mcfg, TrainConfig(epochs=0))
    assert res.best_epoch == 0
    assert res.metrics == []
    np.testing.assert_array_equal(res.params["proj_low.w"], init_params(mcfg)["proj_low.w"])


def test_training_deterministic_bitwise():
    ds, mcfg = _tiny_synth_dataset()
    cfg = TrainConfig(epochs=3, learning_rate=0.1, seed=4)
    a = train(ds, mcfg, cfg)
    b = train(ds, mcfg, cfg)
    assert a.best_epoch == b.best_epoch
    assert a.metrics == b.metrics
    for key in a.params:
        assert a.params[key].tobytes() == b.params[key].tobytes()


def test_training_loss_decreases_on_synthetic():
    ds, mcfg = _tiny_synth_dataset()
    res = train(ds, mcfg, TrainConfig(epochs=6, learning_rate=0.1, seed=0))
    losses = [m["train_loss"] for m in res.metrics]
    assert all(b < a for a, b in zip(losses[:5], losses[1:6]))


def test_training_divergence_aborts_with_location():
    # a pathological regression weight overflows a parameter to inf; the
    # next batch's outputs go NaN and the loop must abort naming the spot
    ds, mcfg = _tiny_synth_dataset()
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDivergedError, match=r"epoch \d+ batch \d+"):
            train(
                ds,
                mcfg,
                TrainConfig(epochs=2, learning_rate=1e10, lambda_reg=1e300, optimizer="sgd"),
            )


def test_validation_split_deterministic_fraction():
    queries = [_query(f"q{i}", "v", Interval(0, 1)) for i in range(500)]
    cfg = TrainConfig(val_fraction=0.1, seed=2)
    train_q, val_q = validation_split(queries, cfg)
    assert len(train_q) + len(val_q) == 500
    assert 25 <= len(val_q) <= 75
    again = validation_split(queries, cfg)
    assert [q.query_id for q in again[1]] == [q.query_id for q in val_q]


def test_optimizer_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(positive_iou_threshold=0.0)


def test_adam_step_moves_small_scale_params():
    ds, mcfg = _tiny_synth_dataset()
    pairs = mine_pairs(ds.queries, ds.candidates, TrainConfig(), seed=0)[:8]
    inputs = batch_inputs_for_pairs(ds, pairs)
    params = init_params(mcfg)
    opt = Optimizer("adam", lr=0.01)
    new_params, _ = train_step(params, mcfg, inputs, pairs, opt, 0.01, seed=0)
    deltas = np.abs(pack_params(new_params) - pack_params(params))
    moved = deltas[deltas > 0]
    # adam normalizes per-parameter step sizes toward lr
    assert moved.max() <= 0.0100001
    assert np.median(moved) > 1e-4
