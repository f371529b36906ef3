"""Pair mining, alignment + offset-regression loss, the SGD loop, and
checkpoint selection.

Loss: logistic alignment on the raw score (y = +1 positive / -1 negative)
plus lambda * smooth-L1 offset regression on positive pairs. Plain SGD:
deterministic, and trivially compatible with finite-difference checks.
The epoch loop is sequential; batches are computed with fixed-order
vectorized reductions so a given seed is bit-reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import QueryRecord, VideoMeta
from .evaluation import EvalSpec, nms, recall_at_n, temporal_iou
from .model import (
    BatchInputs,
    ModelConfig,
    backward,
    clip_input_vectors,
    forward_batch,
    init_params,
    query_input_vectors,
    score_clip_rows,
)
from .proposals import ClipCandidate, ProposalConfig, generate_proposals
from .util import derive_seed

log = logging.getLogger(__name__)

SAME_VIDEO_NEGATIVE_IOU_CEILING = 0.15


class TrainingDivergedError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    positive_iou_threshold: float = 0.5
    negatives_per_positive: int = 10
    lambda_reg: float = 0.01
    learning_rate: float = 0.1
    optimizer: str = "sgd"  # "sgd" | "adam"; adam rescues tiny-scale inputs
    batch_size: int = 64
    epochs: int = 30
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.positive_iou_threshold <= 1.0):
            raise ValueError(
                f"positive_iou_threshold must lie in (0, 1], got {self.positive_iou_threshold}"
            )
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "positive_iou_threshold": self.positive_iou_threshold,
            "negatives_per_positive": self.negatives_per_positive,
            "lambda_reg": self.lambda_reg,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        return cls(**dict(obj))


class Optimizer:
    """Deterministic first-order updates; state is a pure function of the
    gradient history, so training stays bit-reproducible."""

    def __init__(self, kind: str, lr: float):
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        if self.kind == "sgd":
            return {k: params[k] - self.lr * grads[k] for k in params}
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        out = {}
        for k in params:
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * grads[k]
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * grads[k] ** 2
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + eps)
        return out


@dataclass(frozen=True)
class TrainingPair:
    query_id: str
    clip: ClipCandidate
    clip_index: int
    label: str
    offset_target: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise ValueError(f"label must be positive/negative, got {self.label!r}")
        if (self.offset_target is None) == (self.label == "positive"):
            raise ValueError("offset_target must be present iff the pair is positive")


@dataclass
class AssembledDataset:
    """Archive features pooled into model-input rows, per clip and query."""

    videos: list[VideoMeta]
    queries: list[QueryRecord]
    candidates: dict[str, list[ClipCandidate]]
    clip_rows: dict[str, list[dict]]
    query_rows: dict[str, dict]

    def duration(self, video_id: str) -> float:
        return self._durations[video_id]

    def __post_init__(self):
        self._durations = {v.video_id: v.duration for v in self.videos}


def assemble_dataset(
    videos: Sequence[VideoMeta],
    queries: Sequence[QueryRecord],
    archive: Mapping,
    model_cfg: ModelConfig,
    proposal_cfg: ProposalConfig,
) -> AssembledDataset:
    """Generate proposals and pool raw archive features into input rows.

    Every video's clip_feature_refs must be index-aligned with the proposal
    grid generated from ``proposal_cfg``.
    """
    candidates: dict[str, list[ClipCandidate]] = {}
    clip_rows: dict[str, list[dict]] = {}
    for meta in videos:
        clips = generate_proposals(meta, proposal_cfg)
        if meta.clip_feature_refs and meta.clip_count != len(clips):
            raise ValueError(
                f"video {meta.video_id!r}: manifest lists {meta.clip_count} clips but the "
                f"proposal config generates {len(clips)}"
            )
        rows = []
        for ci in range(len(clips)):
            feats = {}
            for kind, keys in meta.clip_feature_refs.items():
                rec = archive.get(keys[ci])
                if rec is None:
                    raise KeyError(f"archive key {keys[ci]!r} missing")
                feats[kind] = rec.as_array()
            rows.append(clip_input_vectors(model_cfg, feats))
        candidates[meta.video_id] = clips
        clip_rows[meta.video_id] = rows
    query_rows = {}
    for q in queries:
        feats = {}
        for kind, key in q.embedding_refs.items():
            rec = archive.get(key)
            if rec is None:
                raise KeyError(f"archive key {key!r} missing")
            feats[kind] = rec.as_array()
        query_rows[q.query_id] = query_input_vectors(model_cfg, feats)
    return AssembledDataset(list(videos), list(queries), candidates, clip_rows, query_rows)


def mine_pairs(
    queries: Sequence[QueryRecord],
    candidates: Mapping[str, Sequence[ClipCandidate]],
    cfg: TrainConfig,
    seed: int,
) -> list[TrainingPair]:
    """Positives: clips with IoU >= threshold, offset targets reproducing the
    ground truth exactly. Negatives: sampled uniformly (seeded) from other
    queries' videos plus same-video clips with IoU < 0.15."""
    video_ids_by_query = {q.query_id: q.video_id for q in queries}
    pairs: list[TrainingPair] = []
    for q in queries:
        if q.video_id not in candidates:
            raise KeyError(f"no candidates generated for video {q.video_id!r}")
        clips = candidates[q.video_id]
        ious = [temporal_iou(c.bounds, q.gt) for c in clips]
        pos = [i for i, iou in enumerate(ious) if iou >= cfg.positive_iou_threshold]
        if not pos:
            log.warning("query %s has no positive clips; skipped", q.query_id)
            continue
        for i in pos:
            clip = clips[i]
            pairs.append(
                TrainingPair(
                    query_id=q.query_id,
                    clip=clip,
                    clip_index=i,
                    label="positive",
                    offset_target=(
                        q.gt.start - clip.bounds.start,
                        q.gt.end - clip.bounds.end,
                    ),
                )
            )
        pool: list[tuple[str, int]] = [
            (q.video_id, i)
            for i, iou in enumerate(ious)
            if iou < SAME_VIDEO_NEGATIVE_IOU_CEILING
        ]
        other_videos = sorted(
            {v for qid, v in video_ids_by_query.items() if qid != q.query_id and v != q.video_id}
        )
        for vid in other_videos:
            pool.extend((vid, i) for i in range(len(candidates[vid])))
        want = cfg.negatives_per_positive * len(pos)
        rng = np.random.default_rng(derive_seed(seed, "negatives", q.query_id))
        if want >= len(pool):
            chosen = range(len(pool))
        else:
            chosen = rng.choice(len(pool), size=want, replace=False)
        for idx in chosen:
            vid, ci = pool[int(idx)]
            pairs.append(
                TrainingPair(
                    query_id=q.query_id,
                    clip=candidates[vid][ci],
                    clip_index=ci,
                    label="negative",
                )
            )
    return pairs


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def loss_and_output_grads(
    outputs: np.ndarray, pairs: Sequence[TrainingPair], lambda_reg: float
) -> tuple[float, float, float, np.ndarray]:
    """Total/alignment/regression loss and d(total)/d(outputs), shape (n, 3)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    n = len(pairs)
    if n == 0:
        raise ValueError("empty batch")
    if outputs.shape != (n, 3):
        raise ValueError(f"expected outputs ({n}, 3), got {outputs.shape}")
    y = np.array([1.0 if p.label == "positive" else -1.0 for p in pairs])
    scores = outputs[:, 0]
    aln = float(np.mean(np.logaddexp(0.0, -y * scores)))
    grads = np.zeros_like(outputs)
    grads[:, 0] = -y * _sigmoid(-y * scores) / n

    pos_rows = [i for i, p in enumerate(pairs) if p.label == "positive"]
    if pos_rows:
        targets = np.array([pairs[i].offset_target for i in pos_rows])
        diffs = outputs[pos_rows, 1:] - targets
        reg = float(np.mean(_smooth_l1(diffs).sum(axis=1)))
        grads[pos_rows, 1:] = lambda_reg * _smooth_l1_grad(diffs) / len(pos_rows)
    else:
        reg = 0.0
    total = aln + lambda_reg * reg
    return total, aln, reg, grads


def loss(
    outputs: np.ndarray, pairs: Sequence[TrainingPair], lambda_reg: float
) -> tuple[float, float, float]:
    total, aln, reg, _ = loss_and_output_grads(outputs, pairs, lambda_reg)
    return total, aln, reg


def batch_inputs_for_pairs(ds: AssembledDataset, pairs: Sequence[TrainingPair]) -> BatchInputs:
    clip_rows = [ds.clip_rows[p.clip.video_id][p.clip_index] for p in pairs]
    query_rows = [ds.query_rows[p.query_id] for p in pairs]
    return BatchInputs(
        low=np.stack([r["low"] for r in clip_rows]),
        obj_scaled=np.stack([r["obj_scaled"] for r in clip_rows]),
        vac=np.stack([r["vac"] for r in clip_rows]),
        sent=np.stack([r["sent"] for r in query_rows]),
        vo=np.stack([r["vo"] for r in query_rows]),
    )


def train_step(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    inputs: BatchInputs,
    pairs: Sequence[TrainingPair],
    optimizer: Optimizer,
    lambda_reg: float,
    seed: int,
) -> tuple[dict[str, np.ndarray], float]:
    outputs, tape = forward_batch(params, model_cfg, inputs, "train", seed)
    total, _, _, out_grads = loss_and_output_grads(outputs, pairs, lambda_reg)
    grads = backward(params, model_cfg, tape, out_grads)
    return optimizer.step(params, grads), total


def sgd_step(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    inputs: BatchInputs,
    pairs: Sequence[TrainingPair],
    lr: float,
    lambda_reg: float,
    seed: int,
) -> tuple[dict[str, np.ndarray], float]:
    return train_step(
        params, model_cfg, inputs, pairs, Optimizer("sgd", lr), lambda_reg, seed
    )


def validation_split(queries: Sequence[QueryRecord], cfg: TrainConfig) -> tuple[list, list]:
    """Split queries into (train, val) by a seeded hash of query_id."""
    train, val = [], []
    for q in queries:
        u = (derive_seed(cfg.seed, "val_split", q.query_id) % 10**9) / 10**9
        (val if u < cfg.val_fraction else train).append(q)
    return train, val


def evaluate_queries(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    ds: AssembledDataset,
    queries: Sequence[QueryRecord],
    spec: EvalSpec,
):
    """Score each query's own video candidates and compute R@n."""
    ranked = {}
    for q in queries:
        records = score_clip_rows(
            params,
            model_cfg,
            ds.candidates[q.video_id],
            ds.clip_rows[q.video_id],
            ds.query_rows[q.query_id],
            ds.duration(q.video_id),
        )
        records = nms(records, spec.nms_threshold)
        ranked[q.query_id] = [r.refined for r in records]
    gts = {q.query_id: q.gt for q in queries}
    return recall_at_n(ranked, gts, spec)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    best_r1: float
    best_r5: float
    metrics: list[dict] = field(default_factory=list)
    val_query_ids: list[str] = field(default_factory=list)


def train(
    ds: AssembledDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> TrainResult:
    """SGD with per-epoch validation; retains the checkpoint maximizing
    validation R@1 (ties resolve to the earlier epoch). Fully reproducible
    for a given seed."""
    train_queries, val_queries = validation_split(ds.queries, train_cfg)
    pairs = mine_pairs(train_queries, ds.candidates, train_cfg, train_cfg.seed)
    params = init_params(model_cfg)
    eval_spec = EvalSpec(n_values=(1, 5), iou_threshold=0.5)

    best = TrainResult(
        params={k: v.copy() for k, v in params.items()},
        best_epoch=0,
        best_r1=-1.0,
        best_r5=-1.0,
        val_query_ids=[q.query_id for q in val_queries],
    )
    metrics: list[dict] = []
    optimizer = Optimizer(train_cfg.optimizer, train_cfg.learning_rate)
    for epoch in range(1, train_cfg.epochs + 1):
        rng = np.random.default_rng(derive_seed(train_cfg.seed, "shuffle", epoch))
        order = rng.permutation(len(pairs))
        epoch_loss_sum = 0.0
        for bi, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            batch_pairs = [pairs[i] for i in order[start : start + train_cfg.batch_size]]
            inputs = batch_inputs_for_pairs(ds, batch_pairs)
            params, total = train_step(
                params,
                model_cfg,
                inputs,
                batch_pairs,
                optimizer,
                train_cfg.lambda_reg,
                derive_seed(train_cfg.seed, "dropout", epoch, bi),
            )
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {bi}"
                )
            epoch_loss_sum += total * len(batch_pairs)
        train_loss = epoch_loss_sum / max(len(pairs), 1)
        if val_queries:
            result = evaluate_queries(params, model_cfg, ds, val_queries, eval_spec)
            val_r1, val_r5 = result.recall[1], result.recall[5]
        else:
            val_r1 = val_r5 = 0.0
        metrics.append(
            {"epoch": epoch, "train_loss": train_loss, "val_r1": val_r1, "val_r5": val_r5}
        )
        if val_r1 > best.best_r1:
            best.params = {k: v.copy() for k, v in params.items()}
            best.best_epoch = epoch
            best.best_r1 = val_r1
            best.best_r5 = val_r5
    if best.best_r1 < 0:  # epochs == 0
        best.best_r1 = best.best_r5 = 0.0
    best.metrics = metrics
    return best
