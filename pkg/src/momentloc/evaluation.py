"""Temporal IoU, R@N-at-IoU recall, greedy interval NMS, and prediction-file
grading. Pure and stateless; parallel across queries."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .data import Interval

# Full-scale Charades-STA reference figures for the strongest published
# baseline; documentation-level constants used as plot reference lines,
# not reproducible at desk scale.
REFERENCE_BASELINE_R1 = 0.304
REFERENCE_BASELINE_R5 = 0.648


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalSpec:
    n_values: tuple[int, ...] = (1, 5)
    iou_threshold: float = 0.5
    nms_threshold: float = 1.0  # 1.0 disables suppression

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        if not self.n_values or any(n < 1 for n in self.n_values):
            raise ValueError(f"n_values must be >= 1, got {self.n_values}")
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if not (0.0 < self.nms_threshold <= 1.0):
            raise ValueError(f"nms_threshold must lie in (0, 1], got {self.nms_threshold}")


@dataclass(frozen=True)
class EvalResult:
    recall: Mapping[int, float]
    n_queries: int
    per_query_hits: Mapping[str, Mapping[int, int]] = field(repr=False)


def temporal_iou(a: Interval, b: Interval) -> float:
    """|a∩b| / |a∪b| of two time spans; 0 when disjoint or zero-length."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = a.length + b.length - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def recall_at_n(
    ranked: Mapping[str, Sequence[Interval]],
    gts: Mapping[str, Interval],
    spec: EvalSpec,
) -> EvalResult:
    """R@n at IoU=u: the fraction of queries whose top-n predictions contain
    at least one interval with IoU >= u against the ground truth.

    ``ranked`` maps query_id to predictions already sorted best-first;
    queries with fewer than n predictions use all available.
    """
    per_query_hits: dict[str, dict[int, int]] = {}
    for query_id, gt in gts.items():
        preds = ranked.get(query_id)
        if preds is None:
            raise EvalError(f"query {query_id!r} missing from predictions")
        ious = [temporal_iou(p, gt) for p in preds]
        per_query_hits[query_id] = {
            n: int(any(iou >= spec.iou_threshold for iou in ious[:n]))
            for n in spec.n_values
        }
    n_queries = len(gts)
    recall = {
        n: sum(h[n] for h in per_query_hits.values()) / n_queries if n_queries else 0.0
        for n in spec.n_values
    }
    return EvalResult(recall=recall, n_queries=n_queries, per_query_hits=per_query_hits)


def nms(ranked: Sequence, threshold: float):
    """Greedy suppression over refined intervals, input sorted best-first.

    Keeps a prediction iff its interval has IoU < threshold with every
    already-kept one. threshold 1.0 disables suppression exactly.
    """
    if threshold >= 1.0:
        return list(ranked)
    kept = []
    for rec in ranked:
        interval = rec.refined if hasattr(rec, "refined") else rec
        if all(
            temporal_iou(interval, k.refined if hasattr(k, "refined") else k) < threshold
            for k in kept
        ):
            kept.append(rec)
    return kept


# Prediction files for grading external systems: TSV with a header row,
# columns (query_id, rank, start_sec, end_sec, score).
PREDICTION_HEADER = ("query_id", "rank", "start_sec", "end_sec", "score")


def write_predictions(ranked: Mapping[str, Sequence], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("\t".join(PREDICTION_HEADER) + "\n")
        for query_id, preds in ranked.items():
            for rank, rec in enumerate(preds, start=1):
                if hasattr(rec, "refined"):
                    interval, score = rec.refined, rec.weighted_score
                else:
                    interval, score = rec
                fh.write(
                    f"{query_id}\t{rank}\t{interval.start!r}\t{interval.end!r}\t{score!r}\n"
                )


def read_predictions(path) -> dict[str, list[Interval]]:
    """Read a prediction TSV into query_id -> intervals sorted by rank."""
    rows: dict[str, list[tuple[int, Interval]]] = {}
    with open(Path(path), "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != PREDICTION_HEADER:
            raise EvalError(f"bad prediction header {header}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise EvalError(f"line {lineno}: expected 5 columns, got {len(parts)}")
            query_id, rank, start, end, _score = parts
            try:
                rows.setdefault(query_id, []).append(
                    (int(rank), Interval(float(start), float(end)))
                )
            except ValueError as exc:
                raise EvalError(f"line {lineno}: {exc}") from exc
    return {
        qid: [iv for _, iv in sorted(pairs, key=lambda p: p[0])]
        for qid, pairs in rows.items()
    }


def write_report(result: EvalResult, path) -> None:
    payload = {
        "n_queries": result.n_queries,
        "recall": {str(n): result.recall[n] for n in sorted(result.recall)},
        "per_query_hits": {
            qid: {str(n): v for n, v in sorted(hits.items())}
            for qid, hits in sorted(result.per_query_hits.items())
        },
    }
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_table(result: EvalResult) -> str:
    cols = sorted(result.recall)
    head = "  ".join(f"R@{n}" for n in cols)
    vals = "  ".join(f"{result.recall[n]:0.3f}" for n in cols)
    return f"queries: {result.n_queries}\n{head}\n{vals}"
