"""Command-line entry point: synth, validate, train, eval, grade, sweep,
and plot-data emission, all driven by one declarative JSON run-config.

Non-interactive and scriptable: stdout carries only the report, stderr the
diagnostics. Exit codes: 0 ok, 2 config error, 3 data validation error,
4 runtime failure. Output artifacts land in a directory named by the hash
of the effective config, so reruns of the same config are idempotent and
different configs never silently overwrite each other. Artifacts contain
no wall-clock fields; timing goes to stderr only.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .archive import ArchiveError, load_archive_index
from .data import FeatureKind, ManifestError, parse_manifest
from .evaluation import (
    EvalError,
    EvalSpec,
    format_table,
    nms,
    read_predictions,
    recall_at_n,
    write_predictions,
    write_report,
)
from .model import (
    MissingFeatureError,
    ModelConfig,
    TABLE_FEATURE_MATRIX,
    load_checkpoint,
    save_checkpoint,
    score_clip_rows,
)
from .proposals import ProposalConfig, generate_proposals
from .sweep import (
    SweepGrid,
    emit_curves,
    read_result_table,
    run_sweep,
    select_winner,
    write_result_table,
)
from .synth import SynthConfig, generate, write_dataset
from .training import (
    TrainConfig,
    TrainingDivergedError,
    assemble_dataset,
    train,
    validation_split,
)

log = logging.getLogger("momentloc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    pass


class DataValidationError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    manifest: str = "manifest.jsonl"
    archive: str = "features.mmlf"
    out_dir: str = "runs"
    checkpoint: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    eval_spec: EvalSpec = field(default_factory=EvalSpec)
    eval_split: str = "all"
    grid: SweepGrid = field(default_factory=SweepGrid)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0

    def __post_init__(self):
        if self.eval_split not in ("all", "train", "val"):
            raise ValueError(f"eval.split must be all/train/val, got {self.eval_split!r}")


_SECTIONS = {"paths", "model", "train", "proposal", "eval", "sweep", "synth", "seed"}
_PATH_KEYS = {"manifest", "archive", "out_dir", "checkpoint"}


def _build_run_config(raw: dict) -> RunConfig:
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    paths = dict(raw.get("paths", {}))
    unknown = set(paths) - _PATH_KEYS
    if unknown:
        raise ConfigError(f"unknown paths keys {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    try:
        model_dict = dict(raw.get("model", {}))
        model_dict.setdefault("seed", seed)
        train_dict = dict(raw.get("train", {}))
        train_dict.setdefault("seed", seed)
        prop = dict(raw.get("proposal", {}))
        eval_dict = dict(raw.get("eval", {}))
        eval_split = eval_dict.pop("split", "all")
        return RunConfig(
            manifest=paths.get("manifest", "manifest.jsonl"),
            archive=paths.get("archive", "features.mmlf"),
            out_dir=paths.get("out_dir", "runs"),
            checkpoint=paths.get("checkpoint"),
            model=ModelConfig.from_dict(model_dict),
            train=TrainConfig.from_dict(train_dict),
            proposal=ProposalConfig(
                tuple(prop.get("window_lengths", ProposalConfig().window_lengths)),
                prop.get("overlap_ratio", ProposalConfig().overlap_ratio),
            ),
            eval_spec=EvalSpec(
                n_values=tuple(eval_dict.get("n_values", (1, 5))),
                iou_threshold=eval_dict.get("iou_threshold", 0.5),
                nms_threshold=eval_dict.get("nms_threshold", 1.0),
            ),
            eval_split=eval_split,
            grid=SweepGrid.from_dict(raw["sweep"]) if "sweep" in raw else SweepGrid(),
            synth=SynthConfig.from_dict(raw["synth"]) if "synth" in raw else SynthConfig(),
            seed=seed,
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = parsed
    return raw


def load_run_config(path, overrides: list[str], seed: Optional[int] = None) -> tuple[RunConfig, dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = _apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
        raw.setdefault("model", {})["seed"] = seed
        raw.setdefault("train", {})["seed"] = seed
    cfg = _build_run_config(raw)
    return cfg, raw


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _run_dir(cfg: RunConfig, raw: dict) -> Path:
    out = Path(cfg.out_dir) / config_hash(raw)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- validate ----------------------------------------------------------------


def _expected_dim(cfg: ModelConfig, kind: FeatureKind) -> int:
    return cfg.dim(kind)


def collect_violations(cfg: RunConfig) -> list[str]:
    violations: list[str] = []
    try:
        archive = load_archive_index(cfg.archive)
    except (ArchiveError, OSError, ValueError) as exc:
        return [f"archive {cfg.archive}: {exc}"]
    try:
        videos, queries = parse_manifest(cfg.manifest, archive_keys=set(archive))
    except ManifestError as exc:
        return [f"manifest {cfg.manifest}: {exc}"]
    except OSError as exc:
        return [f"manifest {cfg.manifest}: {exc}"]

    model = cfg.model
    for q in queries:
        for kind_value, key in q.embedding_refs.items():
            kind = FeatureKind(kind_value)
            expected = _expected_dim(model, kind)
            rec = archive[key]
            if rec.shape[-1] != expected:
                violations.append(
                    f"query {q.query_id}: {kind_value} record {key!r} has dim "
                    f"{rec.shape[-1]}, expected {expected}"
                )
    for v in videos:
        try:
            n_clips = len(generate_proposals(v, cfg.proposal))
        except ValueError as exc:
            violations.append(f"video {v.video_id}: {exc}")
            continue
        if v.clip_feature_refs and v.clip_count != n_clips:
            violations.append(
                f"video {v.video_id}: {v.clip_count} clip refs vs {n_clips} proposals "
                f"for the configured grid"
            )
        for kind_value, keys in v.clip_feature_refs.items():
            kind = FeatureKind(kind_value)
            expected = _expected_dim(model, kind)
            for ci, key in enumerate(keys):
                rec = archive[key]
                if kind == FeatureKind.ACTIONNESS:
                    if int(np.prod(rec.shape)) != 1:
                        violations.append(
                            f"video {v.video_id} clip {ci}: actionness record {key!r} "
                            f"must hold one value, has shape {rec.shape}"
                        )
                elif rec.shape[-1] != expected:
                    violations.append(
                        f"video {v.video_id} clip {ci}: {kind_value} record {key!r} has "
                        f"dim {rec.shape[-1]}, expected {expected}"
                    )
    return violations


def cmd_validate(cfg: RunConfig, raw: dict) -> int:
    violations = collect_violations(cfg)
    if violations:
        for item in violations:
            print(item)
        print(f"INVALID: {len(violations)} violation(s)")
        return EXIT_DATA
    archive = load_archive_index(cfg.archive)
    videos, queries = parse_manifest(cfg.manifest, archive_keys=set(archive))
    print(
        f"OK: manifest {cfg.manifest} ({len(videos)} videos, {len(queries)} queries), "
        f"archive {cfg.archive} ({len(archive)} records)"
    )
    return EXIT_OK


# -- synth --------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, raw: dict) -> int:
    ds = generate(cfg.synth)
    manifest = Path(cfg.manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    archive = Path(cfg.archive)
    archive.parent.mkdir(parents=True, exist_ok=True)
    paths = write_dataset(ds, manifest.parent)
    if paths["manifest"] != manifest:
        paths["manifest"].rename(manifest)
    if paths["archive"] != archive:
        paths["archive"].rename(archive)
    print(
        f"wrote {manifest} ({len(ds.videos)} videos, {len(ds.queries)} queries) "
        f"and {archive} ({len(ds.records)} records)"
    )
    return EXIT_OK


# -- train / eval / grade -------------------------------------------------------


def _load_dataset(cfg: RunConfig, model_cfg: ModelConfig):
    archive = load_archive_index(cfg.archive)
    videos, queries = parse_manifest(cfg.manifest, archive_keys=set(archive))
    return assemble_dataset(videos, queries, archive, model_cfg, cfg.proposal)


def cmd_train(cfg: RunConfig, raw: dict) -> int:
    out = _run_dir(cfg, raw)
    ds = _load_dataset(cfg, cfg.model)
    result = train(ds, cfg.model, cfg.train)
    ckpt = out / "checkpoint.mmlf"
    save_checkpoint(
        result.params,
        cfg.model,
        ckpt,
        extra={
            "best_epoch": result.best_epoch,
            "val_r1": result.best_r1,
            "val_r5": result.best_r5,
            "train": cfg.train.to_dict(),
        },
    )
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for row in result.metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"checkpoint: {ckpt}")
    print(
        f"best epoch {result.best_epoch}: val R@1 {result.best_r1:.3f} "
        f"val R@5 {result.best_r5:.3f} ({len(result.val_query_ids)} held-out queries)"
    )
    return EXIT_OK


def _table_row_name(cfg: ModelConfig) -> str:
    key = (cfg.sentence_kind, cfg.vo_kind, cfg.use_object_features, cfg.use_captioning_features)
    for name, row in TABLE_FEATURE_MATRIX.items():
        if row == key:
            return name
    return "custom"


def cmd_eval(cfg: RunConfig, raw: dict) -> int:
    out = _run_dir(cfg, raw)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.mmlf"
    if not ckpt.exists():
        raise DataValidationError(f"checkpoint not found: {ckpt}")
    params, model_cfg, _ = load_checkpoint(ckpt)
    ds = _load_dataset(cfg, model_cfg)
    queries = ds.queries
    if cfg.eval_split != "all":
        train_q, val_q = validation_split(ds.queries, cfg.train)
        queries = val_q if cfg.eval_split == "val" else train_q
    if not queries:
        raise DataValidationError(f"no queries in split {cfg.eval_split!r}")

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
        ranked[q.query_id] = nms(records, cfg.eval_spec.nms_threshold)
    gts = {q.query_id: q.gt for q in queries}
    result = recall_at_n(
        {qid: [r.refined for r in recs] for qid, recs in ranked.items()}, gts, cfg.eval_spec
    )
    write_predictions(ranked, out / "predictions.tsv")
    write_report(result, out / "report.json")

    name = _table_row_name(model_cfg)
    obj_flag = "yes" if model_cfg.use_object_features else "-"
    cap_flag = "yes" if model_cfg.use_captioning_features else "-"
    print(
        "model | sentence embedding | vo embedding | object segmentation | video captioning | R@1 | R@5"
    )
    r1 = result.recall.get(1, float("nan"))
    r5 = result.recall.get(5, float("nan"))
    print(
        f"{name} | {model_cfg.sentence_kind.value} | {model_cfg.vo_kind.value} | "
        f"{obj_flag} | {cap_flag} | {r1:.3f} | {r5:.3f}"
    )
    print(format_table(result))
    return EXIT_OK


def cmd_grade(cfg: RunConfig, raw: dict, predictions_path) -> int:
    out = _run_dir(cfg, raw)
    videos, queries = parse_manifest(cfg.manifest)
    ranked = read_predictions(predictions_path)
    gts = {q.query_id: q.gt for q in queries}
    result = recall_at_n(ranked, gts, cfg.eval_spec)
    write_report(result, out / "grade_report.json")
    print(format_table(result))
    return EXIT_OK


# -- sweep / curves ----------------------------------------------------------------


def cmd_sweep(cfg: RunConfig, raw: dict, parallelism: int) -> int:
    out = _run_dir(cfg, raw)
    result = run_sweep(
        cfg.grid,
        cfg.model,
        cfg.train,
        cfg.manifest,
        cfg.archive,
        cfg.proposal,
        out,
        parallelism=parallelism,
        base_seed=cfg.seed,
    )
    table = out / "result_table.tsv"
    write_result_table(result.rows, table)
    curve_paths = emit_curves(result.rows, out / "curves")
    ok = sum(1 for r in result.rows if r["status"] == "ok")
    print(f"result table: {table} ({ok}/{len(result.rows)} configs ok)")
    print(f"curves: {len(curve_paths)} series under {out / 'curves'}")
    w = result.winner
    print(
        f"winner: s_obj={w['s_obj']:g} d_obj={w['d_obj']:g} d_vac={w['d_vac']:g} "
        f"R@1={w['r1']:.3f} R@5={w['r5']:.3f} (epoch {w['best_epoch']})"
    )
    return EXIT_OK


def cmd_curves(cfg: RunConfig, raw: dict, table_path) -> int:
    rows = read_result_table(table_path)
    out = _run_dir(cfg, raw) / "curves"
    paths = emit_curves(rows, out)
    winner = select_winner(rows)
    print(f"curves: {len(paths)} series under {out}")
    if winner:
        print(
            f"winner: s_obj={winner['s_obj']:g} d_obj={winner['d_obj']:g} "
            f"d_vac={winner['d_vac']:g} R@1={winner['r1']:.3f}"
        )
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentloc",
        description="Desk-scale language-driven temporal moment localization engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("validate", "check manifest/archive integrity and dim conformance"),
        ("synth", "generate a synthetic dataset"),
        ("train", "train a model and write checkpoint + metrics"),
        ("eval", "evaluate a checkpoint and write predictions + report"),
        ("grade", "grade an external prediction file"),
        ("sweep", "run the (s_obj, d_obj, d_vac) grid sweep"),
        ("curves", "emit plot data from a sweep result table"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run-config JSON path")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry (dotted path, JSON value)",
        )
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--parallelism", type=int, default=1)
        if name == "grade":
            p.add_argument("--predictions", required=True)
        if name == "curves":
            p.add_argument("--table", required=True)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg, raw = load_run_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            return cmd_validate(cfg, raw)
        if args.command == "synth":
            return cmd_synth(cfg, raw)
        if args.command == "train":
            return cmd_train(cfg, raw)
        if args.command == "eval":
            return cmd_eval(cfg, raw)
        if args.command == "grade":
            return cmd_grade(cfg, raw, args.predictions)
        if args.command == "sweep":
            return cmd_sweep(cfg, raw, args.parallelism)
        if args.command == "curves":
            return cmd_curves(cfg, raw, args.table)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ManifestError, ArchiveError, EvalError, MissingFeatureError, DataValidationError) as exc:
        log.error("data validation error: %s", exc)
        return EXIT_DATA
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDivergedError, RuntimeError) as exc:
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    except (KeyError, ValueError, OSError) as exc:
        log.error("data/runtime failure: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
