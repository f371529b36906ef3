"""Three-axis hyperparameter grid over (S_obj, D_obj, D_vac): enumeration,
parallel execution over a worker pool, result aggregation, winner selection,
and plot-data emission.

Configs are independent jobs; each owns a seed derived from the base seed
and its grid index, so results are identical at any parallelism degree.
The aggregator is the sole writer of the result table. A failing config is
recorded as failed and excluded from winner selection; the sweep itself
fails only when every config does.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .archive import load_archive_index
from .data import parse_manifest
from .evaluation import REFERENCE_BASELINE_R1, REFERENCE_BASELINE_R5
from .features import HighLevelFusionConfig
from .model import ModelConfig, save_checkpoint
from .proposals import ProposalConfig
from .training import TrainConfig, assemble_dataset, train
from .util import derive_seed

log = logging.getLogger(__name__)

DEFAULT_S_OBJ = (0.0, 0.005, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
DEFAULT_D_OBJ = (0.0, 0.1, 0.25, 0.5)
DEFAULT_D_VAC = (0.0, 0.1, 0.25, 0.5)

RESULT_COLUMNS = (
    "s_obj",
    "d_obj",
    "d_vac",
    "best_epoch",
    "r1",
    "r5",
    "status",
    "checkpoint_path",
)


@dataclass(frozen=True)
class SweepGrid:
    s_obj_values: tuple[float, ...] = DEFAULT_S_OBJ
    d_obj_values: tuple[float, ...] = DEFAULT_D_OBJ
    d_vac_values: tuple[float, ...] = DEFAULT_D_VAC

    def __post_init__(self):
        for name in ("s_obj_values", "d_obj_values", "d_vac_values"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, values)

    def to_dict(self) -> dict:
        return {
            "s_obj_values": list(self.s_obj_values),
            "d_obj_values": list(self.d_obj_values),
            "d_vac_values": list(self.d_vac_values),
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SweepGrid":
        return cls(**{k: tuple(v) for k, v in dict(obj).items()})


def enumerate_grid(grid: SweepGrid) -> list[tuple[float, float, float]]:
    """Cartesian product in lexicographic axis order (s_obj, d_obj, d_vac)."""
    return [
        (s, dob, dv)
        for s in grid.s_obj_values
        for dob in grid.d_obj_values
        for dv in grid.d_vac_values
    ]


@dataclass
class SweepResult:
    rows: list[dict]
    winner: Optional[dict]


def select_winner(rows: Sequence[Mapping]) -> Optional[dict]:
    """Max R@1; ties prefer higher R@5, then smaller s_obj/d_obj/d_vac.

    Pure function of the result table so reselection over a parsed table
    reproduces the winner.
    """
    ok = [dict(r) for r in rows if r["status"] == "ok"]
    if not ok:
        return None
    return min(
        ok, key=lambda r: (-r["r1"], -r["r5"], r["s_obj"], r["d_obj"], r["d_vac"])
    )


def _run_one_config(args: tuple) -> dict:
    (
        index,
        s_obj,
        d_obj,
        d_vac,
        model_cfg_dict,
        train_cfg_dict,
        proposal_dict,
        manifest_path,
        archive_path,
        out_dir,
        base_seed,
    ) = args
    checkpoint_rel = f"config_{index:03d}.mmlf"
    try:
        seed = derive_seed(base_seed, index)
        model_cfg = ModelConfig.from_dict(model_cfg_dict)
        model_cfg = replace(
            model_cfg,
            fusion=HighLevelFusionConfig(s_obj=s_obj, d_obj=d_obj, d_vac=d_vac),
            seed=seed,
        )
        train_cfg = replace(TrainConfig.from_dict(train_cfg_dict), seed=seed)
        archive = load_archive_index(archive_path)
        videos, queries = parse_manifest(manifest_path)
        proposal = _proposal_from_dict(proposal_dict)
        ds = assemble_dataset(videos, queries, archive, model_cfg, proposal)
        result = train(ds, model_cfg, train_cfg)
        save_checkpoint(
            result.params,
            model_cfg,
            Path(out_dir) / checkpoint_rel,
            extra={
                "best_epoch": result.best_epoch,
                "val_r1": result.best_r1,
                "val_r5": result.best_r5,
            },
        )
        return {
            "s_obj": s_obj,
            "d_obj": d_obj,
            "d_vac": d_vac,
            "best_epoch": result.best_epoch,
            "r1": result.best_r1,
            "r5": result.best_r5,
            "status": "ok",
            "checkpoint_path": checkpoint_rel,
        }
    except Exception:
        log.exception("sweep config %d (s_obj=%s d_obj=%s d_vac=%s) failed", index, s_obj, d_obj, d_vac)
        return {
            "s_obj": s_obj,
            "d_obj": d_obj,
            "d_vac": d_vac,
            "best_epoch": 0,
            "r1": 0.0,
            "r5": 0.0,
            "status": "failed",
            "checkpoint_path": "",
        }


def _proposal_from_dict(obj) -> ProposalConfig:
    if not obj:
        return ProposalConfig()
    return ProposalConfig(tuple(obj["window_lengths"]), obj["overlap_ratio"])


def run_sweep(
    grid: SweepGrid,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    manifest_path,
    archive_path,
    proposal: ProposalConfig,
    out_dir,
    parallelism: int = 1,
    base_seed: int = 0,
) -> SweepResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = enumerate_grid(grid)
    proposal_dict = {
        "window_lengths": list(proposal.window_lengths),
        "overlap_ratio": proposal.overlap_ratio,
    }
    jobs = [
        (
            i,
            s,
            dob,
            dv,
            model_cfg.to_dict(),
            train_cfg.to_dict(),
            proposal_dict,
            str(manifest_path),
            str(archive_path),
            str(out),
            base_seed,
        )
        for i, (s, dob, dv) in enumerate(configs)
    ]
    if parallelism <= 1:
        rows = [_run_one_config(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(_run_one_config, jobs))
    if all(r["status"] == "failed" for r in rows):
        raise RuntimeError("every sweep config failed")
    return SweepResult(rows=rows, winner=select_winner(rows))


def write_result_table(rows: Sequence[Mapping], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("\t".join(RESULT_COLUMNS) + "\n")
        for r in rows:
            fh.write(
                "\t".join(
                    repr(r[c]) if isinstance(r[c], float) else str(r[c])
                    for c in RESULT_COLUMNS
                )
                + "\n"
            )


def read_result_table(path) -> list[dict]:
    rows = []
    with open(Path(path), "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"bad result table header {header}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            rows.append(
                {
                    "s_obj": float(parts[0]),
                    "d_obj": float(parts[1]),
                    "d_vac": float(parts[2]),
                    "best_epoch": int(parts[3]),
                    "r1": float(parts[4]),
                    "r5": float(parts[5]),
                    "status": parts[6],
                    "checkpoint_path": parts[7],
                }
            )
    return rows


def emit_curves(rows: Sequence[Mapping], out_dir) -> list[Path]:
    """One (s_obj, value) series per d_obj value at fixed d_vac = 0, per
    metric, as TSV ready for any plotting tool. Each file carries the
    full-scale reference baseline as a comment for the horizontal line."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    references = {"r1": REFERENCE_BASELINE_R1, "r5": REFERENCE_BASELINE_R5}
    d_obj_values = sorted({r["d_obj"] for r in rows})
    for metric in ("r1", "r5"):
        for d_obj in d_obj_values:
            series = sorted(
                (r["s_obj"], r[metric])
                for r in rows
                if r["d_obj"] == d_obj and r["d_vac"] == 0.0 and r["status"] == "ok"
            )
            path = out / f"curve_{metric}_dobj{d_obj:g}.tsv"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(f"# reference_baseline_{metric} = {references[metric]}\n")
                fh.write(f"s_obj\t{metric}\n")
                for s_obj, value in series:
                    fh.write(f"{s_obj!r}\t{value!r}\n")
            paths.append(path)
    return paths
