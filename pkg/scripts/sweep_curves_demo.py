#!/usr/bin/env python3
"""Desk-scale sweep demo: a reduced (s_obj, d_obj, d_vac) grid on a small
synthetic dataset, run through the CLI, followed by plot-data emission.

Run:
    python scripts/sweep_curves_demo.py [workdir] [parallelism]

The full 8x4x4 grid works the same way; this demo trims it so the whole
thing finishes in about a minute on one core.
"""
import json
import sys
from pathlib import Path

from momentloc.cli import config_hash, load_run_config, main

DIMS = {
    "sentence_bert": 32,
    "vo_glove": 24,
    "c3d_fc6": 32,
    "visual_activity_concepts": 32,
    "video_captioning": 24,
    "object_segmentation": 64,
}


def run(workdir: Path, parallelism: int) -> int:
    workdir.mkdir(parents=True, exist_ok=True)
    config = {
        "paths": {
            "manifest": str(workdir / "data" / "manifest.jsonl"),
            "archive": str(workdir / "data" / "features.mmlf"),
            "out_dir": str(workdir / "runs"),
        },
        "model": {"common_dim": 16, "hidden_dim": 16, "dims": DIMS},
        "train": {"epochs": 8, "learning_rate": 0.1, "batch_size": 64},
        "proposal": {"window_lengths": [6.0], "overlap_ratio": 0.8},
        "synth": {
            "n_videos": 20,
            "n_queries": 80,
            "n_verbs": 8,
            "n_objects": 10,
            "dims": DIMS,
        },
        "sweep": {
            "s_obj_values": [0.0, 0.005, 0.05, 0.5],
            "d_obj_values": [0.0, 0.5],
            "d_vac_values": [0.0],
        },
        "seed": 0,
    }
    cfg_path = workdir / "sweep.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")

    rc = main(["synth", "--config", str(cfg_path)])
    if rc != 0:
        return rc
    rc = main(["sweep", "--config", str(cfg_path), "--parallelism", str(parallelism)])
    if rc != 0:
        return rc

    _, raw = load_run_config(str(cfg_path), [])
    run_dir = workdir / "runs" / config_hash(raw)
    print("\ncurve files:")
    for path in sorted((run_dir / "curves").glob("*.tsv")):
        print(f"  {path}")
    return 0


if __name__ == "__main__":
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_runs/sweep")
    parallelism = int(sys.argv[2]) if len(sys.argv) > 2 else 2
    sys.exit(run(workdir, parallelism))
