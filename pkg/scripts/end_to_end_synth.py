#!/usr/bin/env python3
"""End-to-end demo on a synthetic dataset: generate, validate, train,
evaluate, then grade the model's own predictions.

Run:
    python scripts/end_to_end_synth.py [workdir]

Everything is seeded; rerunning into the same workdir reproduces identical
artifacts.
"""
import json
import sys
from pathlib import Path

from momentloc.cli import config_hash, load_run_config, main

DIMS = {
    "sentence_bert": 48,
    "vo_glove": 32,
    "c3d_fc6": 64,
    "visual_activity_concepts": 64,
    "video_captioning": 64,
    "object_segmentation": 150,
}


def run(workdir: Path) -> int:
    workdir.mkdir(parents=True, exist_ok=True)
    config = {
        "paths": {
            "manifest": str(workdir / "data" / "manifest.jsonl"),
            "archive": str(workdir / "data" / "features.mmlf"),
            "out_dir": str(workdir / "runs"),
        },
        "model": {
            "common_dim": 32,
            "hidden_dim": 32,
            "dims": DIMS,
            "fusion": {"s_obj": 0.005, "d_obj": 0.5, "d_vac": 0.0},
        },
        "train": {"epochs": 30, "learning_rate": 0.1, "batch_size": 64},
        "proposal": {"window_lengths": [6.0], "overlap_ratio": 0.8},
        "eval": {"n_values": [1, 5], "iou_threshold": 0.5, "nms_threshold": 1.0},
        "synth": {"dims": DIMS},
        "seed": 0,
    }
    cfg_path = workdir / "run.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")

    for step in (
        ["synth", "--config", str(cfg_path)],
        ["validate", "--config", str(cfg_path)],
        ["train", "--config", str(cfg_path)],
        ["eval", "--config", str(cfg_path)],
    ):
        print(f"\n== momentloc {' '.join(step[:1])} ==")
        rc = main(step)
        if rc != 0:
            return rc

    _, raw = load_run_config(str(cfg_path), [])
    preds = workdir / "runs" / config_hash(raw) / "predictions.tsv"
    print("\n== momentloc grade ==")
    return main(["grade", "--config", str(cfg_path), "--predictions", str(preds)])


if __name__ == "__main__":
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_runs/end_to_end")
    sys.exit(run(workdir))
