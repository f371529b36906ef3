import numpy as np
import pytest

from momentloc.data import FeatureKind
from momentloc.features import HighLevelFusionConfig
from momentloc.model import ModelConfig

# Compact feature widths so gradient checks and end-to-end runs stay fast.
TINY_DIMS = {
    "sentence_bert": 12,
    "sentence_skipthought": 12,
    "sentence_roberta": 12,
    "vo_glove": 8,
    "vo_bert": 8,
    "c3d_fc6": 10,
    "visual_activity_concepts": 9,
    "object_segmentation": 11,
    "video_captioning": 7,
}


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        sentence_kind=FeatureKind.SENTENCE_BERT,
        vo_kind=FeatureKind.VO_GLOVE,
        use_object_features=True,
        use_captioning_features=True,
        common_dim=6,
        hidden_dim=5,
        fusion=HighLevelFusionConfig(s_obj=0.5, d_obj=0.0, d_vac=0.0),
        s_cap=0.5,
        dims=TINY_DIMS,
        seed=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_clip_features(cfg: ModelConfig, rng: np.random.Generator, frames: int = 3) -> dict:
    return {
        "c3d_fc6": rng.normal(size=cfg.dim(FeatureKind.C3D_FC6)),
        "video_captioning": rng.normal(size=(frames, cfg.dim(FeatureKind.VIDEO_CAPTIONING))),
        "object_segmentation": rng.random((frames, cfg.dim(FeatureKind.OBJECT_SEGMENTATION))),
        "visual_activity_concepts": rng.normal(size=cfg.dim(FeatureKind.VISUAL_ACTIVITY_CONCEPTS)),
        "actionness": np.array([rng.random()]),
    }


def random_query_features(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    return {
        cfg.sentence_kind.value: rng.normal(size=cfg.dim(cfg.sentence_kind)),
        cfg.vo_kind.value: rng.normal(size=cfg.dim(cfg.vo_kind)),
    }


# -- acceptance reporting ------------------------------------------------

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(criterion: str, detail: str = ""):
    _ACCEPTANCE_RESULTS[criterion] = detail


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    tr = terminalreporter
    acceptance = [r for r in tr.stats.get("passed", []) if "test_acceptance" in r.nodeid]
    failed = [r for r in tr.stats.get("failed", []) if "test_acceptance" in r.nodeid]
    if not acceptance and not failed:
        return
    tr.write_sep("-", "acceptance criteria")
    for rep in sorted(acceptance, key=lambda r: r.nodeid):
        name = rep.nodeid.split("::")[-1]
        detail = _ACCEPTANCE_RESULTS.get(name, "")
        tr.write_line(f"PASS {name}" + (f"  [{detail}]" if detail else ""))
    for rep in sorted(failed, key=lambda r: r.nodeid):
        tr.write_line(f"FAIL {rep.nodeid.split('::')[-1]}")
