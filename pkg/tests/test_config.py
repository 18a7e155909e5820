import numpy as np
import pytest

from mvmap.config import ARTIFACTS_ENV, PipelineConfig


def test_ini_roundtrip():
    cfg = PipelineConfig()
    cfg.nerf.lambda_tv = 2.5e-5
    cfg.scene.test = (31, 32)
    back = PipelineConfig.from_ini(cfg.to_ini())
    assert back.to_ini() == cfg.to_ini()
    assert back.scene.test == (31, 32) and back.nerf.lambda_tv == 2.5e-5
    assert back.digest() == cfg.digest()


def test_partial_file_keeps_defaults():
    cfg = PipelineConfig.from_ini("[run]\nseed = 7\n[uncertainty]\nclip_len = 3\n")
    assert cfg.seed == 7 and cfg.uncertainty.clip_len == 3
    assert cfg.uncertainty.kl_weight == PipelineConfig().uncertainty.kl_weight


@pytest.mark.parametrize("text", [
    "[run]\nseed = x\n",
    "[bogus]\na = 1\n",
    "[nerf]\nlambda_tv = -1\n",
    "[nerf]\nunknown_key = 1\n",
    "[scene]\ntrain = 21\ntest = 21\n",
    "no section header",
    "[nerf]\nseed = 3\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ValueError):
        PipelineConfig.from_ini(text)


def test_stage_seeds_are_distinct_and_follow_the_master_seed():
    a, b = PipelineConfig(seed=0), PipelineConfig(seed=1)
    seeds = {a.stage_seed("nerf", s) for s in (11, 12, 21)} | {a.stage_seed("onboard"), a.stage_seed("uncertainty")}
    assert len(seeds) == 5
    assert a.stage_seed("nerf", 11) == PipelineConfig(seed=0).stage_seed("nerf", 11)
    assert a.stage_seed("nerf", 11) != b.stage_seed("nerf", 11)


def test_artifact_dir_resolution(monkeypatch):
    cfg = PipelineConfig()
    monkeypatch.delenv(ARTIFACTS_ENV, raising=False)
    assert str(cfg.resolved_artifacts()) == "artifacts"
    monkeypatch.setenv(ARTIFACTS_ENV, "/tmp/elsewhere")
    assert str(cfg.resolved_artifacts()) == "/tmp/elsewhere"
    assert str(cfg.resolved_artifacts("/x")) == "/x"


def test_digest_changes_with_content():
    a = PipelineConfig()
    b = PipelineConfig()
    b.onboard.steps = 10
    assert a.digest() != b.digest()
