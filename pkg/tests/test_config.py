import json

import pytest

from gsfuse.config import PipelineConfig
from gsfuse.errors import ConfigError
from gsfuse.gafeat import ConvConfig, pipeline_conv_config


def test_defaults_roundtrip(tmp_path):
    cfg = PipelineConfig()
    assert cfg.conv == pipeline_conv_config() and cfg.conv != ConvConfig()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(path).to_dict() == cfg.to_dict()


def test_partial_document(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"fusion": {"alpha": 0.1}, "threads": 2}))
    cfg = PipelineConfig.load(path)
    assert cfg.fusion.alpha == 0.1 and cfg.fusion.beta == 0.4 and cfg.threads == 2


@pytest.mark.parametrize("doc", [[], {"bogus": {}}, {"skeleton": {"bogus": 1}}, {"skeleton": 3},
                                 {"registration": {"ransac_iters": 0}}, {"conv": {"radius_mode": "huge"}}])
def test_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(doc)


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_overrides_skip_none_and_keep_original():
    base = PipelineConfig()
    new = base.with_overrides({"skeleton": {"lam": 2.0, "dbscan_eps": None}, "fusion": {}})
    assert new.skeleton.lam == 2.0 and new.skeleton.dbscan_eps == base.skeleton.dbscan_eps
    assert base.skeleton.lam != 2.0
    with pytest.raises(ConfigError):
        base.with_overrides({"fusion": {"tau": 7.0}})
