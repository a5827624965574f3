import json

import pytest
import torch

from multishot.config import ModelConfig, tiny_config
from multishot.errors import IncompatibleCheckpoint
from multishot.model import StoryModel, read_checkpoint_header


def test_same_config_same_weights(tiny_cfg):
    a, b = StoryModel(tiny_cfg).snapshot(), StoryModel(tiny_cfg).snapshot()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = StoryModel(tiny_config(seed=1)).snapshot()
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    model = StoryModel(tiny_cfg)
    with torch.no_grad():
        model.backbone.queries.add_(1.0)
    model.save(tmp_path / "m.safetensors", extra={"stage": "align"})
    loaded = StoryModel.load(tmp_path / "m.safetensors", expect=tiny_cfg)
    a, b = model.snapshot(), loaded.snapshot()
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    header = read_checkpoint_header(tmp_path / "m.safetensors")
    assert header["config_hash"] == tiny_cfg.hash()
    assert json.loads(header["config"]) == tiny_cfg.to_dict()
    assert header["tensors"]["backbone.queries"] == [tiny_cfg.query_len, tiny_cfg.d_mllm]


def test_checkpoint_rejects_other_config(tmp_path, tiny_cfg):
    StoryModel(tiny_cfg).save(tmp_path / "m.safetensors")
    with pytest.raises(IncompatibleCheckpoint):
        StoryModel.load(tmp_path / "m.safetensors", expect=tiny_config(d_cond=8))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.safetensors").write_bytes(b"not a checkpoint")
    with pytest.raises(IncompatibleCheckpoint):
        StoryModel.load(tmp_path / "bad.safetensors")
    with pytest.raises(IncompatibleCheckpoint):
        StoryModel.load(tmp_path / "missing.safetensors")


def test_config_round_trip_and_unknown_keys():
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    assert cfg.query_len == 64 and cfg.d_cond == 128 and cfg.adapter_layers == 12


def test_float64_checkpoint_keeps_dtype(tmp_path, tiny_cfg):
    model = StoryModel(tiny_cfg).double()
    model.save(tmp_path / "d.safetensors")
    assert StoryModel.load(tmp_path / "d.safetensors").dtype == torch.float64
