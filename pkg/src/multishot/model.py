"""Backbone + denoiser + frozen text-encoder stub, and their checkpoint format.

A checkpoint is a safetensors file: a JSON header (tensor names, shapes, dtypes)
followed by the flat tensor bytes. The header metadata carries the model config
and its hash.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
import torch.nn as nn
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from . import __version__
from .backbone import ConditionBackbone, TextEncoderStub, Vocabulary
from .config import ModelConfig
from .errors import IncompatibleCheckpoint
from .generator import NoiseSchedule, VideoDenoiser

CHECKPOINT_FORMAT = "multishot-ckpt-1"

TRAINABLE_SETS = ("adapter", "queries", "mllm_lora", "diffusion_lora", "diffusion_base")


def parameter_set(name: str) -> str | None:
    """Which trainable set a parameter belongs to; None for never-trained weights."""
    if name.startswith("backbone.adapter."):
        return "adapter"
    if name == "backbone.queries":
        return "queries"
    if name.startswith("backbone.") and ".lora_" in name:
        return "mllm_lora"
    if name.startswith("denoiser.") and ".lora_" in name:
        return "diffusion_lora"
    if name.startswith("denoiser."):
        return "diffusion_base"
    return None


class StoryModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        # identical config -> identical initial weights
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.cfg.seed)
            vocab = Vocabulary.default()
            self.backbone = ConditionBackbone(self.cfg, vocab)
            self.denoiser = VideoDenoiser(self.cfg)
            self.text_encoder = TextEncoderStub(self.cfg, vocab)
        self.schedule = NoiseSchedule.from_config(self.cfg)

    @property
    def vocab(self) -> Vocabulary:
        return self.backbone.vocab

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.dtype

    def set_trainable(self, sets) -> list[nn.Parameter]:
        sets = set(sets)
        unknown = sets - set(TRAINABLE_SETS)
        if unknown:
            raise ValueError(f"unknown trainable sets: {sorted(unknown)}")
        chosen = []
        for name, p in self.named_parameters():
            on = parameter_set(name) in sets
            p.requires_grad_(on)
            if on:
                chosen.append(p)
        return chosen

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().contiguous().clone() for k, v in self.state_dict().items()}
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": __version__,
            "config": json.dumps(self.cfg.to_dict(), sort_keys=True),
            "config_hash": self.cfg.hash(),
        }
        if extra:
            meta["extra"] = json.dumps(extra, sort_keys=True)
        save_file(tensors, str(path), metadata=meta)

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> "StoryModel":
        path = Path(path)
        if not path.is_file():
            raise IncompatibleCheckpoint(f"checkpoint not found: {path}")
        try:
            from safetensors import safe_open

            with safe_open(str(path), framework="pt") as fh:
                meta = fh.metadata() or {}
            tensors = load_file(str(path))
        except (SafetensorError, OSError, ValueError) as exc:
            raise IncompatibleCheckpoint(f"{path}: unreadable checkpoint ({exc})") from None
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise IncompatibleCheckpoint(f"{path}: not a {CHECKPOINT_FORMAT} file")
        try:
            cfg = ModelConfig.from_dict(json.loads(meta["config"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise IncompatibleCheckpoint(f"{path}: bad config header ({exc})") from None
        if cfg.hash() != meta.get("config_hash"):
            raise IncompatibleCheckpoint(f"{path}: config hash mismatch")
        if expect is not None and expect.hash() != cfg.hash():
            raise IncompatibleCheckpoint(f"{path}: config {cfg.hash()} differs from expected {expect.hash()}")
        model = cls(cfg)
        dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
        model.to(dtype)
        missing, unexpected = model.load_state_dict(tensors, strict=False)
        if missing or unexpected:
            raise IncompatibleCheckpoint(f"{path}: missing {missing[:3]} unexpected {unexpected[:3]}")
        return model


def read_checkpoint_header(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = dict(fh.metadata() or {})
        meta["tensors"] = {k: list(fh.get_slice(k).get_shape()) for k in fh.keys()}
    return meta
