from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Toy-scale sizes for the condition backbone and the video denoiser."""

    image_size: int = 32
    frames: int = 8
    # condition backbone
    d_mllm: int = 128
    layers: int = 4
    heads: int = 4
    mllm_patch: int = 8
    max_positions: int = 1024
    query_len: int = 64
    adapter_layers: int = 12
    d_cond: int = 128
    lora_rank: int = 8
    lora_alpha: float = 16.0
    text_dim: int = 64
    # video denoiser
    gen_width: int = 128
    gen_blocks: int = 4
    gen_heads: int = 4
    gen_patch: int = 4
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tiny_config(**overrides) -> ModelConfig:
    """Two-layer everything; used by gradient checks and fast tests."""
    base = dict(
        image_size=16, frames=2, d_mllm=32, layers=2, heads=2, mllm_patch=8, max_positions=256,
        query_len=4, adapter_layers=2, d_cond=16, lora_rank=2, lora_alpha=4.0, text_dim=16,
        gen_width=32, gen_blocks=2, gen_heads=2, gen_patch=8, timesteps=10,
    )
    base.update(overrides)
    return ModelConfig(**base)
