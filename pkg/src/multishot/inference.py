"""Autoregressive multi-shot generation.

Each shot is generated from the reference, all captions so far and the last
frames of the shots already generated; its own last frame and caption then
join the context for the next shot.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import EmptyShot, LengthMismatch
from .generator import sample
from .model import StoryModel


@dataclass
class GenerationContext:
    visual: list[np.ndarray] = field(default_factory=list)
    textual: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.visual)

    def append(self, frame: np.ndarray, caption: str) -> None:
        self.visual.append(frame)
        self.textual.append(caption)


@dataclass(frozen=True)
class StoryRequest:
    reference: np.ndarray
    captions: tuple[str, ...]
    seed: int = 0
    guidance_scale: float = 6.0

    def __post_init__(self):
        if len(self.captions) < 1:
            raise LengthMismatch("a story request needs at least one caption")


@dataclass
class StoryOutput:
    shots: list[torch.Tensor]
    seeds: list[int]
    context_sizes: list[tuple[int, int]]  # (|visual|, |textual|) seen by each shot
    context_frame_hashes: list[str]


def to_uint8(x: torch.Tensor | np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] by affine map, rounding half away from zero."""
    v = np.asarray(x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float64)
    v = (np.clip(v, -1.0, 1.0) + 1.0) * 127.5
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.uint8)


def last_frame(shot: torch.Tensor) -> np.ndarray:
    if shot.ndim != 4 or shot.shape[0] < 1:
        raise EmptyShot(f"shot has no frames (shape {tuple(shot.shape)})")
    return to_uint8(shot[-1])


def frame_hash(frame: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(frame).tobytes()).hexdigest()[:16]


@torch.no_grad()
def unconditional_signal(model: StoryModel, reference_like: np.ndarray) -> torch.Tensor:
    """Condition for the guidance branch: blank reference, empty caption, no context."""
    seq = model.backbone.build_sequence(np.zeros_like(reference_like), [""], [])
    return model.backbone.compute_condition(seq, 0).values


@torch.no_grad()
def generate_story(request: StoryRequest, model: StoryModel) -> StoryOutput:
    model.eval()
    backbone = model.backbone
    uncond = unconditional_signal(model, request.reference)
    context = GenerationContext()
    out = StoryOutput([], [], [], [])
    for i, caption in enumerate(request.captions):
        captions = context.textual + [caption]
        seq = backbone.build_sequence(request.reference, captions, context.visual)
        cond = backbone.compute_condition(seq, i).values
        seed = request.seed + i
        shot = sample(
            model.denoiser, model.schedule, cond, uncond, request.guidance_scale, seed,
            model.denoiser.expected_shape, dtype=model.dtype,
        )
        out.shots.append(shot)
        out.seeds.append(seed)
        out.context_sizes.append((len(context.visual), len(context.textual)))
        frame = last_frame(shot)
        context.append(frame, caption)
        out.context_frame_hashes.append(frame_hash(frame))
    return out


def read_captions(lines: Sequence[str]) -> tuple[str, ...]:
    return tuple(line.strip() for line in lines if line.strip())
