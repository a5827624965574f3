"""Four-stage training schedule with per-stage trainability masks and CFG dropout.

Stages:
    align         adapter + queries; MSE to the frozen text-encoder stub
    single_shot   + backbone LoRA; diffusion loss, independent dropout
    multi_shot    same sets; 3-shot teacher-forced windows, joint dropout
    lora_enhance  denoiser LoRA only; 3-shot windows

``pretrain_generator`` trains the base denoiser on text-stub conditions and
stands in for starting from a pretrained video model.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import ConditionSignal
from .config import ModelConfig
from .errors import DatasetTooSmall, IncompatibleCheckpoint, IntegrityError, ShapeMismatch, UnknownStage
from .generator import diffusion_loss
from .model import StoryModel
from .schema import DatasetManifest, load_reference, load_shot_frames, load_stories

log = logging.getLogger(__name__)

STAGES = ("align", "single_shot", "multi_shot", "lora_enhance")
STAGE_ALIASES = {"single": "single_shot", "multi": "multi_shot", "lora": "lora_enhance"}

# full-scale schedule; desk runs scale the step counts
FULL_SCALE_STEPS = {"align": 1_800_000, "single_shot": 17_000, "multi_shot": 8_000, "lora_enhance": 1_500}
FULL_SCALE_BATCH = {"align": 32, "single_shot": 24, "multi_shot": 8, "lora_enhance": 2}
DEFAULT_STEP_SCALE = 0.01


@dataclass(frozen=True)
class DropoutProtocol:
    mode: str = "none"  # independent | joint | none
    p: float = 0.0

    def __post_init__(self):
        if self.mode not in ("independent", "joint", "none"):
            raise ValueError(f"unknown dropout mode {self.mode!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability must be in [0, 1], got {self.p}")


@dataclass(frozen=True)
class StageConfig:
    stage_id: str
    trainable_sets: frozenset[str]
    dropout: DropoutProtocol
    shots_per_sample: int
    batch_size: int
    steps: int
    learning_rate: float
    momentum: float = 0.9
    grad_clip: float | None = 1.0

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "trainable_sets": sorted(self.trainable_sets),
            "dropout": {"mode": self.dropout.mode, "p": self.dropout.p},
            "shots_per_sample": self.shots_per_sample,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "grad_clip": self.grad_clip,
        }


_STAGE_TABLE = {
    "align": (frozenset({"adapter", "queries"}), DropoutProtocol("none", 0.0), 1, 0.05),
    "single_shot": (frozenset({"adapter", "queries", "mllm_lora"}), DropoutProtocol("independent", 0.05), 1, 0.02),
    "multi_shot": (frozenset({"adapter", "queries", "mllm_lora"}), DropoutProtocol("joint", 0.05), 3, 0.02),
    "lora_enhance": (frozenset({"diffusion_lora"}), DropoutProtocol("none", 0.0), 3, 0.01),
}


def canonical_stage(stage_id: str) -> str:
    stage_id = STAGE_ALIASES.get(stage_id, stage_id)
    if stage_id not in STAGES:
        raise UnknownStage(f"unknown stage {stage_id!r}; expected one of {', '.join(STAGES)}")
    return stage_id


def stage_config(
    stage_id: str,
    step_scale: float = DEFAULT_STEP_SCALE,
    *,
    steps: int | None = None,
    batch_size: int | None = None,
    learning_rate: float | None = None,
) -> StageConfig:
    stage_id = canonical_stage(stage_id)
    sets, dropout, shots, lr = _STAGE_TABLE[stage_id]
    n_steps = steps if steps is not None else max(1, int(round(FULL_SCALE_STEPS[stage_id] * step_scale)))
    return StageConfig(
        stage_id=stage_id,
        trainable_sets=sets,
        dropout=dropout,
        shots_per_sample=shots,
        batch_size=batch_size or FULL_SCALE_BATCH[stage_id],
        steps=n_steps,
        learning_rate=lr if learning_rate is None else learning_rate,
    )


# ---------------------------------------------------------------------------
# random streams


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent numpy stream derived from a root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def torch_substream(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + zlib.crc32(name.encode()))


# ---------------------------------------------------------------------------
# dropout


@dataclass
class ConditioningInputs:
    reference: np.ndarray
    captions: list[str]
    reference_blanked: bool = False
    captions_blanked: bool = False


def blank_reference(reference: np.ndarray) -> np.ndarray:
    return np.zeros_like(reference)


def apply_dropout(sample: ConditioningInputs, protocol: DropoutProtocol, rng: np.random.Generator) -> ConditioningInputs:
    """Blank the reference and/or the captions according to ``protocol``.

    Independent mode draws once per modality; joint mode draws once for both.
    """
    if protocol.mode == "none":
        return replace(sample, captions=list(sample.captions))
    if protocol.mode == "independent":
        drop_ref = rng.random() < protocol.p
        drop_cap = rng.random() < protocol.p
    else:
        drop_ref = drop_cap = rng.random() < protocol.p
    return ConditioningInputs(
        reference=blank_reference(sample.reference) if drop_ref else sample.reference,
        captions=[""] * len(sample.captions) if drop_cap else list(sample.captions),
        reference_blanked=sample.reference_blanked or drop_ref,
        captions_blanked=sample.captions_blanked or drop_cap,
    )


# ---------------------------------------------------------------------------
# data


@dataclass
class ShotRecord:
    story_id: str
    caption: str
    video: torch.Tensor  # (F, H, W, 3) in [-1, 1], resampled to the model's frame count
    first_frame: np.ndarray  # uint8
    last_frame: np.ndarray  # uint8


@dataclass
class StoryRecord:
    story_id: str
    reference: np.ndarray | None
    shots: list[ShotRecord] = field(default_factory=list)


def resample_indices(n: int, frames: int) -> np.ndarray:
    return np.rint(np.linspace(0, n - 1, frames)).astype(int)


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(frames.astype(np.float64) / 127.5 - 1.0)


class TrainingData:
    """Shots of a manifest held in memory, with frames resampled to the model length."""

    def __init__(self, manifest: DatasetManifest, cfg: ModelConfig, require_references: bool = True):
        self.stories: list[StoryRecord] = []
        for story in load_stories(manifest):
            ref_path = manifest.reference_path(story.story_id, story.characters[0].character_id) if story.characters else None
            if ref_path is not None and ref_path.is_file():
                reference = load_reference(manifest, story)
            elif require_references:
                raise IntegrityError(f"story {story.story_id!r} has no reference image")
            else:
                reference = None
            rec = StoryRecord(story.story_id, reference)
            for shot in story.shots:
                frames = load_shot_frames(manifest, story, shot)
                if frames.shape[1:3] != (cfg.image_size, cfg.image_size):
                    raise IncompatibleCheckpoint(
                        f"dataset frames are {frames.shape[1]}x{frames.shape[2]}, model expects {cfg.image_size}x{cfg.image_size}"
                    )
                picked = frames[resample_indices(len(frames), cfg.frames)]
                rec.shots.append(
                    ShotRecord(story.story_id, shot.descriptive_caption, frames_to_tensor(picked), frames[0], frames[-1])
                )
            self.stories.append(rec)

    @property
    def shots(self) -> list[ShotRecord]:
        return [s for st in self.stories for s in st.shots]

    def windows(self, length: int) -> list[tuple[StoryRecord, int]]:
        return [(st, k) for st in self.stories for k in range(len(st.shots) - length + 1)]


class BatchSampler:
    """Epoch-wise shuffling without replacement; deterministic for a given rng."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.order:
                self.order = self.rng.permutation(self.n).tolist()
            out.append(self.order.pop(0))
        return out


# ---------------------------------------------------------------------------
# losses


def alignment_loss(model: StoryModel, batch: Sequence[tuple[np.ndarray, str]]) -> torch.Tensor:
    """MSE between the backbone condition and the text-stub embedding of the caption.

    The first frame occupies the reference slot; there is no earlier context.
    """
    losses = []
    for first_frame, caption in batch:
        seq = model.backbone.build_sequence(first_frame, [caption], [])
        cond = model.backbone.compute_condition(seq, 0).values
        with torch.no_grad():
            target = model.text_encoder(caption).to(cond.dtype)
        if cond.shape != target.shape:
            raise ShapeMismatch(f"condition {tuple(cond.shape)} vs target {tuple(target.shape)}")
        losses.append(torch.mean((cond - target) ** 2))
    return torch.stack(losses).mean()


def alignment_step(model: StoryModel, batch, optimizer=None) -> float:
    loss = alignment_loss(model, batch)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def sequence_conditions(
    model: StoryModel, inputs: ConditioningInputs, context_frames: Sequence[np.ndarray]
) -> list[ConditionSignal]:
    seq = model.backbone.build_sequence(inputs.reference, inputs.captions, list(context_frames))
    return model.backbone.compute_conditions(seq)


def multishot_loss(
    model: StoryModel,
    videos: Sequence[torch.Tensor],
    conds: Sequence[torch.Tensor],
    steps: Sequence[int],
    noises: Sequence[torch.Tensor],
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Sum of per-shot diffusion losses; returns the total and the parts."""
    parts = [
        diffusion_loss(model.denoiser, model.schedule, v.to(model.dtype), c, int(t), e)
        for v, c, t, e in zip(videos, conds, steps, noises)
    ]
    return torch.stack(parts).sum(), parts


# ---------------------------------------------------------------------------
# driver


@dataclass
class TrainResult:
    model: StoryModel
    losses: list[float]
    config: StageConfig | None = None

    def window_mean(self, which: str) -> float:
        """Mean loss over the first or last tenth of the run (at least one step)."""
        w = max(1, len(self.losses) // 10)
        chunk = self.losses[:w] if which == "initial" else self.losses[-w:]
        return math.fsum(chunk) / len(chunk)

    @property
    def initial_loss(self) -> float:
        return self.window_mean("initial")

    @property
    def final_loss(self) -> float:
        return self.window_mean("final")


def write_loss_curve(losses: Sequence[float], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])


def _resolve_model(checkpoint_in, model_config: ModelConfig | None) -> StoryModel:
    if isinstance(checkpoint_in, StoryModel):
        if model_config is not None and model_config.hash() != checkpoint_in.cfg.hash():
            raise IncompatibleCheckpoint("model config differs from the provided model")
        return checkpoint_in
    if checkpoint_in is None:
        return StoryModel(model_config or ModelConfig())
    return StoryModel.load(checkpoint_in, expect=model_config)


def _optimizer(params, config: StageConfig):
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


def _step(loss: torch.Tensor, params, optimizer, grad_clip: float | None) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()


def _draw_noise(model: StoryModel, gen: torch.Generator, n: int):
    shape = model.denoiser.expected_shape
    steps = torch.randint(1, model.schedule.T + 1, (n,), generator=gen).tolist()
    noises = [torch.randn(shape, generator=gen, dtype=torch.float64).to(model.dtype) for _ in range(n)]
    return steps, noises


def train_stage(
    config: StageConfig,
    dataset: DatasetManifest | TrainingData,
    checkpoint_in=None,
    *,
    seed: int = 0,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """Run one stage. ``checkpoint_in`` is a path, a StoryModel, or None for fresh weights."""
    model = _resolve_model(checkpoint_in, model_config)
    data = dataset if isinstance(dataset, TrainingData) else TrainingData(dataset, model.cfg, config.stage_id != "align")
    k = config.shots_per_sample
    if config.stage_id == "align":
        items = data.shots
    elif k == 1:
        items = [(st, i) for st, i in data.windows(1)]
    else:
        items = data.windows(k)
    if not items:
        raise DatasetTooSmall(f"stage {config.stage_id} needs {k}-shot windows; the dataset has none")

    params = model.set_trainable(config.trainable_sets)
    model.train()
    optimizer = _optimizer(params, config)
    sampler = BatchSampler(len(items), substream(seed, "data"))
    drop_rng = substream(seed, "dropout")
    noise_gen = torch_substream(seed, "noise")
    losses: list[float] = []

    for step in range(config.steps):
        picked = [items[i] for i in sampler.take(config.batch_size)]
        if config.stage_id == "align":
            loss = alignment_loss(model, [(s.first_frame, s.caption) for s in picked])
        else:
            sample_losses = []
            for story, start in picked:
                shots = story.shots[start : start + k]
                inputs = apply_dropout(
                    ConditioningInputs(story.reference, [s.caption for s in shots]), config.dropout, drop_rng
                )
                # teacher forcing: ground-truth last frames fill the context slots
                context = [s.last_frame for s in shots[:-1]]
                if config.stage_id == "lora_enhance":
                    with torch.no_grad():
                        conds = [c.values for c in sequence_conditions(model, inputs, context)]
                else:
                    conds = [c.values for c in sequence_conditions(model, inputs, context)]
                steps, noises = _draw_noise(model, noise_gen, k)
                total, _ = multishot_loss(model, [s.video for s in shots], conds, steps, noises)
                sample_losses.append(total)
            loss = torch.stack(sample_losses).mean()
        _step(loss, params, optimizer, config.grad_clip)
        losses.append(float(loss.detach()))
        if step % 10 == 0 or step == config.steps - 1:
            log.info("%s step %d/%d loss %.5f", config.stage_id, step + 1, config.steps, losses[-1])
    model.eval()
    model.set_trainable(())
    return TrainResult(model, losses, config)


PRETRAIN_CAPTION_DROP = 0.1


def pretrain_generator(
    dataset: DatasetManifest | TrainingData,
    checkpoint_in=None,
    *,
    steps: int = 300,
    batch_size: int = 4,
    learning_rate: float = 1e-3,
    seed: int = 0,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """Fit the base denoiser to the corpus with text-stub conditions (Adam).

    Captions are dropped with probability 0.1 so the empty-caption condition
    learns the unconditional branch used by guidance.
    """
    model = _resolve_model(checkpoint_in, model_config)
    data = dataset if isinstance(dataset, TrainingData) else TrainingData(dataset, model.cfg, False)
    items = data.shots
    if not items:
        raise DatasetTooSmall("pretraining needs at least one shot")
    params = model.set_trainable({"diffusion_base"})
    model.train()
    optimizer = torch.optim.Adam(params, lr=learning_rate)
    sampler = BatchSampler(len(items), substream(seed, "data"))
    drop_rng = substream(seed, "dropout")
    noise_gen = torch_substream(seed, "noise")
    losses = []
    for step in range(steps):
        picked = [items[i] for i in sampler.take(batch_size)]
        with torch.no_grad():
            conds = torch.stack(
                [model.text_encoder("" if drop_rng.random() < PRETRAIN_CAPTION_DROP else s.caption) for s in picked]
            ).to(model.dtype)
        t, noises = _draw_noise(model, noise_gen, len(picked))
        loss = diffusion_loss(
            model.denoiser, model.schedule, torch.stack([s.video for s in picked]).to(model.dtype), conds, t,
            torch.stack(noises),
        )
        _step(loss, params, optimizer, 1.0)
        losses.append(float(loss.detach()))
        if step % 25 == 0 or step == steps - 1:
            log.info("pretrain step %d/%d loss %.5f", step + 1, steps, losses[-1])
    model.eval()
    model.set_trainable(())
    return TrainResult(model, losses, None)
