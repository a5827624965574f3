"""Reference-consistency metrics and order-permuted judge orchestration."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import cv2
import numpy as np
import torch

from .curation import load_prompt
from .errors import ClientError, EmbedderError, EmptyShot, NonPositiveScore
from .inference import to_uint8

EVAL_FRAMES = 5
JUDGE_DIMENSIONS = ("OQ", "CRC", "MSC", "MCC")


def sample_eval_frames(num_frames: int) -> list[int]:
    """Five indices spread uniformly over [0, F-1]; repeats when F < 5."""
    if num_frames < 1:
        raise EmptyShot("shot has no frames")
    return [int(i) for i in np.rint(np.linspace(0, num_frames - 1, EVAL_FRAMES))]


class FrameEmbedder(Protocol):
    metric_kind: str  # "similarity" or "distance"

    def embed(self, image: np.ndarray) -> np.ndarray: ...


class HistogramEmbedder:
    """8x8x8 joint HSV histogram, L2-normalised.

    Invariant to any rearrangement of pixels: two images with the same colour
    histogram embed identically whatever their layout.
    """

    metric_kind = "similarity"

    def __init__(self, bins: int = 8):
        self.bins = bins

    def embed(self, image: np.ndarray) -> np.ndarray:
        img = np.ascontiguousarray(image, dtype=np.uint8)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise EmbedderError(f"expected HxWx3 uint8 image, got shape {img.shape}")
        hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)
        b = self.bins
        hist = cv2.calcHist([hsv], [0, 1, 2], None, [b, b, b], [0, 180, 0, 256, 0, 256]).ravel().astype(np.float64)
        return hist / np.linalg.norm(hist)


def _as_frames(shot) -> np.ndarray:
    if isinstance(shot, torch.Tensor) or (isinstance(shot, np.ndarray) and shot.dtype != np.uint8):
        return to_uint8(shot)
    return np.asarray(shot)


def _pair_score(a: np.ndarray, b: np.ndarray, kind: str) -> float:
    cos = float(np.dot(a, b))
    return cos if kind == "similarity" else 1.0 - cos


def shot_similarity(shot, reference: np.ndarray, embedder: FrameEmbedder) -> float:
    """Mean over the five sampled frames of cosine (similarity) or 1 - cosine (distance)."""
    frames = _as_frames(shot)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise EmptyShot("shot has no frames")
    try:
        ref = embedder.embed(reference)
        scores = [_pair_score(embedder.embed(frames[i]), ref, embedder.metric_kind) for i in sample_eval_frames(len(frames))]
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(f"{type(embedder).__name__} failed: {exc}") from exc
    return math.fsum(scores) / len(scores)


def harmeanp(scores: Sequence[float]) -> float:
    """Harmonic mean of the shot scores multiplied by the lowest score."""
    if len(scores) == 0:
        raise NonPositiveScore("no scores")
    for s in scores:
        if not s > 0:
            raise NonPositiveScore(f"harmonic mean undefined for score {s}")
    hm = len(scores) / math.fsum(1.0 / s for s in scores)
    return hm * min(scores)


@dataclass
class StoryScore:
    shot_scores: list[float]
    mean: float
    harmeanp: float
    metric_kind: str

    def to_dict(self) -> dict:
        return {"shot_scores": self.shot_scores, "mean": self.mean, "harmeanp": self.harmeanp, "metric_kind": self.metric_kind}


def score_from_shot_scores(shot_scores: Sequence[float], metric_kind: str) -> StoryScore:
    scores = [float(s) for s in shot_scores]
    mean = math.fsum(scores) / len(scores)
    if metric_kind == "distance":
        # lower is better: score the similarities 1 - d, then map back
        hp = 1.0 - harmeanp([1.0 - d for d in scores])
    else:
        hp = harmeanp(scores)
    return StoryScore(scores, mean, hp, metric_kind)


def score_story(shots: Sequence, reference: np.ndarray, embedder: FrameEmbedder) -> StoryScore:
    if len(shots) == 0:
        raise EmptyShot("story has no shots")
    return score_from_shot_scores([shot_similarity(s, reference, embedder) for s in shots], embedder.metric_kind)


def corpus_report(story_scores: dict[str, StoryScore]) -> dict:
    """Per-story scores plus per-shot-position means and mean HarMeanP."""
    positions = max((len(s.shot_scores) for s in story_scores.values()), default=0)
    per_position = []
    for k in range(positions):
        vals = [s.shot_scores[k] for s in story_scores.values() if len(s.shot_scores) > k]
        per_position.append(math.fsum(vals) / len(vals))
    means = [s.mean for s in story_scores.values()]
    hps = [s.harmeanp for s in story_scores.values()]
    return {
        "stories": {k: v.to_dict() for k, v in sorted(story_scores.items())},
        "corpus": {
            "shot_position_means": per_position,
            "mean": math.fsum(means) / len(means) if means else None,
            "harmeanp": math.fsum(hps) / len(hps) if hps else None,
        },
    }


# ---------------------------------------------------------------------------
# judges


@dataclass
class JudgeVerdict:
    scores: dict[str, float]

    def __post_init__(self):
        missing = [d for d in JUDGE_DIMENSIONS if d not in self.scores]
        if missing:
            raise ClientError(f"judge verdict missing dimensions {missing}")
        for d in JUDGE_DIMENSIONS:
            v = float(self.scores[d])
            if not 1.0 <= v <= 10.0:
                raise ClientError(f"judge score {d}={v} outside [1, 10]")


class JudgeClient(Protocol):
    def judge(self, prompt: str, videos: Sequence[bytes]) -> list[dict[str, float]]: ...


def video_bytes(shots: Sequence) -> bytes:
    return b"".join(np.ascontiguousarray(_as_frames(s)).tobytes() for s in shots)


class HashJudge:
    """Scores each video from a stable hash of its bytes; order-independent."""

    def judge(self, prompt: str, videos: Sequence[bytes]) -> list[dict[str, float]]:
        out = []
        for v in videos:
            digest = hashlib.sha256(v).digest()
            out.append({d: float(1 + digest[i] % 10) for i, d in enumerate(JUDGE_DIMENSIONS)})
        return out


class PositionBiasedJudge:
    """Scores by presentation slot only: first slot gets ``top``, then ``step`` less per slot."""

    def __init__(self, top: float = 9.0, step: float = 3.0):
        self.top, self.step = top, step

    def judge(self, prompt: str, videos: Sequence[bytes]) -> list[dict[str, float]]:
        return [{d: self.top - self.step * pos for d in JUDGE_DIMENSIONS} for pos in range(len(videos))]


@dataclass
class JudgeRun:
    averages: dict[str, JudgeVerdict]
    permutations: list[list[int]]
    rounds: list[dict[str, dict[str, float]]] = field(default_factory=list)


def presentation_orders(n: int, rounds: int, rng: random.Random) -> list[list[int]]:
    """Seeded orderings of n items, all distinct while n! allows."""
    if n <= 8 and math.factorial(n) >= rounds:
        perms = list(itertools.permutations(range(n)))
        return [list(p) for p in rng.sample(perms, rounds)]
    orders = []
    for _ in range(rounds):
        order = list(range(n))
        rng.shuffle(order)
        orders.append(order)
    return orders


def run_judges(
    videos: dict[str, Sequence] | Sequence[tuple[str, Sequence]],
    client: JudgeClient,
    rounds: int = 3,
    seed: int = 0,
    num_shots: int = 4,
) -> JudgeRun:
    """Present the model outputs in a different seeded order each round; average per model."""
    items = list(videos.items()) if isinstance(videos, dict) else list(videos)
    if len(items) < 2:
        raise ValueError("run_judges needs at least two model outputs")
    names = [name for name, _ in items]
    blobs = [v if isinstance(v, bytes) else video_bytes(v) for _, v in items]
    prompt = load_prompt("judge_prompt").format(num_shots=num_shots, num_videos=len(items))
    orders = presentation_orders(len(items), rounds, random.Random(seed))
    per_round = []
    for r, order in enumerate(orders):
        try:
            answers = client.judge(prompt, [blobs[i] for i in order])
            if len(answers) != len(order):
                raise ClientError(f"expected {len(order)} verdicts, got {len(answers)}")
            verdicts = [JudgeVerdict(dict(a)) for a in answers]
        except Exception as exc:
            raise ClientError(f"judge failed in round {r} with order {order}: {exc}") from exc
        per_round.append({names[i]: v.scores for i, v in zip(order, verdicts)})
    averages = {
        name: JudgeVerdict({d: math.fsum(float(rd[name][d]) for rd in per_round) / len(per_round) for d in JUDGE_DIMENSIONS})
        for name in names
    }
    return JudgeRun(averages, orders, per_round)


def write_report(report: dict, path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
