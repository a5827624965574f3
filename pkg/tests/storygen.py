"""Random but valid story documents for round-trip and mutation tests."""

from fractions import Fraction

import numpy as np

from multishot.schema import (
    AudioAnnotation,
    CharacterProfile,
    ReferenceImageRef,
    Scene,
    ShotAnnotation,
    StoryAnnotation,
)

WORDS = ("fox", "lantern", "river", "quietly", "über", "café", "runs", "a", "the", "moon", "日本", "jumps")
FPS_CHOICES = (Fraction(8), Fraction(24), Fraction(30000, 1001), Fraction(25, 2))


def _text(rng, lo=1, hi=8):
    return " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), rng.integers(lo, hi + 1)))


def random_story(rng: np.random.Generator, index: int = 0) -> StoryAnnotation:
    n_chars = int(rng.integers(1, 4))
    n_scenes = int(rng.integers(1, 3))
    chars = tuple(
        CharacterProfile(
            f"char_{c}",
            _text(rng),
            tuple(ReferenceImageRef(int(rng.integers(0, 50)), f"masks/s{index}/char_{c}_{k}.png") for k in range(int(rng.integers(0, 3)))),
        )
        for c in range(n_chars)
    )
    scenes = tuple(Scene(f"scene_{s}", _text(rng)) for s in range(n_scenes))
    shots, start = [], int(rng.integers(0, 10))
    for k in range(int(rng.integers(1, 7))):
        length = int(rng.integers(1, 40))
        audio = AudioAnnotation(_text(rng), tuple(_text(rng, 1, 2) for _ in range(int(rng.integers(0, 3))))) if rng.random() < 0.5 else None
        cids = tuple(sorted({f"char_{int(c)}" for c in rng.integers(0, n_chars, rng.integers(0, n_chars + 1))}))
        shots.append(
            ShotAnnotation(k, f"scene_{int(rng.integers(0, n_scenes))}", cids, _text(rng), _text(rng), start, start + length, audio)
        )
        start += length
    return StoryAnnotation(
        f"story_{index:04d}", _text(rng, 3, 12), scenes, chars, tuple(shots), FPS_CHOICES[int(rng.integers(len(FPS_CHOICES)))]
    )
