"""Deterministic curation: duration filter, boundaries, segmentation, masks.

The model-backed steps (captioning, segmentation, verification) sit behind
``ExternalModelClient``; the mocks here are pure functions of their inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import ClientError, DimensionMismatch, RoleError
from .schema import CharacterProfile, ShotAnnotation

MAX_VIDEO_SECONDS = 1200.0
HIST_BINS = 32
MORPH_KERNEL = 5
MAX_CONTOURS = 15
MAX_COMPONENTS = 5
MIN_AREA_FRACTION = 0.05
MAX_AREA_FRACTION = 0.90

ROLES = ("captioner", "segmenter", "verifier")
ACCEPT, REJECT = "accept", "reject"

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


def duration_filter(video_length_s: float) -> str:
    if video_length_s < 0:
        raise ValueError(f"video length must be non-negative, got {video_length_s}")
    return REJECT if video_length_s > MAX_VIDEO_SECONDS else ACCEPT


# ---------------------------------------------------------------------------
# boundaries and segmentation


def hsv_histograms(frame: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Per-channel HSV histograms of an RGB uint8 frame, normalised to sum 1."""
    hsv = cv2.cvtColor(np.ascontiguousarray(frame, dtype=np.uint8), cv2.COLOR_RGB2HSV)
    n = hsv.shape[0] * hsv.shape[1]
    hists = [
        cv2.calcHist([hsv], [c], None, [bins], [0, upper]).ravel()
        for c, upper in ((0, 180), (1, 256), (2, 256))
    ]
    return np.stack(hists).astype(np.float64) / n


def histogram_delta(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over channels of the L1 distance between normalised histograms; in [0, 2]."""
    return float(np.abs(hsv_histograms(a) - hsv_histograms(b)).sum(axis=1).mean())


def detect_boundaries(frames: Sequence[np.ndarray], threshold: float) -> list[int]:
    if len(frames) == 0:
        raise ValueError("detect_boundaries needs at least one frame")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    boundaries = [0]
    prev = hsv_histograms(frames[0])
    for k in range(1, len(frames)):
        cur = hsv_histograms(frames[k])
        if float(np.abs(cur - prev).sum(axis=1).mean()) > threshold:
            boundaries.append(k)
        prev = cur
    return boundaries


def segment_video(
    boundaries: Sequence[int], total_frames: int, fps: float | Fraction, target_s: float = 60.0
) -> list[tuple[int, int]]:
    """Greedily group boundary-delimited spans into segments near ``target_s`` long.

    From each segment start, the closing cut is the candidate (a later boundary or
    the video end) whose segment duration is closest to the target; ties go to
    the earlier cut.
    """
    if total_frames <= 0:
        raise ValueError("total_frames must be positive")
    cuts = sorted({b for b in boundaries if 0 < b < total_frames})
    candidates = cuts + [total_frames]
    fps = float(fps)
    segments = []
    start = 0
    while start < total_frames:
        best, best_err = None, math.inf
        for end in candidates:
            if end <= start:
                continue
            err = abs((end - start) / fps - target_s)
            if err < best_err:
                best, best_err = end, err
            elif (end - start) / fps > target_s:
                break
        segments.append((start, best))
        start = best
    return segments


def sample_candidate_frames(shot: ShotAnnotation, fps: float | Fraction) -> list[int]:
    step = max(1, int(round(float(fps))))
    return list(range(shot.start_frame, shot.end_frame, step))


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class MaskResult:
    mask: np.ndarray | None
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.mask is not None


TOO_MANY_CONTOURS = "too_many_contours"
TOO_MANY_COMPONENTS = "too_many_components"
TOO_SMALL = "too_small"
TOO_LARGE = "too_large"


def count_contours(mask: np.ndarray) -> int:
    """Outer and hole boundaries of the foreground."""
    contours, _ = cv2.findContours(mask.astype(np.uint8), cv2.RETR_LIST, cv2.CHAIN_APPROX_SIMPLE)
    return len(contours)


def refine_mask(mask: np.ndarray) -> MaskResult:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionMismatch(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != bool:
        values = np.unique(mask)
        if not set(values.tolist()) <= {0, 1, 255}:
            raise ValueError("mask is not binary")
        mask = mask > 0
    kernel = np.ones((MORPH_KERNEL, MORPH_KERNEL), np.uint8)
    m = cv2.morphologyEx(mask.astype(np.uint8), cv2.MORPH_OPEN, kernel)
    m = cv2.morphologyEx(m, cv2.MORPH_CLOSE, kernel)
    m = ndimage.binary_fill_holes(m.astype(bool))

    if count_contours(m) > MAX_CONTOURS:
        return MaskResult(None, TOO_MANY_CONTOURS)
    labels, n = ndimage.label(m, structure=_CROSS)
    if n > MAX_COMPONENTS:
        return MaskResult(None, TOO_MANY_COMPONENTS)
    if n:
        sizes = np.bincount(labels.ravel())[1:]
        m = labels == (1 + int(np.argmax(sizes)))
    fraction = m.sum() / m.size
    if fraction < MIN_AREA_FRACTION:
        return MaskResult(None, TOO_SMALL)
    if fraction > MAX_AREA_FRACTION:
        return MaskResult(None, TOO_LARGE)
    return MaskResult(m)


def extract_reference(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if frame.shape[:2] != mask.shape:
        raise DimensionMismatch(f"frame {frame.shape[:2]} vs mask {mask.shape}")
    return (frame * (mask > 0)[..., None]).astype(frame.dtype)


# ---------------------------------------------------------------------------
# external model clients


def load_prompt(name: str) -> str:
    return resources.files("multishot").joinpath("assets", f"{name}.txt").read_text(encoding="utf-8")


class ExternalModelClient(Protocol):
    role: str

    def query(self, prompt: str, image: np.ndarray | None = None) -> str: ...


def _request_key(prompt: str, image: np.ndarray | None) -> str:
    h = hashlib.sha256(prompt.encode("utf-8"))
    if image is not None:
        h.update(str(image.shape).encode())
        h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


class MockClient:
    """Deterministic client; ``rule`` maps (prompt, image) to a response."""

    def __init__(self, role: str, rule: Callable[[str, np.ndarray | None], str] | None = None):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.rule = rule or (lambda prompt, image: ACCEPT)

    def query(self, prompt: str, image: np.ndarray | None = None) -> str:
        return self.rule(prompt, image)


def reject_black(prompt: str, image: np.ndarray | None) -> str:
    return REJECT if image is None or not np.any(image) else ACCEPT


class FileClient:
    """Replays canned responses keyed by a hash of the request.

    The JSON file maps request keys (see ``request_key``) to responses, with an
    optional ``"*"`` fallback.
    """

    def __init__(self, role: str, path: str | Path):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.path = Path(path)
        self.responses = json.loads(self.path.read_text(encoding="utf-8"))

    request_key = staticmethod(_request_key)

    def query(self, prompt: str, image: np.ndarray | None = None) -> str:
        key = _request_key(prompt, image)
        if key in self.responses:
            return self.responses[key]
        if "*" in self.responses:
            return self.responses["*"]
        raise ClientError(f"{self.path}: no canned response for request {key[:12]}")


def make_client(spec: str, role: str) -> ExternalModelClient:
    """Build a client from a CLI spec: ``mock`` or ``file:<responses.json>``."""
    if spec == "mock":
        return MockClient(role, reject_black if role == "verifier" else None)
    if spec.startswith("file:"):
        return FileClient(role, spec[len("file:"):])
    raise ValueError(f"unknown client spec {spec!r}; expected 'mock' or 'file:<path>'")


def verifier_prompt(profile: CharacterProfile) -> str:
    return load_prompt("verifier_prompt").format(
        character_id=profile.character_id, appearance=profile.appearance
    )


def run_verifier(client: ExternalModelClient, reference: np.ndarray, profile: CharacterProfile) -> str:
    if client.role != "verifier":
        raise RoleError(f"run_verifier needs a verifier client, got role {client.role!r}")
    try:
        return client.query(verifier_prompt(profile), reference)
    except ClientError as exc:
        raise ClientError(f"verifier failed for character {profile.character_id!r}: {exc}") from exc
    except Exception as exc:
        raise ClientError(
            f"verifier failed for character {profile.character_id!r}: {type(exc).__name__}: {exc}"
        ) from exc
