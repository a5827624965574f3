"""Hierarchical story/shot annotations: types, JSON I/O, synthetic corpus, stats.

On-disk layout of a dataset root::

    manifest.json
    stories/<story_id>.json
    videos/<story_id>/frame_%06d.png
    masks/<story_id>/<character_id>_%06d.png
    references/<story_id>/<character_id>.png
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image

from .errors import IntegrityError, InvalidSpec, SchemaError

SCHEMA_VERSION = 1

BACKGROUND_GREY = 140
SYNTH_FPS = 8


@dataclass(frozen=True)
class ReferenceImageRef:
    frame_index: int
    mask_path: str


@dataclass(frozen=True)
class CharacterProfile:
    character_id: str
    appearance: str
    reference_image_refs: tuple[ReferenceImageRef, ...] = ()


@dataclass(frozen=True)
class AudioAnnotation:
    description: str
    sources: tuple[str, ...] = ()


@dataclass(frozen=True)
class ShotAnnotation:
    shot_index: int
    scene_id: str
    character_ids: tuple[str, ...]
    narrative_caption: str
    descriptive_caption: str
    start_frame: int
    end_frame: int
    audio: AudioAnnotation | None = None

    @property
    def num_frames(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class Scene:
    scene_id: str
    description: str


@dataclass(frozen=True)
class StoryAnnotation:
    story_id: str
    storyline: str
    scenes: tuple[Scene, ...]
    characters: tuple[CharacterProfile, ...]
    shots: tuple[ShotAnnotation, ...]
    fps: Fraction

    @property
    def start_frame(self) -> int:
        return self.shots[0].start_frame

    @property
    def end_frame(self) -> int:
        return self.shots[-1].end_frame

    def character(self, character_id: str) -> CharacterProfile:
        for c in self.characters:
            if c.character_id == character_id:
                return c
        raise KeyError(character_id)


@dataclass
class DatasetManifest:
    root_path: Path
    stories: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def story_path(self, story_id: str) -> Path:
        return self.root_path / "stories" / f"{story_id}.json"

    def frame_path(self, story_id: str, frame_index: int) -> Path:
        return self.root_path / "videos" / story_id / f"frame_{frame_index:06d}.png"

    def reference_path(self, story_id: str, character_id: str) -> Path:
        return self.root_path / "references" / story_id / f"{character_id}.png"


# ---------------------------------------------------------------------------
# JSON (de)serialization with field-level validation


def _fps_to_json(fps: Fraction) -> int | str:
    return fps.numerator if fps.denominator == 1 else f"{fps.numerator}/{fps.denominator}"


def _parse_fps(value: Any, where: str) -> Fraction:
    if isinstance(value, bool):
        raise SchemaError(f"{where}: expected positive number or 'num/den' string")
    try:
        if isinstance(value, (int, str)):
            fps = Fraction(value)
        elif isinstance(value, float):
            fps = Fraction(str(value))
        else:
            raise TypeError
    except (TypeError, ValueError, ZeroDivisionError):
        raise SchemaError(f"{where}: expected positive number or 'num/den' string") from None
    if fps <= 0:
        raise SchemaError(f"{where}: must be positive, got {value!r}")
    return fps


def _get(obj: dict, key: str, kind: type | tuple[type, ...], where: str, optional: bool = False):
    if key not in obj:
        if optional:
            return None
        raise SchemaError(f"{where}.{key}: missing required field")
    value = obj[key]
    if optional and value is None:
        return None
    # bool is an int subclass; reject it where integers are expected
    if isinstance(value, bool) and bool not in (kind if isinstance(kind, tuple) else (kind,)):
        raise SchemaError(f"{where}.{key}: expected {_kind_name(kind)}, got bool")
    if not isinstance(value, kind):
        raise SchemaError(f"{where}.{key}: expected {_kind_name(kind)}, got {type(value).__name__}")
    return value


def _kind_name(kind) -> str:
    if isinstance(kind, tuple):
        return " or ".join(k.__name__ for k in kind)
    return kind.__name__


def _str_list(obj: dict, key: str, where: str) -> tuple[str, ...]:
    items = _get(obj, key, list, where)
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise SchemaError(f"{where}.{key}[{i}]: expected str, got {type(item).__name__}")
    return tuple(items)


def story_from_dict(doc: Any) -> StoryAnnotation:
    """Parse and type-check a story document. Integrity is checked separately."""
    if not isinstance(doc, dict):
        raise SchemaError("story: expected a JSON object at top level")
    w = "story"
    scenes = []
    for i, s in enumerate(_get(doc, "scenes", list, w)):
        sw = f"{w}.scenes[{i}]"
        if not isinstance(s, dict):
            raise SchemaError(f"{sw}: expected object")
        scenes.append(Scene(_get(s, "scene_id", str, sw), _get(s, "description", str, sw)))
    characters = []
    for i, c in enumerate(_get(doc, "characters", list, w)):
        cw = f"{w}.characters[{i}]"
        if not isinstance(c, dict):
            raise SchemaError(f"{cw}: expected object")
        refs = []
        for j, r in enumerate(_get(c, "reference_image_refs", list, cw)):
            rw = f"{cw}.reference_image_refs[{j}]"
            if not isinstance(r, dict):
                raise SchemaError(f"{rw}: expected object")
            refs.append(ReferenceImageRef(_get(r, "frame_index", int, rw), _get(r, "mask_path", str, rw)))
        characters.append(
            CharacterProfile(_get(c, "character_id", str, cw), _get(c, "appearance", str, cw), tuple(refs))
        )
    shots = []
    for i, s in enumerate(_get(doc, "shots", list, w)):
        sw = f"{w}.shots[{i}]"
        if not isinstance(s, dict):
            raise SchemaError(f"{sw}: expected object")
        audio_doc = _get(s, "audio", dict, sw, optional=True)
        audio = None
        if audio_doc is not None:
            aw = f"{sw}.audio"
            audio = AudioAnnotation(_get(audio_doc, "description", str, aw), _str_list(audio_doc, "sources", aw))
        shots.append(
            ShotAnnotation(
                shot_index=_get(s, "shot_index", int, sw),
                scene_id=_get(s, "scene_id", str, sw),
                character_ids=_str_list(s, "character_ids", sw),
                narrative_caption=_get(s, "narrative_caption", str, sw),
                descriptive_caption=_get(s, "descriptive_caption", str, sw),
                start_frame=_get(s, "start_frame", int, sw),
                end_frame=_get(s, "end_frame", int, sw),
                audio=audio,
            )
        )
    if "fps" not in doc:
        raise SchemaError(f"{w}.fps: missing required field")
    return StoryAnnotation(
        story_id=_get(doc, "story_id", str, w),
        storyline=_get(doc, "storyline", str, w),
        scenes=tuple(scenes),
        characters=tuple(characters),
        shots=tuple(shots),
        fps=_parse_fps(doc["fps"], f"{w}.fps"),
    )


def story_to_dict(story: StoryAnnotation) -> dict:
    shots = []
    for s in story.shots:
        d = {
            "shot_index": s.shot_index,
            "scene_id": s.scene_id,
            "character_ids": list(s.character_ids),
            "narrative_caption": s.narrative_caption,
            "descriptive_caption": s.descriptive_caption,
            "start_frame": s.start_frame,
            "end_frame": s.end_frame,
        }
        if s.audio is not None:
            d["audio"] = {"description": s.audio.description, "sources": list(s.audio.sources)}
        shots.append(d)
    return {
        "story_id": story.story_id,
        "storyline": story.storyline,
        "scenes": [{"scene_id": s.scene_id, "description": s.description} for s in story.scenes],
        "characters": [
            {
                "character_id": c.character_id,
                "appearance": c.appearance,
                "reference_image_refs": [
                    {"frame_index": r.frame_index, "mask_path": r.mask_path} for r in c.reference_image_refs
                ],
            }
            for c in story.characters
        ],
        "shots": shots,
        "fps": _fps_to_json(story.fps),
    }


def check_integrity(story: StoryAnnotation, root: Path | None = None) -> None:
    """Raise IntegrityError on the first violated cross-field invariant.

    When ``root`` is given, mask paths are resolved against it and must exist.
    """
    if not story.story_id:
        raise IntegrityError("story_id is empty")
    if not story.shots:
        raise IntegrityError("story has no shots")
    char_ids = [c.character_id for c in story.characters]
    for cid in char_ids:
        if not cid:
            raise IntegrityError("empty character_id")
    dupes = {c for c in char_ids if char_ids.count(c) > 1}
    if dupes:
        raise IntegrityError(f"duplicate character_id(s): {sorted(dupes)}")
    scene_ids = [s.scene_id for s in story.scenes]
    if len(set(scene_ids)) != len(scene_ids):
        raise IntegrityError("duplicate scene_id")
    known_chars, known_scenes = set(char_ids), set(scene_ids)

    for k, shot in enumerate(story.shots):
        if shot.shot_index != k:
            raise IntegrityError(f"shots[{k}].shot_index is {shot.shot_index}, expected {k}")
        if shot.start_frame >= shot.end_frame:
            raise IntegrityError(
                f"shots[{k}]: start_frame {shot.start_frame} must be < end_frame {shot.end_frame}"
            )
        if not shot.narrative_caption.strip() or not shot.descriptive_caption.strip():
            raise IntegrityError(f"shots[{k}]: captions must be non-empty")
        if shot.scene_id not in known_scenes:
            raise IntegrityError(f"shots[{k}] references undeclared scene_id {shot.scene_id!r}")
        for cid in shot.character_ids:
            if cid not in known_chars:
                raise IntegrityError(f"shots[{k}] references undeclared character_id {cid!r}")
        if k > 0:
            prev = story.shots[k - 1]
            if prev.end_frame < shot.start_frame:
                raise IntegrityError(
                    f"gap between shots[{k - 1}] (ends {prev.end_frame}) and shots[{k}] (starts {shot.start_frame})"
                )
            if prev.end_frame > shot.start_frame:
                raise IntegrityError(
                    f"overlap between shots[{k - 1}] (ends {prev.end_frame}) and shots[{k}] (starts {shot.start_frame})"
                )

    if root is not None:
        for c in story.characters:
            for r in c.reference_image_refs:
                if not (root / r.mask_path).is_file():
                    raise IntegrityError(f"character {c.character_id!r}: mask file not found: {r.mask_path}")


def _dataset_root_for(path: Path) -> Path:
    path = path.resolve()
    return path.parent.parent if path.parent.name == "stories" else path.parent


def load_story(path: str | Path, root: str | Path | None = None) -> StoryAnnotation:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: not UTF-8 ({exc})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    story = story_from_dict(doc)
    check_integrity(story, Path(root) if root is not None else _dataset_root_for(path))
    return story


def dump_story(story: StoryAnnotation) -> str:
    return json.dumps(story_to_dict(story), indent=2, ensure_ascii=False) + "\n"


def write_story(story: StoryAnnotation, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_story(story), encoding="utf-8")


def write_manifest(manifest: DatasetManifest) -> Path:
    out = manifest.root_path / "manifest.json"
    doc = {"schema_version": manifest.schema_version, "stories": list(manifest.stories)}
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return out


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError("manifest: expected a JSON object")
    version = _get(doc, "schema_version", int, "manifest")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"manifest.schema_version: unsupported version {version}")
    stories = list(_str_list(doc, "stories", "manifest"))
    return DatasetManifest(root_path=path.parent.resolve(), stories=stories, schema_version=version)


def load_stories(manifest: DatasetManifest) -> list[StoryAnnotation]:
    return [load_story(manifest.story_path(sid), root=manifest.root_path) for sid in manifest.stories]


# ---------------------------------------------------------------------------
# image I/O


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_shot_frames(manifest: DatasetManifest, story: StoryAnnotation, shot: ShotAnnotation) -> np.ndarray:
    """(F, H, W, 3) uint8 frames of one shot."""
    return np.stack(
        [read_rgb(manifest.frame_path(story.story_id, f)) for f in range(shot.start_frame, shot.end_frame)]
    )


def load_reference(manifest: DatasetManifest, story: StoryAnnotation, character_id: str | None = None) -> np.ndarray:
    cid = character_id or story.characters[0].character_id
    return read_rgb(manifest.reference_path(story.story_id, cid))


# ---------------------------------------------------------------------------
# synthetic corpus

HUES = ("red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "violet", "magenta", "rose")
SHAPES = ("square", "disc")
DIRECTIONS = {"leftward": (0, -1), "rightward": (0, 1), "upward": (-1, 0), "downward": (1, 0)}
SPEEDS = {"slowly": 1, "quickly": 2}

DESCRIPTIVE_TEMPLATE = "a {hue} {shape} glides {speed} {direction} across a plain grey background"
NARRATIVE_FIRST = "the {hue} {shape} sets off {direction}"
NARRATIVE_TURN = "the {hue} {shape} turns {direction}"
NARRATIVE_SAME = "the {hue} {shape} keeps going {direction}"
STORYLINE_TEMPLATE = "a small {hue} {shape} wanders around a plain grey room"
APPEARANCE_TEMPLATE = "a small {hue} {shape}"
SCENE_DESCRIPTION = "a plain grey room"


def template_lexicon() -> list[str]:
    """Every word the synthetic templates can emit, sorted."""
    words: set[str] = set()
    templates = (
        DESCRIPTIVE_TEMPLATE, NARRATIVE_FIRST, NARRATIVE_TURN, NARRATIVE_SAME,
        STORYLINE_TEMPLATE, APPEARANCE_TEMPLATE, SCENE_DESCRIPTION,
    )
    for t in templates:
        for w in t.split():
            if not w.startswith("{"):
                words.add(w)
    words.update(HUES, SHAPES, DIRECTIONS, SPEEDS)
    return sorted(words)


@dataclass(frozen=True)
class SynthSpec:
    num_stories: int
    shots_per_story: int
    frames_per_shot: int
    image_size: int
    seed: int
    patch_multiple: int = 8

    def validate(self) -> None:
        for name in ("num_stories", "shots_per_story", "frames_per_shot", "image_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_multiple:
            raise InvalidSpec(f"image_size {self.image_size} is not divisible by patch size {self.patch_multiple}")


def hue_rgb(hue_name: str) -> tuple[int, int, int]:
    h = HUES.index(hue_name) / len(HUES)
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def sprite_mask(size: int, shape: str, top: int, left: int, side: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    if shape == "square":
        m[top : top + side, left : left + side] = True
    else:
        yy, xx = np.mgrid[:size, :size]
        c = (side - 1) / 2.0
        m = (yy - top - c) ** 2 + (xx - left - c) ** 2 <= (side / 2.0) ** 2
    return m


def render_frame(size: int, mask: np.ndarray, rgb: tuple[int, int, int]) -> np.ndarray:
    frame = np.full((size, size, 3), BACKGROUND_GREY, dtype=np.uint8)
    frame[mask] = rgb
    return frame


def _synth_story(index: int, spec: SynthSpec, hue: str, rng: np.random.Generator):
    size = spec.image_size
    side = max(2, int(round(size * 0.3)))
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    lo, hi = 0, size - side
    y, x = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    story_id = f"story_{index:04d}"
    char_id = "char_0"
    rgb = hue_rgb(hue)

    frames, shots, masks = [], [], []
    prev_dir = None
    direction_names = list(DIRECTIONS)
    speed_names = list(SPEEDS)
    for k in range(spec.shots_per_story):
        direction = direction_names[int(rng.integers(len(direction_names)))]
        speed = speed_names[int(rng.integers(len(speed_names)))]
        dy, dx = DIRECTIONS[direction]
        step = SPEEDS[speed]
        start = len(frames)
        for _ in range(spec.frames_per_shot):
            m = sprite_mask(size, shape, y, x, side)
            masks.append(m)
            frames.append(render_frame(size, m, rgb))
            y = min(max(y + dy * step, lo), hi)
            x = min(max(x + dx * step, lo), hi)
        fmt = {"hue": hue, "shape": shape, "direction": direction, "speed": speed}
        if k == 0:
            narrative = NARRATIVE_FIRST.format(**fmt)
        elif direction == prev_dir:
            narrative = NARRATIVE_SAME.format(**fmt)
        else:
            narrative = NARRATIVE_TURN.format(**fmt)
        prev_dir = direction
        shots.append(
            ShotAnnotation(
                shot_index=k,
                scene_id="scene_0",
                character_ids=(char_id,),
                narrative_caption=narrative,
                descriptive_caption=DESCRIPTIVE_TEMPLATE.format(**fmt),
                start_frame=start,
                end_frame=len(frames),
            )
        )
    mask_rel = f"masks/{story_id}/{char_id}_{0:06d}.png"
    story = StoryAnnotation(
        story_id=story_id,
        storyline=STORYLINE_TEMPLATE.format(hue=hue, shape=shape),
        scenes=(Scene("scene_0", SCENE_DESCRIPTION),),
        characters=(
            CharacterProfile(char_id, APPEARANCE_TEMPLATE.format(hue=hue, shape=shape), (ReferenceImageRef(0, mask_rel),)),
        ),
        shots=tuple(shots),
        fps=Fraction(SYNTH_FPS),
    )
    return story, frames, masks[0], mask_rel


def synthesize_dataset(spec: SynthSpec, root: str | Path) -> DatasetManifest:
    """Render a procedural corpus under ``root``; identical seeds give identical bytes."""
    spec.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    hue_order = rng.permutation(len(HUES))
    manifest = DatasetManifest(root_path=root.resolve())
    for i in range(spec.num_stories):
        hue = HUES[int(hue_order[i % len(HUES)])]
        story, frames, mask, mask_rel = _synth_story(i, spec, hue, rng)
        for f, frame in enumerate(frames):
            write_rgb(manifest.frame_path(story.story_id, f), frame)
        write_mask(root / mask_rel, mask)
        # reference: sprite composited on the neutral background
        ref = np.where(mask[..., None], frames[0], np.uint8(BACKGROUND_GREY)).astype(np.uint8)
        write_rgb(manifest.reference_path(story.story_id, story.characters[0].character_id), ref)
        write_story(story, manifest.story_path(story.story_id))
        manifest.stories.append(story.story_id)
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# statistics


def word_count(text: str) -> int:
    return len(text.split())


def _mean(values: Iterable[float]) -> float | None:
    values = list(values)
    return math.fsum(values) / len(values) if values else None


@dataclass
class StatsRow:
    level: str
    total_num: int
    avg_dur_s: float | None
    avg_caption_w: float | None
    avg_chars: float | None = None
    avg_scenes: float | None = None


@dataclass
class StatsReport:
    story: StatsRow
    shot: StatsRow

    @property
    def story_count(self) -> int:
        return self.story.total_num

    @property
    def shot_count(self) -> int:
        return self.shot.total_num

    @property
    def mean_shot_duration_s(self) -> float | None:
        return self.shot.avg_dur_s

    @property
    def mean_caption_words(self) -> float | None:
        return self.shot.avg_caption_w

    @property
    def mean_characters(self) -> float | None:
        return self.story.avg_chars

    @property
    def mean_scenes(self) -> float | None:
        return self.story.avg_scenes

    def to_dict(self) -> dict:
        return {row.level: {k: v for k, v in row.__dict__.items() if k != "level"} for row in (self.story, self.shot)}

    def format_table(self) -> str:
        header = ("Statistics Level", "Total Num.", "Avg. Dur.(s)", "Avg. Caption(w)", "Avg. Chars.", "Avg. Scenes")

        def cell(v):
            return "-" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))

        lines = [" | ".join(header)]
        for name, row in (("Story-level", self.story), ("Shot-level", self.shot)):
            lines.append(
                " | ".join(
                    [name] + [cell(v) for v in (row.total_num, row.avg_dur_s, row.avg_caption_w, row.avg_chars, row.avg_scenes)]
                )
            )
        return "\n".join(lines)


def stats_from_stories(stories: list[StoryAnnotation]) -> StatsReport:
    shots = [(st, sh) for st in stories for sh in st.shots]
    story_row = StatsRow(
        level="story",
        total_num=len(stories),
        avg_dur_s=_mean(float(Fraction(st.end_frame - st.start_frame) / st.fps) for st in stories),
        avg_caption_w=_mean(word_count(st.storyline) for st in stories),
        avg_chars=_mean(len(st.characters) for st in stories),
        avg_scenes=_mean(len(st.scenes) for st in stories),
    )
    shot_row = StatsRow(
        level="shot",
        total_num=len(shots),
        avg_dur_s=_mean(float(Fraction(sh.num_frames) / st.fps) for st, sh in shots),
        avg_caption_w=_mean(word_count(sh.narrative_caption) + word_count(sh.descriptive_caption) for _, sh in shots),
    )
    return StatsReport(story=story_row, shot=shot_row)


def dataset_stats(manifest: DatasetManifest) -> StatsReport:
    return stats_from_stories(load_stories(manifest))
