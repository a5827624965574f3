"""Command-line entry point: ``multishot <command> [options]``.

Every command resolves its settings as defaults < ``--config`` JSON file <
explicit flags and echoes the resolved settings to a JSON sidecar next to
its primary output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import CONFIG_SCHEMA_VERSION, ModelConfig, tiny_config
from .errors import DomainError

log = logging.getLogger("multishot")

DATA_ENV = "ANIMESHOOTER_DATA"
COMMANDS = ("synth-data", "curate", "train", "generate", "evaluate", "stats", "demo")


class UsageError(Exception):
    pass


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _manifest_path(value: str | None) -> Path:
    p = Path(value) if value else data_root()
    return p / "manifest.json" if p.is_dir() or p.suffix != ".json" else p


def resolve_settings(defaults: dict, config_file: str | None, flags: dict) -> dict:
    """defaults < config file < flags; a key unknown to the command is an error."""
    settings = dict(defaults)
    if config_file:
        try:
            doc = json.loads(Path(config_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_file}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {config_file} must be a flat JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys {unknown}; valid keys: {sorted(defaults)}")
        settings.update(doc)
    settings.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return settings


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def echo_settings(path: Path, command: str, settings: dict) -> None:
    write_json(path, {"command": command, "version": __version__, "settings": settings})


def _model_config(preset: str, seed: int) -> ModelConfig:
    if preset == "toy":
        return ModelConfig(seed=seed)
    if preset == "tiny":
        return tiny_config(seed=seed)
    raise UsageError(f"unknown model preset {preset!r}; expected toy or tiny")


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(s: dict) -> int:
    from .schema import SynthSpec, synthesize_dataset

    out = Path(s["out"] or data_root())
    spec = SynthSpec(s["stories"], s["shots"], s["frames"], s["size"], s["seed"])
    manifest = synthesize_dataset(spec, out)
    echo_settings(out / "synth-data.run.json", "synth-data", s)
    print(f"wrote {len(manifest.stories)} stories to {out}")
    return 0


_MASK_NAME = re.compile(r"^(?P<char>.+)_(?P<frame>\d{6})\.png$")


def _refine_one(path: Path, s: dict, client) -> dict:
    from .curation import REJECT, extract_reference, refine_mask, run_verifier
    from .schema import CharacterProfile, read_mask, read_rgb, write_mask, write_rgb

    src, out = Path(s["in"]), Path(s["out"])
    rel = path.relative_to(src)
    result = refine_mask(read_mask(path))
    record = {"input": rel.as_posix(), "verdict": "accepted" if result.accepted else "rejected", "reason": result.reason}
    if not result.accepted:
        return record
    write_mask(out / rel, result.mask)
    m = _MASK_NAME.match(path.name)
    if s["frames"] and m:
        frame = read_rgb(Path(s["frames"]) / rel.parent / f"frame_{m['frame']}.png")
        reference = extract_reference(frame, result.mask)
        write_rgb(out / rel.parent / f"{m['char']}_{m['frame']}_reference.png", reference)
        if client is not None:
            answer = run_verifier(client, reference, CharacterProfile(m["char"], ""))
            if answer.strip().lower() == REJECT:
                record.update(verdict="rejected", reason="verifier")
    return record


def cmd_curate_refine(s: dict) -> int:
    from .curation import make_client

    src, out = Path(s["in"]), Path(s["out"])
    if not src.is_dir():
        raise UsageError(f"--in {src} is not a directory")
    try:
        client = make_client(s["client"], "verifier") if s["client"] else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    paths = sorted(p for p in src.rglob("*.png") if not p.name.endswith("_reference.png"))
    with ThreadPoolExecutor(max_workers=max(1, s["jobs"])) as pool:
        records = list(pool.map(lambda p: _refine_one(p, s, client), paths))
    audit = Path(s["audit"]) if s["audit"] else out / "audit.jsonl"
    audit.parent.mkdir(parents=True, exist_ok=True)
    with audit.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    echo_settings(out / "curate.run.json", "curate refine-masks", s)
    kept = sum(r["verdict"] == "accepted" for r in records)
    print(f"kept {kept}/{len(records)} masks; audit log {audit}")
    return 0


def cmd_curate_segment(s: dict) -> int:
    from .curation import detect_boundaries, segment_video
    from .schema import read_rgb

    frames_dir = Path(s["video_frames"])
    paths = sorted(frames_dir.glob("frame_*.png"))
    if not paths:
        raise UsageError(f"no frame_*.png files under {frames_dir}")
    frames = [read_rgb(p) for p in paths]
    boundaries = detect_boundaries(frames, s["threshold"])
    segments = segment_video(boundaries, len(frames), s["fps"], s["target_s"])
    doc = {"boundaries": boundaries, "segments": [list(seg) for seg in segments]}
    if s["out"]:
        write_json(Path(s["out"]), doc)
        echo_settings(Path(s["out"]).with_suffix(".run.json"), "curate segment", s)
    else:
        print(json.dumps(doc, sort_keys=True))
    return 0


def _train_outputs(ckpt_out: Path) -> tuple[Path, Path]:
    stem = ckpt_out.with_suffix("")
    return Path(f"{stem}.loss.csv"), Path(f"{stem}.run.json")


def cmd_train(s: dict) -> int:
    from .model import StoryModel
    from .schema import load_manifest
    from .training import pretrain_generator, stage_config, train_stage, write_loss_curve

    manifest = load_manifest(_manifest_path(s["data"]))
    ckpt_in = StoryModel.load(s["ckpt_in"]) if s["ckpt_in"] else None
    cfg = None if ckpt_in is not None else _model_config(s["model"], s["seed"])
    if s["stage"] == "pretrain":
        result = pretrain_generator(
            manifest, ckpt_in, steps=s["steps"] or 300, batch_size=s["batch_size"] or 4,
            learning_rate=s["lr"] or 1e-3, seed=s["seed"], model_config=cfg,
        )
        stage_doc = {"stage_id": "pretrain", "steps": len(result.losses)}
    else:
        config = stage_config(
            s["stage"], s["step_scale"], steps=s["steps"], batch_size=s["batch_size"], learning_rate=s["lr"]
        )
        result = train_stage(config, manifest, ckpt_in, seed=s["seed"], model_config=cfg)
        stage_doc = config.to_dict()
    ckpt_out = Path(s["ckpt_out"])
    curve, sidecar = _train_outputs(ckpt_out)
    result.model.save(ckpt_out, extra={"stage": stage_doc["stage_id"]})
    write_loss_curve(result.losses, curve)
    echo_settings(sidecar, "train", {**s, "resolved_stage": stage_doc, "model_config": result.model.cfg.to_dict()})
    print(f"{stage_doc['stage_id']}: loss {result.initial_loss:.5f} -> {result.final_loss:.5f}; wrote {ckpt_out}")
    return 0


def write_story_output(out: Path, request, output, model) -> None:
    from .inference import to_uint8
    from .schema import write_rgb

    for i, shot in enumerate(output.shots):
        for j, frame in enumerate(to_uint8(shot)):
            write_rgb(out / f"shot_{i:02d}" / f"frame_{j:06d}.png", frame)
    write_json(
        out / "story.json",
        {
            "captions": list(request.captions),
            "seeds": output.seeds,
            "context_frame_hashes": output.context_frame_hashes,
            "context_sizes": [list(c) for c in output.context_sizes],
        },
    )
    write_json(
        out / "generation.json",
        {
            "seed": request.seed,
            "guidance_scale": request.guidance_scale,
            "schedule_hash": model.schedule.digest(),
            "model_config_hash": model.cfg.hash(),
            "condition": "reference + captions so far + last frames of earlier shots",
        },
    )


def cmd_generate(s: dict) -> int:
    from .inference import StoryRequest, generate_story, read_captions
    from .model import StoryModel
    from .schema import read_rgb

    model = StoryModel.load(s["ckpt"])
    captions = read_captions(Path(s["captions"]).read_text(encoding="utf-8").splitlines())
    request = StoryRequest(read_rgb(s["ref"]), captions, s["seed"], s["guidance"])
    output = generate_story(request, model)
    out = Path(s["out"])
    write_story_output(out, request, output, model)
    echo_settings(out / "generate.run.json", "generate", s)
    print(f"wrote {len(output.shots)} shots to {out}")
    return 0


def load_embedder(spec: str):
    """``histogram`` or ``plugin:<entry point name | module:attr>``."""
    from .errors import EmbedderError
    from .evaluation import HistogramEmbedder

    if spec == "histogram":
        return HistogramEmbedder()
    if not spec.startswith("plugin:"):
        raise UsageError(f"unknown embedder {spec!r}; expected histogram or plugin:<name>")
    name = spec[len("plugin:"):]
    try:
        if ":" in name:
            import importlib

            module, attr = name.split(":", 1)
            factory = getattr(importlib.import_module(module), attr)
        else:
            from importlib.metadata import entry_points

            matches = [ep for ep in entry_points(group="multishot.embedders") if ep.name == name]
            if not matches:
                raise EmbedderError(f"no embedder plugin named {name!r}")
            factory = matches[0].load()
        # an entry point may name an instance or a zero-argument factory
        embedder = factory if hasattr(factory, "embed") and not isinstance(factory, type) else factory()
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(f"cannot load embedder plugin {name!r}: {exc}") from exc
    if getattr(embedder, "metric_kind", None) not in ("similarity", "distance") or not hasattr(embedder, "embed"):
        raise EmbedderError(f"plugin {name!r} does not implement the frame embedder interface")
    return embedder


def read_story_shots(story_dir: Path) -> list[np.ndarray]:
    from .schema import read_rgb

    from .errors import EmptyShot

    shots = []
    for d in sorted(p for p in story_dir.glob("shot_*") if p.is_dir()):
        frames = sorted(d.glob("frame_*.png"))
        if not frames:
            raise EmptyShot(f"{d} has no frames")
        shots.append(np.stack([read_rgb(f) for f in frames]))
    return shots


def cmd_evaluate(s: dict) -> int:
    from .evaluation import corpus_report, score_story, write_report
    from .schema import read_rgb

    stories_dir, refs_dir = Path(s["stories"]), Path(s["refs"])
    embedder = load_embedder(s["embedder"])
    if any(stories_dir.glob("shot_*")):
        story_dirs = [stories_dir]
    else:
        story_dirs = sorted(p for p in stories_dir.iterdir() if p.is_dir() and any(p.glob("shot_*")))
    if not story_dirs:
        raise UsageError(f"no generated stories under {stories_dir}")

    def score(d: Path):
        ref = refs_dir / f"{d.name}.png"
        if not ref.is_file():
            raise UsageError(f"missing reference {ref}")
        return d.name, score_story(read_story_shots(d), read_rgb(ref), embedder)

    with ThreadPoolExecutor(max_workers=max(1, s["jobs"])) as pool:
        scores = dict(pool.map(score, story_dirs))
    report = corpus_report(scores)
    out = Path(s["out"])
    write_report(report, out)
    echo_settings(out.with_suffix(".run.json"), "evaluate", s)
    print(f"scored {len(scores)} stories; mean {report['corpus']['mean']:.4f} harmeanp {report['corpus']['harmeanp']:.4f}")
    return 0


def cmd_stats(s: dict) -> int:
    from .schema import dataset_stats, load_manifest

    report = dataset_stats(load_manifest(_manifest_path(s["data"])))
    print(report.format_table())
    if s["out"]:
        write_json(Path(s["out"]), report.to_dict())
    return 0


# ---------------------------------------------------------------------------
# end-to-end demo

DEMO_PROFILES = {
    # 3 stories x 4 shots of 8 frames at 32x32 with the default toy model
    "full": dict(
        data=dict(num_stories=3, shots_per_story=4, frames_per_shot=8, image_size=32),
        model={},
        pretrain=dict(steps=200, batch_size=4, learning_rate=1e-3),
        stages={
            "align": dict(steps=100, batch_size=8),
            "single_shot": dict(steps=60, batch_size=4),
            "multi_shot": dict(steps=30, batch_size=2),
        },
    ),
    # plumbing check only: tiny model, a handful of steps
    "quick": dict(
        data=dict(num_stories=3, shots_per_story=4, frames_per_shot=2, image_size=16),
        model=dict(tiny=True),
        pretrain=dict(steps=3, batch_size=2, learning_rate=1e-3),
        stages={
            "align": dict(steps=2, batch_size=2),
            "single_shot": dict(steps=2, batch_size=2),
            "multi_shot": dict(steps=1, batch_size=1),
        },
    ),
}
DEMO_SHOTS = 4
DEMO_GUIDANCE = 6.0


def pipeline_demo(out_dir: str | Path, seed: int = 0, profile: str = "full") -> dict:
    """synth -> pretrain -> align -> single -> multi -> generate 4 shots -> evaluate.

    Writes ``summary.json`` (identical across runs with the same seed) and
    returns it. The generator pretraining stands in for a pretrained video
    model so the frozen denoiser can respond to conditions at all.
    """
    from .evaluation import HistogramEmbedder, corpus_report, score_story
    from .inference import StoryRequest, generate_story
    from .schema import SynthSpec, load_reference, load_stories, synthesize_dataset
    from .training import TrainingData, pretrain_generator, stage_config, train_stage, write_loss_curve

    if profile not in DEMO_PROFILES:
        raise UsageError(f"unknown demo profile {profile!r}; expected one of {sorted(DEMO_PROFILES)}")
    plan = DEMO_PROFILES[profile]
    out = Path(out_dir)
    t0 = time.monotonic()
    manifest = synthesize_dataset(SynthSpec(seed=seed, **plan["data"]), out / "data")
    size, frames = plan["data"]["image_size"], plan["data"]["frames_per_shot"]
    if plan["model"].get("tiny"):
        cfg = tiny_config(image_size=size, frames=frames, seed=seed)
    else:
        cfg = ModelConfig(image_size=size, frames=frames, seed=seed)
    data = TrainingData(manifest, cfg)

    stages = {}
    result = pretrain_generator(data, None, seed=seed, model_config=cfg, **plan["pretrain"])
    stages["pretrain"] = result
    for stage_id, kw in plan["stages"].items():
        result = train_stage(stage_config(stage_id, **kw), data, result.model, seed=seed)
        stages[stage_id] = result
        log.info("%s done at %.0fs", stage_id, time.monotonic() - t0)
    model = result.model
    model.save(out / "model.safetensors")

    story = load_stories(manifest)[0]
    reference = load_reference(manifest, story)
    captions = tuple(s.descriptive_caption for s in story.shots)[:DEMO_SHOTS]
    captions += (captions[-1],) * (DEMO_SHOTS - len(captions))
    request = StoryRequest(reference, captions, seed, DEMO_GUIDANCE)
    output = generate_story(request, model)
    write_story_output(out / "generated" / story.story_id, request, output, model)
    score = score_story(output.shots, reference, HistogramEmbedder())
    log.info("generation and scoring done at %.0fs", time.monotonic() - t0)

    summary = {
        "seed": seed,
        "profile": profile,
        "model_config": cfg.to_dict(),
        "stages": {},
        "generated_shots": len(output.shots),
        "evaluation": corpus_report({story.story_id: score}),
    }
    for name, r in stages.items():
        write_loss_curve(r.losses, out / "curves" / f"{name}.csv")
        summary["stages"][name] = {
            "initial_loss": r.initial_loss,
            "final_loss": r.final_loss,
            "losses": r.losses,
            "config": r.config.to_dict() if r.config else {"stage_id": "pretrain", **plan["pretrain"]},
        }
    write_json(out / "summary.json", summary)
    return summary


def cmd_demo(s: dict) -> int:
    out = Path(s["out"])
    t0 = time.monotonic()
    summary = pipeline_demo(out, s["seed"], s["profile"])
    echo_settings(out / "demo.run.json", "demo", s)
    for name, st in summary["stages"].items():
        ratio = st["final_loss"] / st["initial_loss"]
        print(f"{name:12s} loss {st['initial_loss']:.5f} -> {st['final_loss']:.5f} (x{ratio:.3f})")
    corpus = summary["evaluation"]["corpus"]
    print(f"story score mean {corpus['mean']:.4f} harmeanp {corpus['harmeanp']:.4f}")
    print(f"finished in {time.monotonic() - t0:.0f}s; summary {out / 'summary.json'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

# per-command defaults; these are also the keys a --config file may set
DEFAULTS: dict[str, dict] = {
    "synth-data": dict(stories=3, shots=4, frames=8, size=32, seed=0, out=None),
    "curate refine-masks": dict(**{"in": None}, out=None, frames=None, client=None, audit=None, jobs=1),
    "curate segment": dict(video_frames=None, fps=None, threshold=0.5, target_s=60.0, out=None),
    "train": dict(
        stage=None, data=None, ckpt_in=None, ckpt_out=None, seed=0, steps=None, batch_size=None, lr=None,
        step_scale=0.01, model="toy",
    ),
    "generate": dict(ref=None, captions=None, ckpt=None, out=None, seed=0, guidance=6.0),
    "evaluate": dict(stories=None, refs=None, embedder="histogram", out="report.json", jobs=1),
    "stats": dict(data=None, out=None),
    "demo": dict(out="demo_out", seed=0, profile="full"),
}
REQUIRED = {
    "curate refine-masks": ("in", "out"),
    "curate segment": ("video_frames", "fps"),
    "train": ("stage", "ckpt_out"),
    "generate": ("ref", "captions", "ckpt", "out"),
    "evaluate": ("stories", "refs"),
}
HANDLERS: dict[str, Callable[[dict], int]] = {
    "synth-data": cmd_synth_data,
    "curate refine-masks": cmd_curate_refine,
    "curate segment": cmd_curate_segment,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "demo": cmd_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multishot", description="Reference-guided multi-shot story video toolkit.")
    parser.add_argument(
        "--version", action="version",
        version=f"multishot {__version__} (config schema {CONFIG_SCHEMA_VERSION})",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def command(name, help_, target=None):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat JSON file of settings (flags override it)")
        p.set_defaults(target=target or name)
        return p

    p = command("synth-data", "write a synthetic story dataset")
    p.add_argument("--stories", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"dataset root (default ${DATA_ENV} or ./data)")

    p = sub.add_parser("curate", help="mask refinement and shot segmentation")
    csub = p.add_subparsers(dest="action", metavar="{refine-masks,segment}")
    csub.required = True
    q = csub.add_parser("refine-masks", help="clean, filter and verify character masks")
    q.add_argument("--config")
    q.add_argument("--in", dest="in")
    q.add_argument("--out")
    q.add_argument("--frames", help="frame root mirroring --in; enables reference extraction")
    q.add_argument("--client", help="mock or file:<responses.json>")
    q.add_argument("--audit", help="JSONL audit log (default <out>/audit.jsonl)")
    q.add_argument("--jobs", type=int)
    q.set_defaults(target="curate refine-masks")
    q = csub.add_parser("segment", help="detect shot boundaries and group them into stories")
    q.add_argument("--config")
    q.add_argument("--video-frames", dest="video_frames")
    q.add_argument("--fps", type=float)
    q.add_argument("--threshold", type=float)
    q.add_argument("--target-s", dest="target_s", type=float)
    q.add_argument("--out")
    q.set_defaults(target="curate segment")

    p = command("train", "run one training stage")
    p.add_argument("--stage", choices=("pretrain", "align", "single", "multi", "lora"))
    p.add_argument("--data", help=f"manifest or dataset root (default ${DATA_ENV})")
    p.add_argument("--ckpt-in", dest="ckpt_in")
    p.add_argument("--ckpt-out", dest="ckpt_out")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--step-scale", dest="step_scale", type=float)
    p.add_argument("--model", choices=("toy", "tiny"), help="model size when starting from scratch")

    p = command("generate", "generate a multi-shot story")
    p.add_argument("--ref")
    p.add_argument("--captions", help="text file, one caption per line")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--guidance", type=float)

    p = command("evaluate", "score generated stories against their references")
    p.add_argument("--stories")
    p.add_argument("--refs", help="directory of <story>.png references")
    p.add_argument("--embedder", help="histogram or plugin:<name>")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)

    p = command("stats", "print dataset statistics")
    p.add_argument("--data")
    p.add_argument("--out")

    p = command("demo", "run the toy end-to-end pipeline")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(DEMO_PROFILES), help="full (default) or quick plumbing check")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    target = args.target
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "target", "command", "action", "verbose")}
    try:
        settings = resolve_settings(DEFAULTS[target], args.config, flags)
        missing = [k for k in REQUIRED.get(target, ()) if settings.get(k) in (None, "")]
        if missing:
            raise UsageError(f"{target}: missing required settings {', '.join('--' + m.replace('_', '-') for m in missing)}")
        return HANDLERS[target](settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
