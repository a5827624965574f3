import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multishot.backbone import ConditionBackbone, TextEncoderStub, Vocabulary, image_to_tensor
from multishot.config import ModelConfig, tiny_config
from multishot.errors import ContextOverflow, LengthMismatch, QueryBlockMissing, ResolutionMismatch
from conftest import random_image


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return ConditionBackbone(tiny_config(image_size=32, max_positions=512)).eval()


@pytest.mark.parametrize("patch, n", [(8, 16), (16, 4)])
def test_embed_image_patch_count(patch, n):
    bb = ConditionBackbone(tiny_config(image_size=32, mllm_patch=patch))
    out = bb.embed_image(np.zeros((32, 32, 3), np.uint8))
    assert out.shape == (n, bb.cfg.d_mllm)


def test_embed_image_rejects_bad_resolution(backbone):
    with pytest.raises(ResolutionMismatch):
        backbone.embed_image(np.zeros((33, 32, 3), np.uint8))
    with pytest.raises(ResolutionMismatch):
        backbone.embed_image(np.zeros((16, 16, 3), np.uint8))
    with pytest.raises(ResolutionMismatch):
        backbone.embed_image(np.zeros((32, 32), np.uint8))


def test_image_to_tensor_range():
    t = image_to_tensor(np.array([[[0, 255, 128]]], np.uint8), torch.float64)
    assert t.tolist() == [[[-1.0, 1.0, 128 / 127.5 - 1.0]]]


def test_vocabulary_maps_unknown_words_to_zero():
    vocab = Vocabulary.default()
    assert vocab.encode("") == []
    ids = vocab.encode("A red square zzzunknown")
    assert ids[-1] == 0 and all(i > 0 for i in ids[:-1])


def test_first_shot_layout(backbone, rng):
    seq = backbone.build_sequence(random_image(rng, 32), ["a red square"], [])
    assert seq.layout() == ["reference", "caption", "query"]
    assert seq.num_query_blocks == 1


def test_three_shot_layout(backbone, rng):
    img = lambda: random_image(rng, 32)  # noqa: E731
    seq = backbone.build_sequence(img(), ["a", "b c", "d"], [img(), img()])
    assert seq.layout() == ["reference"] + ["caption", "query", "frame"] * 2 + ["caption", "query"]
    assert seq.num_query_blocks == 3
    q = backbone.cfg.query_len
    for start in seq.query_starts:
        assert seq.roles[start : start + q] == ["query"] * q
    assert len(seq.roles) == len(seq)


def test_frame_count_must_be_captions_minus_one(backbone, rng):
    with pytest.raises(LengthMismatch):
        backbone.build_sequence(random_image(rng, 32), ["a", "b"], [random_image(rng, 32)] * 2)
    with pytest.raises(LengthMismatch):
        backbone.build_sequence(random_image(rng, 32), [], [])


def test_context_overflow_is_reported(rng):
    bb = ConditionBackbone(tiny_config(image_size=32, max_positions=40))
    frames = [random_image(rng, 32)] * 3
    with pytest.raises(ContextOverflow):
        bb.build_sequence(random_image(rng, 32), ["a"] * 4, frames)


def test_condition_shape_at_full_scale_sizes(rng):
    cfg = ModelConfig(layers=1, adapter_layers=1)
    bb = ConditionBackbone(cfg).eval()
    seq = bb.build_sequence(random_image(rng, 32), ["a red square", "b"], [random_image(rng, 32)])
    with torch.no_grad():
        for i in range(2):
            assert bb.compute_condition(seq, i).shape == (64, 128)


def test_missing_query_block(backbone, rng):
    seq = backbone.build_sequence(random_image(rng, 32), ["a"], [])
    with pytest.raises(QueryBlockMissing):
        backbone.compute_condition(seq, 1)
    with pytest.raises(IndexError):
        backbone.compute_condition(seq, -1)


def test_condition_is_deterministic(rng):
    cfg = tiny_config(image_size=32)
    img, frame = random_image(rng, 32), random_image(rng, 32)
    outs = []
    for _ in range(2):
        torch.manual_seed(cfg.seed)
        bb = ConditionBackbone(cfg).eval()
        with torch.no_grad():
            outs.append(bb.compute_condition(bb.build_sequence(img, ["a", "b"], [frame]), 1).values)
    assert torch.equal(outs[0], outs[1])


def test_batched_conditions_match_single(backbone, rng):
    seq = backbone.build_sequence(random_image(rng, 32), ["a", "b", "c"], [random_image(rng, 32)] * 2)
    with torch.no_grad():
        all_conds = backbone.compute_conditions(seq)
        for i in range(3):
            torch.testing.assert_close(all_conds[i].values, backbone.compute_condition(seq, i).values)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_condition_ignores_later_captions_and_frames(seed, n):
    """Cond_i only depends on tokens up to and including its query block."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(0)
    bb = ConditionBackbone(tiny_config(image_size=32, max_positions=512)).double().eval()
    words = ["red", "square", "glides", "slowly", "a", "disc", "upward"]
    caps = [" ".join(rng.choice(words, 3)) for _ in range(n + 1)]
    frames = [random_image(rng, 32) for _ in range(n)]
    i = int(rng.integers(0, n))
    with torch.no_grad():
        base = bb.compute_condition(bb.build_sequence(frames[0], caps, frames), i).values
        later_caps = caps[: i + 1] + [c + " quickly" for c in caps[i + 1 :]]
        later_frames = frames[:i] + [255 - f for f in frames[i:]]
        moved = bb.compute_condition(bb.build_sequence(frames[0], later_caps, later_frames), i).values
    assert (base - moved).abs().max().item() <= 1e-12


def test_condition_shape_constant_over_context(backbone, rng):
    shapes = set()
    with torch.no_grad():
        for ctx in range(5):
            seq = backbone.build_sequence(random_image(rng, 32), ["a"] * (ctx + 1), [random_image(rng, 32)] * ctx)
            shapes.add(backbone.compute_condition(seq, ctx).shape)
    assert shapes == {(backbone.cfg.query_len, backbone.cfg.d_cond)}


def test_text_stub_is_frozen_and_broadcast():
    cfg = tiny_config()
    stub = TextEncoderStub(cfg)
    assert not any(p.requires_grad for p in stub.parameters())
    out = stub("a red square")
    assert out.shape == (cfg.query_len, cfg.d_cond)
    assert torch.equal(out[0], out[-1])
    assert not stub("").any()
