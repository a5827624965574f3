import numpy as np
import pytest
import torch

from multishot.config import tiny_config
from multishot.errors import ContextOverflow, EmptyShot, LengthMismatch
from multishot.inference import StoryRequest, frame_hash, generate_story, last_frame, read_captions, to_uint8
from multishot.model import StoryModel
from conftest import random_image

CAPTIONS = ("a red square glides slowly upward", "the red square turns leftward", "the red square keeps going leftward", "a red disc")


@pytest.fixture(scope="module")
def model():
    return StoryModel(tiny_config())


@pytest.fixture(scope="module")
def reference():
    return random_image(np.random.default_rng(0), 16)


def test_last_frame_picks_final_frame():
    shot = torch.linspace(-1, 1, 8).view(8, 1, 1, 1).expand(8, 2, 2, 3)
    assert (last_frame(shot) == 255).all()
    one = torch.full((1, 2, 2, 3), -1.0)
    assert (last_frame(one) == 0).all()
    with pytest.raises(EmptyShot):
        last_frame(torch.zeros(0, 2, 2, 3))


def test_to_uint8_endpoints_and_rounding():
    out = to_uint8(np.array([-1.0, 1.0, 0.0, -0.99607843, 2.0]))
    # 0.0 -> 127.5 rounds away from zero to 128
    assert out.tolist() == [0, 255, 128, 1, 255]


def test_single_shot_has_no_context(model, reference):
    out = generate_story(StoryRequest(reference, CAPTIONS[:1], seed=2), model)
    assert len(out.shots) == 1 and out.context_sizes == [(0, 0)]
    assert out.seeds == [2]


def test_context_grows_with_each_shot(model, reference):
    out = generate_story(StoryRequest(reference, CAPTIONS[:3], seed=2), model)
    assert out.context_sizes == [(0, 0), (1, 1), (2, 2)]
    assert out.seeds == [2, 3, 4]
    assert out.context_frame_hashes[1] == frame_hash(last_frame(out.shots[1]))


def test_generation_is_deterministic(model, reference):
    a = generate_story(StoryRequest(reference, CAPTIONS[:2], seed=9), model)
    b = generate_story(StoryRequest(reference, CAPTIONS[:2], seed=9), model)
    assert all(torch.equal(x, y) for x, y in zip(a.shots, b.shots))


def test_prefix_consistency(model, reference):
    three = generate_story(StoryRequest(reference, CAPTIONS[:3], seed=5), model)
    two = generate_story(StoryRequest(reference, CAPTIONS[:2], seed=5), model)
    assert all(torch.equal(x, y) for x, y in zip(two.shots, three.shots[:2]))


def test_request_needs_captions(reference):
    with pytest.raises(LengthMismatch):
        StoryRequest(reference, ())


def test_overflow_is_reported_not_truncated(reference):
    small = StoryModel(tiny_config(max_positions=30))
    with pytest.raises(ContextOverflow):
        generate_story(StoryRequest(reference, CAPTIONS, seed=0), small)


def test_read_captions_skips_blank_lines():
    assert read_captions(["  a  ", "", "b\n"]) == ("a", "b")
