import numpy as np
import pytest
import torch

from multishot.config import tiny_config
from multishot.model import StoryModel
from multishot.schema import SynthSpec, synthesize_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Two stories, three 2-frame shots each, 16x16 frames (matches tiny_config)."""
    root = tmp_path_factory.mktemp("tiny_data")
    return synthesize_dataset(SynthSpec(2, 3, 2, 16, 5), root)


@pytest.fixture
def tiny_model(tiny_cfg):
    return StoryModel(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=16):
    return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)


def pytest_terminal_summary(terminalreporter):
    from acceptance import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
