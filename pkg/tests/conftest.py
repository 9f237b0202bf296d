import numpy as np
import pytest
import torch

from synthiqa.agents import BUILTIN_AGENTS
from synthiqa.distortions import synthesize_corpus
from synthiqa.fixtures import bundled_fixture_dir, make_pristine
from synthiqa.pairs import label_pairs, sample_pairs

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def natural_image():
    """The synthetic-photo fixture image, used wherever a 'natural' test image is needed."""
    return make_pristine(3, seed=0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return synthesize_corpus(bundled_fixture_dir(), 10, 11, out)


@pytest.fixture(scope="session")
def small_pairs(small_corpus):
    agents = [BUILTIN_AGENTS[n] for n in ("gmsd", "mdsi", "srsim")]
    pairs = sample_pairs(small_corpus, 48, rng=np.random.default_rng(5))
    return label_pairs(pairs, agents)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance result; the lines are repeated in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append((number, line))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
