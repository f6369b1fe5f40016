import numpy as np
import pytest
import torch

from amavc.embedder import EmbedderConfig, EmbedderTrainConfig, pretrain_embedder
from amavc.features import load_manifest
from amavc.synthetic import SynthesisConfig, generate

torch.set_num_threads(1)

# small enough that a full train/adapt cycle takes seconds
TINY = dict(
    n_speakers=4,
    utterances_per_speaker=12,
    frames_per_utterance=(40, 80),
    ppg_dim=8,
    mcc_dim=6,
    noise_std=0.1,
    seed=3,
    n_target_speakers=1,
)
TINY_EMBEDDER = EmbedderConfig(input_dim=6, n_res_blocks=3, channels=16, embedding_dim=16)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate(SynthesisConfig(**TINY), out)
    return load_manifest(out / "manifest.json")


@pytest.fixture(scope="session")
def tiny_embedder(tiny_corpus):
    return pretrain_embedder(tiny_corpus, TINY_EMBEDDER, EmbedderTrainConfig(steps=60, crop_range=(16, 64)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
