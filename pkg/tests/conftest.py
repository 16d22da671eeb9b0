import numpy as np
import pytest

from dgpnet.config import EmbeddingConfig, GraphConfig, ModelConfig, preset
from dgpnet.data import SynthSpec, hybrid_split, synth_dataset
from dgpnet.harness import Episode


def tiny_config(n_way=3, k_shot=2, **graph):
    """Small network for fast structural and gradient tests."""
    emb = EmbeddingConfig(input_size=8, stem_filters=3, stem_stride=1, block_widths=(3, 4, 5), basic_blocks_per_stage=1)
    g = GraphConfig(n_way=n_way, k_shot=k_shot, adjacency_widths=(6, 4, 1), hidden_width=5, iterations=2)
    for k, v in graph.items():
        setattr(g, k, v)
    return ModelConfig(embedding=emb, graph=g).validate()


def random_episode(rng, n_way, k_shot, side):
    nk = n_way * k_shot
    return Episode(
        support_images=rng.random((nk, side, side)),
        support_labels=np.repeat(np.arange(n_way), k_shot),
        support_angles=rng.integers(0, 2, nk),
        support_indices=np.arange(nk),
        query_image=rng.random((side, side)),
        query_label=int(rng.integers(n_way)),
        query_angle=int(rng.integers(0, 2)),
        query_index=nk,
        classes=np.arange(n_way),
    )


@pytest.fixture(scope="session")
def synth():
    return synth_dataset(SynthSpec(samples_per_angle=12, seed=3))


@pytest.fixture(scope="session")
def splits3(synth):
    return hybrid_split(synth, 3)


@pytest.fixture
def desk3():
    return preset("desk", 3, 5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
