import numpy as np
import pytest

from prefixvlm.model import ModelConfig, VLModel

ACCEPTANCE_LINES: list[str] = []

# a whole run config small enough for end-to-end tests (about a second per pretrain)
TINY_RUN = {
    "data": {"n_pairs": 48, "n_docs": 12, "n_eval": 4, "image_size": 8, "grid": 2},
    "tokenizer": {"vocab_size": 64},
    "model": {"max_text_len": 40, "layers_enc": 1, "layers_dec": 1, "heads": 2, "hidden": 16, "ffn_dim": 32, "image_size": [8, 8], "conv_width": 4},
    "train": {"steps": 6, "pairs_per_batch": 4, "docs_per_batch": 1, "multires_sizes": [12, 16]},
    "finetune": {"n_train": 16, "n_test": 8, "steps": 3, "batch": 4},
}


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        layers_enc=1, layers_dec=1, heads=2, hidden=16, ffn_dim=32, vocab=40,
        max_text_len=12, image_size=[8, 8], patch_size=4, conv_blocks=3, conv_width=4,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return VLModel(tiny_config(), seed=0)


@pytest.fixture
def tiny_model64():
    return VLModel(tiny_config(dtype="f64", zero_init_output=False, init_std=0.3), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
