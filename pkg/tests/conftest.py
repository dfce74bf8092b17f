"""Shared fixtures: a small corpus/model pair reused across test modules."""

import pytest
import torch
from hypothesis import HealthCheck, settings

from mclab.data import CorpusSpec, generate_corpus, split_corpus
from mclab.model import ModelConfig, TrainConfig, build_model, fit_contrastive

settings.register_profile(
    "desk", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("desk")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec() -> CorpusSpec:
    return CorpusSpec(classes=4, per_class=40, image_size=32)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return generate_corpus(tiny_spec)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return split_corpus(tiny_corpus, (0.4, 0.3, 0.15, 0.15), seed=1)


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_corpus, tiny_spec) -> ModelConfig:
    return ModelConfig(image_size=tiny_spec.image_size, conv_channels=(16, 32),
                       gn_groups=8, embed_dim=32, text_width=32,
                       vocab_size=tiny_corpus.vocab.size,
                       max_caption_len=tiny_spec.max_caption_len)


@pytest.fixture(scope="session")
def _fresh_pair_base(tiny_model_cfg):
    return build_model(tiny_model_cfg, seed=0)


@pytest.fixture
def tiny_pair(_fresh_pair_base):
    """Untrained model; function-scoped clone so tests can mutate freely."""
    return _fresh_pair_base.clone()


@pytest.fixture(scope="session")
def _trained_pair_base(tiny_model_cfg, tiny_split):
    pair = build_model(tiny_model_cfg, seed=0)
    fit_contrastive(pair, tiny_split.pretrain.pixels, tiny_split.pretrain.tokens,
                    TrainConfig(epochs=4, batch_size=32, lr=3e-4, seed=0))
    return pair


@pytest.fixture
def trained_pair(_trained_pair_base):
    """Briefly trained model; function-scoped clone."""
    return _trained_pair_base.clone()
