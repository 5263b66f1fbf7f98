"""Shared fixtures: a seeded synthetic corpus and pretrained desk-scale checkpoints.

The pretrained checkpoints are session-scoped because several modules (continual,
evalbench, acceptance) exercise finetuning on top of the same general model.
"""

import pytest

from discoasr.config import load_config
from discoasr.datagen import generate_corpus
from discoasr.disconformer import DisConformer
from discoasr.training import TrainData, train

PRETRAIN_SEED = 42
CORPUS_SEED = 42


def pretrain(preset: str, bundle):
    cfg = load_config(preset=preset)
    model = DisConformer.build(cfg.model, PRETRAIN_SEED)
    data = TrainData(train=bundle.original["train"], dev=bundle.original["dev"])
    result = train(model, data, cfg.training, seed=PRETRAIN_SEED)
    return cfg, (result.best or result.final)


@pytest.fixture(scope="session")
def bundle42():
    cfg = load_config(preset="tiny-ff")
    return generate_corpus(cfg.data, CORPUS_SEED)


@pytest.fixture(scope="session")
def tinyff(bundle42):
    """(RunConfig, Checkpoint) for the disentangled feed-forward desk model."""
    return pretrain("tiny-ff", bundle42)


@pytest.fixture(scope="session")
def tinybase(bundle42):
    """(RunConfig, Checkpoint) for the plain baseline desk model."""
    return pretrain("tiny-base-ff", bundle42)


@pytest.fixture(scope="session")
def conv_trio(bundle42):
    """Checkpoints for the conv-variant recombination grid: disco, base, wide donor."""
    out = {}
    for preset, key in (("tiny-conv", "disco"), ("tiny-base-conv", "base"),
                        ("tiny-wide-conv", "wide_base")):
        cfg, ckpt = pretrain(preset, bundle42)
        out[key] = (cfg, ckpt)
    return out
