"""Shared fixtures: tiny models, planted datastores and a seconds-scale experiment config."""

import numpy as np
import pytest
import torch

from knnadapt.corpus import make_domain_specs
from knnadapt.datastore import Datastore
from knnadapt.models import (
    AdapterSites,
    DataConfig,
    ExperimentConfig,
    ExperimentSection,
    IndexConfig,
    KnnConfig,
    ModelConfig,
    SentencePair,
    TrainConfig,
    TrainingSection,
)
from knnadapt.network import TranslationModel

VOCAB_SIZE = 20


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        d_model=16,
        n_heads=2,
        n_enc_layers=2,
        n_dec_layers=2,
        d_ff=32,
        adapter_hidden=8,
        adapter_sites=AdapterSites.ENCODER,
        vocab_size=VOCAB_SIZE,
        max_len=32,
        dropout=0.0,
    )


@pytest.fixture
def tiny_model(tiny_model_cfg) -> TranslationModel:
    torch.manual_seed(0)
    return TranslationModel(tiny_model_cfg).eval()


@pytest.fixture
def toy_pairs() -> list[SentencePair]:
    """Ids 4..19 only, so they never collide with the specials."""
    rng = np.random.default_rng(3)
    pairs = []
    for _ in range(12):
        n = int(rng.integers(2, 6))
        source = [int(t) for t in rng.integers(4, VOCAB_SIZE, n)]
        target = [int(t) for t in rng.integers(4, VOCAB_SIZE, int(rng.integers(2, 6)))]
        pairs.append(SentencePair(source=source, target=target))
    return pairs


@pytest.fixture
def fast_train_cfg() -> TrainConfig:
    return TrainConfig(
        batch_tokens=64,
        max_steps=5,
        lr_peak=1e-3,
        warmup_steps=2,
        seed=0,
        log_interval=1,
    )


def random_store(n: int, dim: int, seed: int = 0, vocab_size: int = VOCAB_SIZE) -> Datastore:
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((n, dim)).astype(np.float32)
    values = rng.integers(4, vocab_size, n).astype(np.int64)
    return Datastore(dim, keys, values)


@pytest.fixture
def small_store() -> Datastore:
    return random_store(300, 8, seed=1)


@pytest.fixture
def domain_specs():
    return make_domain_specs(
        ["medical"], n_shared=5, n_content=10, n_ambiguous=3, reorder_window=2, seed=0
    )


@pytest.fixture
def tiny_experiment(tiny_model_cfg) -> ExperimentConfig:
    """Every stage of a full run in a few seconds; results are not meaningful."""
    train = TrainConfig(batch_tokens=200, max_steps=3, warmup_steps=1, log_interval=1)
    return ExperimentConfig(
        experiment=ExperimentSection(
            seed=5, domains=["medical"], baselines=["basic", "copy", "uda", "parallel"]
        ),
        data=DataConfig(
            general_pairs=60,
            in_domain_train=20,
            dev=4,
            test=4,
            min_len=2,
            max_len=5,
            n_shared=4,
            n_content=6,
            n_ambiguous=2,
        ),
        model=tiny_model_cfg.model_copy(update={"vocab_size": None}),
        train=TrainingSection(base=train, adapters=train, reverse=train, finetune=train),
        knn=KnnConfig(k=4, nprobe=2, lambda_grid=[0.0, 0.5]),
        index=IndexConfig(nlist=4, kmeans_iters=3),
    )


@pytest.fixture
def store_factory():
    return random_store
