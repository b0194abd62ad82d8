"""Shared fixtures: tiny models for fast tests, one trained desk model for
the experiment-level acceptance criteria (cached on disk across runs)."""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from tokdiv.harness import batch_stream, synthetic_corpus
from tokdiv.model import ModelConfig, ToyModel, load_model, random_init, save_model
from tokdiv.train import TrainConfig, loss_and_grads, sgd_step

settings.register_profile("suite", deadline=None, derandomize=True)
settings.load_profile("suite")

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"


TINY = ModelConfig(vocab_size=16, d_model=8, n_heads=2, n_layers=2, d_ff=12, max_seq=48)
SMALL = ModelConfig(vocab_size=64, d_model=16, n_heads=2, n_layers=2, d_ff=24, max_seq=64)
DESK = ModelConfig()  # vocab 256, d_model 64, 4 heads, 4 layers, d_ff 172


@pytest.fixture(scope="session")
def tiny_model():
    return random_init(TINY, seed=7)


@pytest.fixture(scope="session")
def small_model():
    return random_init(SMALL, seed=11)


def train_on_corpus(model: ToyModel, steps: int, tconf: TrainConfig) -> ToyModel:
    corpus = synthetic_corpus(seed=3, size=400_000)
    batches = batch_stream(corpus, tconf.batch_size, tconf.seq_len, seed=tconf.seed)
    for _ in range(steps):
        loss, grads = loss_and_grads(model, next(batches))
        sgd_step(model, grads, tconf)
    return model


def _cached_trained(name: str, config: ModelConfig, init_seed: int, steps: int,
                    tconf: TrainConfig) -> ToyModel:
    CACHE_DIR.mkdir(exist_ok=True)
    tag = hashlib.sha256(
        repr((name, config, init_seed, steps, tconf)).encode()
    ).hexdigest()[:16]
    path = CACHE_DIR / f"{name}_{tag}.bin"
    if path.exists():
        return load_model(path)
    model = train_on_corpus(random_init(config, seed=init_seed), steps, tconf)
    save_model(model, path)
    return model


@pytest.fixture(scope="session")
def trained_small_model():
    """2-layer byte-vocab model trained enough for non-degenerate decoding."""
    config = ModelConfig(vocab_size=256, d_model=32, n_heads=2, n_layers=2,
                         d_ff=64, max_seq=256)
    tconf = TrainConfig(learning_rate=3e-3, batch_size=16, seq_len=96, seed=5)
    return _cached_trained("small_trained", config, init_seed=13, steps=400, tconf=tconf)


@pytest.fixture(scope="session")
def trained_desk_model():
    """Default desk config trained on the synthetic byte corpus (pinned seeds)."""
    tconf = TrainConfig(learning_rate=3e-3, batch_size=16, seq_len=128, seed=5)
    return _cached_trained("desk_trained", DESK, init_seed=17, steps=2000, tconf=tconf)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
