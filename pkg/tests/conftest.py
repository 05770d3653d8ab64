"""Общие фикстуры: маленький корпус, маленькая конфигурация, изоляция логов."""
import numpy as np
import pytest

from app.config import settings
from app.data import generate
from app.schemas import CorpusSpec, EncoderConfig, LossConfig, TrainConfig


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "log_dir", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "results_file", "")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return CorpusSpec(n_samples=120, n_latent_clusters=4, latent_dim=4, d1=6, d2=5, noise_sigma=0.05, seed=3)


@pytest.fixture
def small_corpus(small_spec):
    return generate(small_spec)


@pytest.fixture
def small_config():
    # 120 образцов, батч 16: семь полных батчей и хвост из 8, итого 8 шагов на эпоху
    return TrainConfig(
        epochs=2,
        batch_size=16,
        base_lr=0.05,
        k_prototypes=6,
        loss=LossConfig(queue_length=32),
        encoder=EncoderConfig(input_dims=(6, 5), hidden_dims=[12], embed_dim=6),
        seed=5,
    )
