"""
Синтетический корпус парных модальностей и его бинарный контейнер MMP1.

Каждый образец есть точка скрытого кластера, которую две фиксированные
случайные линейные карты переводят в пространства модальностей (d1 и d2),
каждая со своим гауссовым шумом. Строка i обеих модальностей даёт два взгляда
на один и тот же скрытый образец.

Гауссовы числа: преобразование Бокса–Мюллера над равномерными числами
генератора PCG64; потоки для центров, карт, меток и шума получаются
расщеплением SeedSequence(seed).spawn(4).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from app.errors import ConfigurationError, UnsupportedVersionError
from app.numerics import DTYPE, matmul
from app.schemas import CorpusSpec
from app.utils import BinaryReader, BinaryWriter, read_bytes, write_bytes

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"MMP1"
CORPUS_VERSION = 1
MIN_BATCH = 2


@dataclass(frozen=True)
class PairedCorpus:
    modality1: np.ndarray  # n × d1
    modality2: np.ndarray  # n × d2
    labels: np.ndarray | None = None  # n индексов кластеров, только для оценки

    @property
    def n(self) -> int:
        return self.modality1.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.modality1.shape[1], self.modality2.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def modality(self, index: int) -> np.ndarray:
        return self.modality1 if index == 0 else self.modality2

    def subset(self, indices: np.ndarray) -> "PairedCorpus":
        labels = None if self.labels is None else self.labels[indices]
        return PairedCorpus(self.modality1[indices], self.modality2[indices], labels)


@dataclass(frozen=True)
class ModalityBatch:
    x1: np.ndarray
    x2: np.ndarray
    sample_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.sample_indices)


def gaussian(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Стандартные нормальные числа по Боксу–Мюллеру."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], чтобы log был конечен
    u2 = rng.random(m)
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * m, dtype=DTYPE)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:n].reshape(shape)


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(child)) for child in np.random.SeedSequence(seed).spawn(4)]


def generate(spec: CorpusSpec | dict[str, Any]) -> PairedCorpus:
    if not isinstance(spec, CorpusSpec):
        try:
            spec = CorpusSpec.model_validate(spec)
        except ValidationError as e:
            raise ConfigurationError(f"invalid corpus spec: {e}") from e

    centers_rng, maps_rng, labels_rng, noise_rng = _streams(spec.seed)
    k, dim = spec.n_latent_clusters, spec.latent_dim

    centers = gaussian(centers_rng, (k, dim))
    centers /= np.sqrt((centers * centers).sum(axis=1, keepdims=True))
    map1 = gaussian(maps_rng, (dim, spec.d1)) / np.sqrt(dim)
    map2 = gaussian(maps_rng, (dim, spec.d2)) / np.sqrt(dim)

    labels = labels_rng.integers(0, k, size=spec.n_samples)
    latent = centers[labels] + spec.noise_sigma * gaussian(noise_rng, (spec.n_samples, dim))
    x1 = matmul(latent, map1) + spec.noise_sigma * gaussian(noise_rng, (spec.n_samples, spec.d1))
    x2 = matmul(latent, map2) + spec.noise_sigma * gaussian(noise_rng, (spec.n_samples, spec.d2))

    logger.info(
        f"Generated corpus: n={spec.n_samples}, clusters={k}, d1={spec.d1}, d2={spec.d2}, "
        f"sigma={spec.noise_sigma}, seed={spec.seed}"
    )
    return PairedCorpus(x1, x2, labels.astype(np.int64))


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= MIN_BATCH else 0)


def batches(corpus: PairedCorpus, batch_size: int, epoch_seed: int) -> list[ModalityBatch]:
    """
    Перемешивание с зерном эпохи и нарезка на батчи. Хвост короче двух
    образцов отбрасывается (при B = 1 коды Синхорна вырождены).
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(corpus.n)
    result: list[ModalityBatch] = []
    for start in range(0, corpus.n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < MIN_BATCH and len(idx) < batch_size:
            continue
        result.append(ModalityBatch(corpus.modality1[idx], corpus.modality2[idx], idx))
    return result


def save_corpus(corpus: PairedCorpus, path: str | Path) -> None:
    n, (d1, d2) = corpus.n, corpus.dims
    writer = BinaryWriter()
    writer.raw(CORPUS_MAGIC)
    writer.u32(CORPUS_VERSION)
    writer.u32(n)
    writer.u32(d1)
    writer.u32(d2)
    writer.u8(1 if corpus.has_labels else 0)
    writer.raw(b"\x00" * 3)
    writer.f64_array(corpus.modality1)
    writer.f64_array(corpus.modality2)
    if corpus.has_labels:
        writer.u32_array(corpus.labels)
    write_bytes(path, writer.getvalue())
    logger.info(f"Corpus saved to {path} ({n} samples)")


def load_corpus(path: str | Path) -> PairedCorpus:
    reader = BinaryReader(read_bytes(path))
    reader.magic(CORPUS_MAGIC)
    version_offset = reader.offset
    version = reader.u32("version")
    if version != CORPUS_VERSION:
        raise UnsupportedVersionError(f"unsupported corpus version {version}", version_offset)
    n = reader.u32("n")
    d1 = reader.u32("d1")
    d2 = reader.u32("d2")
    has_labels = reader.u8("has_labels")
    reader.raw(3, "padding")
    x1 = reader.f64_array(n * d1, "modality-1 payload").reshape(n, d1)
    x2 = reader.f64_array(n * d2, "modality-2 payload").reshape(n, d2)
    labels = reader.u32_array(n, "labels") if has_labels else None
    reader.expect_end()
    logger.info(f"Corpus loaded from {path} ({n} samples)")
    return PairedCorpus(x1, x2, labels)
