"""
Swapped-prediction loss: код одной модальности предсказывается по
эмбеддингу другой, и наоборот, плюс очередь признаков прошлых итераций.

Коды считаются по [батч ∥ очередь], но в потерю попадают только B столбцов
текущего батча. Коды являются константами (stop-gradient).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from app.errors import InputError, ParameterError, ShapeError
from app.model import PrototypeBank, prototype_scores
from app.numerics import DTYPE, GradientTape, Variable, autograd, constant, detach, matmul
from app.schemas import LossConfig
from app.sinkhorn import CodeMatrix, compute_codes

logger = logging.getLogger(__name__)


@dataclass
class FeatureQueue:
    """Кольцевой буфер эмбеддингов по модальностям: rows[m] имеет форму length × D."""

    rows: np.ndarray
    fill: int = 0
    cursor: int = 0

    @classmethod
    def empty(cls, length: int, dim: int) -> "FeatureQueue":
        return cls(np.zeros((2, length, dim), dtype=DTYPE))

    @property
    def length(self) -> int:
        return self.rows.shape[1]

    def contents(self, modality: int) -> np.ndarray:
        """Сохранённые строки модальности от старых к новым."""
        if self.fill < self.length:
            return self.rows[modality, : self.fill].copy()
        return np.roll(self.rows[modality], -self.cursor, axis=0)

    def copy(self) -> "FeatureQueue":
        return FeatureQueue(self.rows.copy(), self.fill, self.cursor)


@dataclass(frozen=True)
class AssignmentDistribution:
    p: Variable  # B × K

    @property
    def values(self) -> np.ndarray:
        return self.p.value


@dataclass(frozen=True)
class SwappedCodes:
    q1: np.ndarray  # B × K, строки являются распределениями
    q2: np.ndarray
    codes1: CodeMatrix
    codes2: CodeMatrix
    used_queue: bool


@dataclass(frozen=True)
class LossOutput:
    loss: Variable
    codes: SwappedCodes

    @property
    def value(self) -> float:
        return self.loss.item()


def enqueue(queue: FeatureQueue, z1: Variable | ArrayLike, z2: Variable | ArrayLike) -> FeatureQueue:
    """
    Вставка в кольцо, старейшие строки вытесняются первыми. Хранятся
    отсоединённые копии: связи с лентой не остаётся.
    """
    if queue.length == 0:
        return queue
    z1, z2 = detach(z1), detach(z2)
    for rows in (z1, z2):
        if rows.ndim != 2 or rows.shape[1] != queue.rows.shape[2]:
            raise ShapeError("enqueue", rows.shape, queue.rows.shape[1:])
    n = z1.shape[0]
    # если батч длиннее очереди, остаются только последние length строк
    start = max(0, n - queue.length)
    for offset in range(start, n):
        slot = queue.cursor
        queue.rows[0, slot] = z1[offset]
        queue.rows[1, slot] = z2[offset]
        queue.cursor = (slot + 1) % queue.length
    queue.fill = min(queue.length, queue.fill + n)
    return queue


def predict_assignments(
    z: Variable | ArrayLike,
    bank: PrototypeBank,
    temperature: float,
    tape: GradientTape | None = None,
) -> AssignmentDistribution:
    """p[b, k] = softmax_k(z_b · c_k / τ)."""
    scores = prototype_scores(z, bank, tape)
    return AssignmentDistribution(autograd.softmax_rows(scores.T, temperature))


def cross_entropy_term(p: AssignmentDistribution | Variable | ArrayLike, q_cols: ArrayLike) -> Variable:
    """Среднее по батчу −Σ_k q[b,k]·log p[b,k]; log отсечён на 1e-12."""
    if isinstance(p, AssignmentDistribution):
        p = p.p
    p = constant(p)
    q = np.asarray(q_cols, dtype=DTYPE)
    if p.shape != q.shape:
        raise ShapeError("cross_entropy_term", p.shape, q.shape)
    per_sample = autograd.sum_rows(autograd.mul(q, autograd.log(p)))
    return -autograd.mean(per_sample)


def _batch_codes(z: np.ndarray, bank: PrototypeBank, extra: np.ndarray | None, config: LossConfig) -> tuple[np.ndarray, CodeMatrix]:
    feats = z if extra is None or extra.shape[0] == 0 else np.vstack([z, extra])
    codes = compute_codes(matmul(bank.c, feats.T), config.sinkhorn)
    batch = codes.q[:, : z.shape[0]]
    # столбцы Q суммируются в 1/B; для кросс-энтропии нужны распределения по K
    return (batch / batch.sum(axis=0, keepdims=True)).T, codes


def compute_swapped_codes(
    z1: Variable | ArrayLike,
    z2: Variable | ArrayLike,
    bank: PrototypeBank,
    queue: FeatureQueue | None,
    config: LossConfig,
    iteration: int = 0,
) -> SwappedCodes:
    z1, z2 = detach(z1), detach(z2)
    if z1.ndim != 2 or z1.shape[0] == 0:
        raise InputError("swapped loss needs a non-empty batch")
    if z1.shape != z2.shape:
        raise ShapeError("swapped_loss", z1.shape, z2.shape)

    start = config.queue_start_iteration
    if queue is not None and start is None:
        # None означает «после первой эпохи»; длину эпохи знает только тренер
        raise ParameterError("queue_start_iteration must be resolved to an iteration before the queue is used")
    use_queue = queue is not None and queue.fill > 0 and iteration >= start
    if z1.shape[0] == 1 and not use_queue:
        logger.warning("Batch of one sample with an empty queue: codes are uniform, loss is uninformative")

    q1, codes1 = _batch_codes(z1, bank, queue.contents(0) if use_queue else None, config)
    q2, codes2 = _batch_codes(z2, bank, queue.contents(1) if use_queue else None, config)
    return SwappedCodes(q1, q2, codes1, codes2, use_queue)


def swapped_loss_from_codes(
    z1: Variable | ArrayLike,
    z2: Variable | ArrayLike,
    bank: PrototypeBank,
    q1: ArrayLike,
    q2: ArrayLike,
    temperature: float,
    tape: GradientTape | None = None,
) -> Variable:
    """l(z1, q2) + l(z2, q1) при фиксированных кодах."""
    p1 = predict_assignments(z1, bank, temperature, tape)
    p2 = predict_assignments(z2, bank, temperature, tape)
    return cross_entropy_term(p1, q2) + cross_entropy_term(p2, q1)


def swapped_loss(
    z1: Variable | ArrayLike,
    z2: Variable | ArrayLike,
    bank: PrototypeBank,
    queue: FeatureQueue | None,
    config: LossConfig,
    iteration: int = 0,
    tape: GradientTape | None = None,
) -> LossOutput:
    """
    Полный шаг функции потерь: коды по батчу и очереди, симметричная
    кросс-энтропия, затем z1 и z2 (отсоединённые) уходят в очередь.
    """
    codes = compute_swapped_codes(z1, z2, bank, queue, config, iteration)
    loss = swapped_loss_from_codes(z1, z2, bank, codes.q1, codes.q2, config.temperature, tape)
    if queue is not None:
        enqueue(queue, z1, z2)
    return LossOutput(loss, codes)


def code_usage_entropy(q1: ArrayLike, q2: ArrayLike) -> float:
    """Энтропия среднего по батчу (обе модальности) распределения кодов по K."""
    usage = np.vstack([np.asarray(q1, dtype=DTYPE), np.asarray(q2, dtype=DTYPE)]).mean(axis=0)
    positive = usage[usage > 0]
    return float(-(positive * np.log(positive)).sum())
