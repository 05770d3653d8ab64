"""
Равномерно распределённые мягкие коды Q по оценкам прототипов.

Энтропийно-регуляризованный оптимальный транспорт на транспортном
политопе с равномерными маргиналами: строки Q суммируются в 1/K, столбцы в 1/B.
Решение имеет вид Q* = Diag(λ)·exp(scores/ε)·Diag(μ); векторы λ, μ находятся
итерациями Синхорна–Кноппа (сначала строки, потом столбцы в каждом проходе).

Через коды градиент не течёт: это константы для функции потерь.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from app.errors import InputError, ShapeError
from app.numerics import DTYPE
from app.numerics.matrix import ordered_matvec
from app.schemas import SinkhornConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinkhornState:
    lam: np.ndarray  # K положительных множителей строк
    mu: np.ndarray   # B положительных множителей столбцов


@dataclass(frozen=True)
class CodeMatrix:
    q: np.ndarray  # K × B, неотрицательная
    state: SinkhornState
    n_sweeps: int
    row_deviation: float
    col_deviation: float
    history: list[float] = field(default_factory=list)  # L1-ошибка маргинала строк после каждого прохода

    @property
    def k(self) -> int:
        return self.q.shape[0]

    @property
    def b(self) -> int:
        return self.q.shape[1]

    def columns_as_distributions(self) -> np.ndarray:
        """Столбцы, перемасштабированные до суммы 1, в виде B × K."""
        sums = self.q.sum(axis=0, keepdims=True)
        return (self.q / sums).T


def compute_codes(scores: ArrayLike, config: SinkhornConfig | None = None) -> CodeMatrix:
    config = config or SinkhornConfig()
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
        raise InputError(f"scores must be a non-empty K×B matrix, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise InputError("scores contain non-finite entries")

    k, b = scores.shape
    scaled = scores / config.epsilon
    # Вычитание глобального максимума: exp не переполняется
    kernel = np.exp(scaled - scaled.max())
    kernel_t = np.ascontiguousarray(kernel.T)
    row_target = 1.0 / k
    col_target = 1.0 / b

    lam = np.ones(k, dtype=DTYPE)
    mu = np.ones(b, dtype=DTYPE)
    history: list[float] = []
    row_dev = col_dev = np.inf
    sweeps = 0
    for sweeps in range(1, config.n_iterations + 1):
        lam = row_target / ordered_matvec(kernel, mu)
        mu = col_target / ordered_matvec(kernel_t, lam)

        row_sums = lam * ordered_matvec(kernel, mu)
        col_sums = mu * ordered_matvec(kernel_t, lam)
        row_err = np.abs(row_sums - row_target)
        row_dev = float(row_err.max())
        col_dev = float(np.abs(col_sums - col_target).max())
        history.append(float(row_err.sum()))
        if config.convergence_tolerance > 0 and row_dev < config.convergence_tolerance and col_dev < config.convergence_tolerance:
            break

    q = lam[:, None] * kernel * mu[None, :]
    if config.convergence_tolerance > 0 and row_dev >= config.convergence_tolerance:
        logger.debug(f"Sinkhorn stopped after {sweeps} sweeps, row deviation {row_dev:.3e}")
    return CodeMatrix(
        q=q,
        state=SinkhornState(lam=lam, mu=mu),
        n_sweeps=sweeps,
        row_deviation=row_dev,
        col_deviation=col_dev,
        history=history,
    )


def entropy(q: CodeMatrix | ArrayLike) -> float:
    values = q.q if isinstance(q, CodeMatrix) else np.asarray(q, dtype=DTYPE)
    positive = values[values > 0]
    return float(-(positive * np.log(positive)).sum())


def transport_objective(scores: ArrayLike, q: CodeMatrix | ArrayLike, epsilon: float) -> float:
    """Tr(Qᵀ·scores) + ε·H(Q). Используется как оракул в тестах."""
    scores = np.asarray(scores, dtype=DTYPE)
    values = q.q if isinstance(q, CodeMatrix) else np.asarray(q, dtype=DTYPE)
    if scores.shape != values.shape:
        raise ShapeError("transport_objective", scores.shape, values.shape)
    return float((values * scores).sum()) + epsilon * entropy(values)
