"""
Плотные матричные примитивы над numpy float64.

Все функции чистые: вход не изменяется, результат в новом массиве.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from app.errors import InputError, ParameterError, ShapeError

DTYPE = np.float64


class NormalizedRows(NamedTuple):
    values: np.ndarray
    zero_rows: np.ndarray  # булева маска строк с нулевой нормой


def as_matrix(data: ArrayLike, name: str = "matrix") -> np.ndarray:
    """Приводит вход к 2-D float64 и проверяет конечность."""
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise InputError(f"{name}: expected a 2-D matrix, got {m.ndim}-D")
    if not np.isfinite(m).all():
        raise InputError(f"{name}: contains non-finite entries")
    return m


def ordered_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    a @ b без BLAS: накопление по внутреннему индексу строго слева направо,
    поэтому результат не зависит от платформы и числа потоков.
    """
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for j in range(a.shape[1]):
        out += np.multiply.outer(a[:, j], b[j])
    return out


def ordered_matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """m @ v для вектора v; cumsum идёт вдоль строки слева направо."""
    if m.shape[1] == 0:
        return np.zeros(m.shape[0], dtype=DTYPE)
    return np.cumsum(m * v, axis=1)[:, -1]


def matmul(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return ordered_product(a, b)


def softmax_rows(m: ArrayLike, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    m = as_matrix(m) / temperature
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m: ArrayLike, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    m = as_matrix(m) / temperature
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def l2_normalize_rows(m: ArrayLike) -> NormalizedRows:
    """
    Нормирует строки до единичной евклидовой нормы.
    Нулевые строки возвращаются как есть и помечаются в маске.
    """
    m = as_matrix(m)
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    zero = norms[:, 0] == 0.0
    safe = np.where(zero[:, None], 1.0, norms)
    return NormalizedRows(m / safe, zero)


def row_entropy(p: ArrayLike) -> np.ndarray:
    """Энтропия каждой строки с соглашением 0·log 0 = 0."""
    p = as_matrix(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)
