"""Оракул конечных разностей для проверки градиентов ленты."""
from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

DEFAULT_STEP = 1e-4
MAGNITUDE_FLOOR = 1e-6


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """
    Численный градиент скалярной функции по массиву x.

    Используется пятиточечная центральная схема
    (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h с ошибкой O(h^4).
    x не изменяется.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        values = []
        for offset in (2.0, 1.0, -1.0, -2.0):
            flat[i] = original + offset * step
            values.append(float(fn(x)))
        flat[i] = original
        f_p2, f_p1, f_m1, f_m2 = values
        out[i] = (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = MAGNITUDE_FLOOR) -> float:
    """
    Максимум |a - n| / max(|a|, |n|) по компонентам, где max(|a|, |n|) > floor.
    Если таких компонент нет, 0.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / scale[mask]).max())


def compare_gradients(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = DEFAULT_STEP,
) -> dict[str, float]:
    """
    Сравнивает аналитические градиенты с численными для каждого параметра.
    loss_fn получает полный словарь параметров; варьируется только один.
    """
    errors: dict[str, float] = {}
    for name, value in params.items():
        def partial(x: np.ndarray, _name: str = name) -> float:
            current = dict(params)
            current[_name] = x
            return loss_fn(current)

        numeric = central_difference(partial, value, step)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors
