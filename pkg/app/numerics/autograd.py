"""
Обратный режим автоматического дифференцирования на ленте.

Каждая операция над Variable, у которой хотя бы один вход записан на ленту,
добавляет на ту же ленту узел со значением и функциями VJP для родителей.
Узлы хранятся в порядке создания, поэтому обратный проход сводится к
обходу ленты с конца. Градиенты накапливаются в локальном списке и ленту
не изменяют: повторный backward даёт тот же результат.

Лента принадлежит одному владельцу и не разделяется между потоками.
"""
from __future__ import annotations

from collections.abc import Callable
from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from app.errors import ParameterError, ShapeError, UsageError
from app.numerics import matrix

VJP = Callable[[np.ndarray], np.ndarray]

LOG_CLAMP = 1e-12


class Variable:
    __slots__ = ("value", "tape", "index")
    # numpy отдаёт бинарные операции с Variable нашим __r*__ методам
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: "GradientTape | None" = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Variable":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UsageError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self) -> str:
        where = "tape" if self.tape is not None else "const"
        return f"Variable(shape={self.shape}, {where})"


Operand = Union[Variable, ArrayLike]


class GradientTape:
    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[tuple[int, VJP], ...]] = []
        self._watched: dict[str, Variable] = {}

    def __len__(self) -> int:
        return len(self._values)

    @property
    def watched(self) -> dict[str, Variable]:
        return dict(self._watched)

    def watch(self, name: str, value: ArrayLike) -> Variable:
        """
        Регистрирует параметр. Повторный вызов с тем же именем возвращает
        ту же переменную, и общие веса попадают на ленту один раз.
        """
        if name in self._watched:
            return self._watched[name]
        var = self._append(np.array(value, dtype=matrix.DTYPE), ())
        self._watched[name] = var
        return var

    def _append(self, value: np.ndarray, parents: tuple[tuple[int, VJP], ...]) -> Variable:
        self._values.append(value)
        self._parents.append(parents)
        return Variable(value, self, len(self._values) - 1)


def constant(value: Operand) -> Variable:
    if isinstance(value, Variable):
        return value
    return Variable(np.asarray(value, dtype=matrix.DTYPE))


def detach(value: Operand) -> np.ndarray:
    if isinstance(value, Variable):
        return value.value.copy()
    return np.array(value, dtype=matrix.DTYPE)


def _record(value: np.ndarray, *pairs: tuple[Variable, VJP]) -> Variable:
    tape = None
    for var, _ in pairs:
        if var.tape is None:
            continue
        if tape is None:
            tape = var.tape
        elif var.tape is not tape:
            raise UsageError("operands are recorded on different tapes")
    if tape is None:
        return Variable(value)
    parents = tuple((var.index, vjp) for var, vjp in pairs if var.tape is not None)
    return tape._append(value, parents)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Элементарные операции ---

def add(a: Operand, b: Operand) -> Variable:
    a, b = constant(a), constant(b)
    return _record(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Variable:
    a, b = constant(a), constant(b)
    return _record(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Variable:
    a, b = constant(a), constant(b)
    return _record(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Operand, c: float) -> Variable:
    a = constant(a)
    return _record(a.value * c, (a, lambda g: g * c))


def matmul(a: Operand, b: Operand) -> Variable:
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _record(
        matrix.ordered_product(a.value, b.value),
        (a, lambda g: matrix.ordered_product(g, b.value.T)),
        (b, lambda g: matrix.ordered_product(a.value.T, g)),
    )


def transpose(a: Operand) -> Variable:
    a = constant(a)
    return _record(a.value.T.copy(), (a, lambda g: g.T))


def relu(a: Operand) -> Variable:
    a = constant(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def exp(a: Operand) -> Variable:
    a = constant(a)
    out = np.exp(a.value)
    return _record(out, (a, lambda g: g * out))


def log(a: Operand) -> Variable:
    """Логарифм с отсечением аргумента снизу на 1e-12."""
    a = constant(a)
    live = a.value > LOG_CLAMP
    safe = np.where(live, a.value, LOG_CLAMP)
    return _record(np.log(safe), (a, lambda g: np.where(live, g / safe, 0.0)))


def softmax_rows(a: Operand, temperature: float = 1.0) -> Variable:
    a = constant(a)
    s = matrix.softmax_rows(a.value, temperature)

    def vjp(g: np.ndarray) -> np.ndarray:
        return s * (g - (g * s).sum(axis=1, keepdims=True)) / temperature

    return _record(s, (a, vjp))


def log_softmax_rows(a: Operand, temperature: float = 1.0) -> Variable:
    a = constant(a)
    out = matrix.log_softmax_rows(a.value, temperature)
    s = np.exp(out)

    def vjp(g: np.ndarray) -> np.ndarray:
        return (g - s * g.sum(axis=1, keepdims=True)) / temperature

    return _record(out, (a, vjp))


def l2_normalize_rows(a: Operand) -> Variable:
    a = constant(a)
    y, zero = matrix.l2_normalize_rows(a.value)
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    norms = np.where(zero[:, None], 1.0, norms)

    def vjp(g: np.ndarray) -> np.ndarray:
        projected = (g - y * (g * y).sum(axis=1, keepdims=True)) / norms
        # нулевые строки проходят без изменений (тождественное отображение)
        return np.where(zero[:, None], g, projected)

    return _record(y, (a, vjp))


def total(a: Operand) -> Variable:
    a = constant(a)
    return _record(np.asarray(a.value.sum()), (a, lambda g: np.full(a.shape, float(g))))


def mean(a: Operand) -> Variable:
    a = constant(a)
    n = a.value.size
    if n == 0:
        raise ParameterError("mean of an empty array")
    return _record(np.asarray(a.value.sum() / n), (a, lambda g: np.full(a.shape, float(g) / n)))


def sum_rows(a: Operand) -> Variable:
    a = constant(a)
    return _record(a.value.sum(axis=1), (a, lambda g: np.broadcast_to(g[:, None], a.shape).copy()))


def backward(tape: GradientTape, loss: Variable) -> dict[str, np.ndarray]:
    """
    Обратный проход от скалярной потери. Возвращает градиент для каждого
    наблюдаемого параметра той же формы, что и параметр; недостижимые из
    потери параметры получают нули.
    """
    if not isinstance(loss, Variable) or loss.value.size != 1:
        shape = loss.shape if isinstance(loss, Variable) else type(loss).__name__
        raise UsageError(f"backward expects a scalar loss, got {shape}")
    if loss.tape is not tape:
        raise UsageError("loss was not recorded on this tape")

    grads: list[np.ndarray | None] = [None] * len(tape._values)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        for parent, vjp in tape._parents[i]:
            contribution = vjp(g)
            grads[parent] = contribution if grads[parent] is None else grads[parent] + contribution

    result: dict[str, np.ndarray] = {}
    for name, var in tape._watched.items():
        g = grads[var.index]
        result[name] = np.zeros_like(var.value) if g is None else np.array(g, dtype=matrix.DTYPE).reshape(var.shape)
    return result
