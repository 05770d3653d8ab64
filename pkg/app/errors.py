"""Иерархия исключений. У каждого класса свой код выхода CLI."""
from __future__ import annotations

from collections.abc import Sequence


class MMPError(Exception):
    """Базовое исключение пакета."""

    exit_code: int = 1


# --- Ошибки использования (код 2) ---

class UsageError(MMPError):
    exit_code = 2


class ConfigurationError(UsageError):
    pass


class ParameterError(UsageError):
    pass


class InputError(UsageError):
    pass


class ShapeError(UsageError):
    """Несовпадение размерностей. В сообщении всегда обе формы."""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: dimension mismatch {self.left} vs {self.right}")


# --- Ввод-вывод и форматы файлов (код 1) ---

class StorageError(MMPError):
    exit_code = 1


class FormatError(StorageError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class TruncationError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


# --- Численная авария обучения (код 3) ---

class NumericalAbortError(MMPError):
    exit_code = 3

    def __init__(self, iteration: int, batch_indices: Sequence[int], loss: float):
        self.iteration = iteration
        self.batch_indices = list(batch_indices)
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at iteration {iteration}, "
            f"batch indices {self.batch_indices}"
        )
