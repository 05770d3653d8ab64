# Вспомогательные утилиты хранения: бинарные контейнеры, канонический текст конфигурации, JSON-строки.
from __future__ import annotations

import contextlib
import logging
import os
import struct
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from app.errors import ConfigurationError, FormatError, StorageError, TruncationError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


# --- Канонический текст конфигурации: отсортированные строки dotted.key=value ---

def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def flatten_config(model: BaseModel) -> dict[str, str]:
    flat: dict[str, str] = {}

    def walk(prefix: str, data: dict[str, Any]) -> None:
        for key, value in data.items():
            name = f"{prefix}{key}"
            if isinstance(value, dict):
                walk(f"{name}.", value)
            else:
                flat[name] = _format_value(value)

    walk("", model.model_dump())
    return flat


def config_to_text(model: BaseModel) -> str:
    flat = flatten_config(model)
    return "".join(f"{key}={flat[key]}\n" for key in sorted(flat))


def parse_config_text(text: str) -> dict[str, str]:
    """Разбирает key=value строки; пустые строки и # комментарии пропускаются."""
    flat: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {number}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def _unflatten(flat: dict[str, str]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"config key '{key}' conflicts with a scalar value")
        node[parts[-1]] = None if value == "" else value
    return nested


def config_from_flat(flat: dict[str, str], model_cls: type[ModelT]) -> ModelT:
    try:
        return model_cls.model_validate(_unflatten(flat))
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e


def config_from_text(text: str, model_cls: type[ModelT]) -> ModelT:
    return config_from_flat(parse_config_text(text), model_cls)


def apply_overrides(model: ModelT, overrides: dict[str, str]) -> ModelT:
    """Поверх канонического вида модели накладывает dotted-ключи; неизвестный ключ вызывает ошибку."""
    flat = flatten_config(model)
    unknown = sorted(set(overrides) - set(flat))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    flat.update(overrides)
    return config_from_flat(flat, type(model))


# --- Бинарные контейнеры (little-endian) ---

class BinaryWriter:
    def __init__(self):
        self._chunks: list[bytes] = []

    def u8(self, value: int) -> None:
        self._chunks.append(struct.pack("<B", value))

    def u32(self, value: int) -> None:
        self._chunks.append(struct.pack("<I", value))

    def raw(self, data: bytes) -> None:
        self._chunks.append(data)

    def f64_array(self, values: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def u32_array(self, values: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype="<u4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class BinaryReader:
    """Последовательное чтение с учётом смещения; при нехватке байт TruncationError."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def _take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncationError(
                f"truncated while reading {what}: need {n} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def magic(self, expected: bytes) -> None:
        found = self._take(len(expected), "magic")
        if found != expected:
            raise FormatError(f"bad magic {found!r}, expected {expected!r}", 0)

    def u8(self, what: str = "u8") -> int:
        return struct.unpack("<B", self._take(1, what))[0]

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def raw(self, n: int, what: str = "bytes") -> bytes:
        return self._take(n, what)

    def f64_array(self, count: int, what: str = "float64 payload") -> np.ndarray:
        return np.frombuffer(self._take(8 * count, what), dtype="<f8").astype(np.float64)

    def u32_array(self, count: int, what: str = "u32 payload") -> np.ndarray:
        return np.frombuffer(self._take(4 * count, what), dtype="<u4").astype(np.int64)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def write_bytes(path: str | Path, data: bytes) -> None:
    """
    Атомарная запись: данные уходят во временный файл рядом с целью,
    затем os.replace подменяет цель целиком. Читатель видит либо старый,
    либо новый файл, но не обрывок.
    """
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        with contextlib.suppress(OSError):
            tmp.unlink(missing_ok=True)
        logger.error(f"Failed to write {path}: {e}")
        raise StorageError(f"cannot write {path}: {e}") from e


def read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Failed to read {path}: {e}")
        raise StorageError(f"cannot read {path}: {e}") from e


def append_json_line(path: str | Path, record: BaseModel) -> None:
    """Дописывает запись одной JSON-строкой (append-only)."""
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(record.model_dump_json() + "\n")
    except OSError as e:
        logger.error(f"Failed to append to {path}: {e}")
        raise StorageError(f"cannot append to {path}: {e}") from e
