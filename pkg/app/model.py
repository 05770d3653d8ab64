"""
Общий кодировщик f_θ для двух модальностей, 2-слойная проекционная голова
и банк обучаемых прототипов.

Модальности отличаются только линейными адаптерами входа; ствол и голова
общие. Выход головы L2-нормирован по строкам, прототипы тоже единичные,
поэтому оценки прототипов являются косинусами в [-1, 1].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from app.errors import ConfigurationError, ShapeError
from app.numerics import DTYPE, GradientTape, Variable, autograd, constant
from app.schemas import EncoderConfig

logger = logging.getLogger(__name__)

MODALITIES = (0, 1)
PROTOTYPES = "prototypes"
# Зерно для повторной инициализации вырожденных (нулевых) прототипов
AUX_SEED = 0x5EED


@dataclass
class Encoder:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def adapter_names(self, modality: int) -> list[str]:
        return [f"adapter.{modality}.weight", f"adapter.{modality}.bias"]

    def trunk_names(self) -> list[str]:
        names = []
        for i in range(len(self.config.hidden_dims) - 1):
            names += [f"trunk.{i}.weight", f"trunk.{i}.bias"]
        return names

    def head_names(self) -> list[str]:
        return ["head.0.weight", "head.0.bias", "head.1.weight", "head.1.bias"]

    def copy(self) -> "Encoder":
        return Encoder(self.config.model_copy(deep=True), {k: v.copy() for k, v in self.params.items()})


@dataclass
class PrototypeBank:
    c: np.ndarray  # K × D
    reinitialized_rows: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return self.c.shape[0]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.c.copy())


def _layer_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, int]]]:
    hidden = config.hidden_dims
    shapes: list[tuple[str, tuple[int, int]]] = []
    for m, d in zip(MODALITIES, config.input_dims):
        shapes.append((f"adapter.{m}", (d, hidden[0])))
    for i in range(len(hidden) - 1):
        shapes.append((f"trunk.{i}", (hidden[i], hidden[i + 1])))
    shapes.append(("head.0", (hidden[-1], hidden[-1])))
    shapes.append(("head.1", (hidden[-1], config.embed_dim)))
    return shapes


def _normalize(c: np.ndarray) -> np.ndarray:
    return c / np.sqrt((c * c).sum(axis=1, keepdims=True))


def init_model(config: EncoderConfig, k: int, seed: int) -> tuple[Encoder, PrototypeBank]:
    """
    Веса и смещения ~ U(-1/√fan_in, 1/√fan_in) из генератора с данным зерном;
    порядок выборки фиксирован порядком слоёв. Прототипы нормируются по строкам.
    """
    if k < 2:
        raise ConfigurationError(f"need at least 2 prototypes, got {k}")
    rng = np.random.default_rng(seed)
    encoder = Encoder(config)
    for name, (fan_in, fan_out) in _layer_shapes(config):
        bound = 1.0 / np.sqrt(fan_in)
        encoder.params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        encoder.params[f"{name}.bias"] = rng.uniform(-bound, bound, size=(fan_out,))
    bound = 1.0 / np.sqrt(config.embed_dim)
    c = rng.uniform(-bound, bound, size=(k, config.embed_dim))
    return encoder, renormalize_prototypes(PrototypeBank(c))


def _bind(encoder: Encoder, name: str, tape: GradientTape | None) -> Variable:
    value = encoder.params[name]
    return tape.watch(name, value) if tape is not None else constant(value)


def _check_batch(encoder: Encoder, batch: ArrayLike, modality: int) -> np.ndarray:
    if modality not in MODALITIES:
        raise ConfigurationError(f"unknown modality index {modality}")
    x = np.asarray(batch, dtype=DTYPE)
    expected = encoder.config.input_dims[modality]
    if x.ndim != 2 or x.shape[1] != expected:
        raise ShapeError(f"embed(modality={modality})", x.shape, (x.shape[0] if x.ndim else 0, expected))
    return x


def _trunk(encoder: Encoder, x: np.ndarray, modality: int, tape: GradientTape | None, trace: list | None = None) -> Variable:
    w, b = (_bind(encoder, n, tape) for n in encoder.adapter_names(modality))
    pre = constant(x) @ w + b
    if trace is not None:
        trace.append(pre.value)
    h = autograd.relu(pre)
    for i in range(len(encoder.config.hidden_dims) - 1):
        w = _bind(encoder, f"trunk.{i}.weight", tape)
        b = _bind(encoder, f"trunk.{i}.bias", tape)
        pre = h @ w + b
        if trace is not None:
            trace.append(pre.value)
        h = autograd.relu(pre)
    return h


def _head(encoder: Encoder, h: Variable, tape: GradientTape | None, trace: list | None = None) -> Variable:
    w0, b0, w1, b1 = (_bind(encoder, n, tape) for n in encoder.head_names())
    pre = h @ w0 + b0
    if trace is not None:
        trace.append(pre.value)
    u = autograd.relu(pre)
    return autograd.l2_normalize_rows(u @ w1 + b1)


def embed(encoder: Encoder, batch: ArrayLike, modality: int, tape: GradientTape | None = None) -> Variable:
    """
    z = f_θ(x) для модальности modality (0 или 1): адаптер, общий ствол,
    голова, L2-нормировка строк. С лентой все параметры регистрируются на ней.
    """
    x = _check_batch(encoder, batch, modality)
    return _head(encoder, _trunk(encoder, x, modality, tape), tape)


def trunk_features(encoder: Encoder, batch: ArrayLike, modality: int) -> np.ndarray:
    """Выход ствола до проекционной головы, по нему строятся пробы."""
    x = _check_batch(encoder, batch, modality)
    return _trunk(encoder, x, modality, None).value


def preactivations(encoder: Encoder, batch: ArrayLike, modality: int) -> list[np.ndarray]:
    """Входы всех ReLU на пути embed (для отступа от излома при конечных разностях)."""
    x = _check_batch(encoder, batch, modality)
    trace: list[np.ndarray] = []
    _head(encoder, _trunk(encoder, x, modality, None, trace), None, trace)
    return trace


def prototype_scores(z: Variable | ArrayLike, bank: PrototypeBank, tape: GradientTape | None = None) -> Variable:
    """scores[k, b] = c_k · z_b, форма K × B."""
    z = constant(z)
    if z.value.ndim != 2 or z.shape[1] != bank.c.shape[1]:
        raise ShapeError("prototype_scores", z.shape, bank.c.shape)
    c = tape.watch(PROTOTYPES, bank.c) if tape is not None else constant(bank.c)
    return c @ z.T


def renormalize_prototypes(bank: PrototypeBank, seed: int = AUX_SEED) -> PrototypeBank:
    """
    Приводит каждую строку к единичной норме. Нулевые строки заново
    разыгрываются из вспомогательного генератора и перечисляются
    в reinitialized_rows.
    """
    c = np.array(bank.c, dtype=DTYPE)
    norms = np.sqrt((c * c).sum(axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        rng = np.random.default_rng([seed, *zero.tolist()])
        c[zero] = rng.standard_normal((zero.size, c.shape[1]))
        logger.warning(f"Re-randomized {zero.size} zero prototype rows: {zero.tolist()}")
    return PrototypeBank(_normalize(c), tuple(int(i) for i in zero))
