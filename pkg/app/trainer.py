"""
Цикл обучения: минимизация swapped-loss по корпусу.

SGD с моментом и косинусным спуском шага от base_lr до base_lr/1000,
заморозка прототипов на первых шагах, перенормировка прототипов после
каждого их обновления, запись метрик на каждом шаге и чекпойнты MMCK.

Вся случайность обучения сводится к инициализации из seed и перемешиванию эпохи
из пары (seed, epoch), поэтому состояние генератора восстанавливается
по номеру итерации.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.data import PairedCorpus, batches, steps_per_epoch
from app.errors import ConfigurationError, FormatError, InputError, NumericalAbortError, UnsupportedVersionError
from app.model import PROTOTYPES, Encoder, PrototypeBank, embed, init_model, renormalize_prototypes
from app.numerics import GradientTape, backward
from app.objective import FeatureQueue, code_usage_entropy, swapped_loss
from app.schemas import LossConfig, MetricsRecord, TrainConfig
from app.utils import BinaryReader, BinaryWriter, config_from_text, config_to_text, read_bytes, write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1
FINAL_LR_FACTOR = 1e-3

MetricsSink = Callable[[MetricsRecord], None]


@dataclass
class Checkpoint:
    config: TrainConfig
    encoder: Encoder
    bank: PrototypeBank
    momentum: dict[str, np.ndarray]
    queue: FeatureQueue
    iteration: int = 0
    version: int = CHECKPOINT_VERSION

    def tensors(self) -> dict[str, np.ndarray]:
        """Именованные тензоры в порядке записи в файл."""
        out: dict[str, np.ndarray] = {}
        for name, value in self.encoder.params.items():
            out[f"encoder.{name}"] = value
        out[PROTOTYPES] = self.bank.c
        for name, value in self.momentum.items():
            out[f"momentum.{name}"] = value
        out["queue.rows"] = self.queue.rows
        out["state.queue"] = np.array([self.queue.fill, self.queue.cursor], dtype=np.float64)
        out["state.iteration"] = np.array([self.iteration], dtype=np.float64)
        return out

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config.model_copy(deep=True),
            encoder=self.encoder.copy(),
            bank=self.bank.copy(),
            momentum={k: v.copy() for k, v in self.momentum.items()},
            queue=self.queue.copy(),
            iteration=self.iteration,
            version=self.version,
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[MetricsRecord] = field(default_factory=list)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Косинусный спуск: step 0 → base_lr, последний шаг → base_lr/1000."""
    final = base_lr * FINAL_LR_FACTOR
    if total_steps <= 1:
        return base_lr
    progress = step / (total_steps - 1)
    return final + 0.5 * (base_lr - final) * (1.0 + math.cos(math.pi * progress))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def initial_checkpoint(config: TrainConfig) -> Checkpoint:
    encoder, bank = init_model(config.encoder, config.k_prototypes, config.seed)
    momentum = {name: np.zeros_like(value) for name, value in encoder.params.items()}
    momentum[PROTOTYPES] = np.zeros_like(bank.c)
    queue = FeatureQueue.empty(config.loss.queue_length, config.encoder.embed_dim)
    return Checkpoint(config, encoder, bank, momentum, queue)


def _resolved_loss_config(config: TrainConfig, per_epoch: int) -> LossConfig:
    loss = config.loss.model_copy(deep=True)
    if loss.queue_start_iteration is None:
        loss.queue_start_iteration = per_epoch
    return loss


def train(
    corpus: PairedCorpus,
    config: TrainConfig | None = None,
    resume_from: Checkpoint | None = None,
    metrics_sink: MetricsSink | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """
    Обучает кодировщик и прототипы. При resume_from продолжает с его итерации
    (конфигурация берётся из чекпойнта). max_steps ограничивает число шагов
    этого вызова; расписание шага всё равно рассчитано на весь прогон.
    """
    if resume_from is not None:
        state = resume_from.copy()
        config = state.config
    else:
        if config is None:
            raise ConfigurationError("train needs a config or a checkpoint to resume from")
        state = initial_checkpoint(config)

    if corpus.n == 0:
        raise InputError("corpus is empty")
    if tuple(config.encoder.input_dims) != corpus.dims:
        raise ConfigurationError(f"encoder input dims {tuple(config.encoder.input_dims)} do not match corpus dims {corpus.dims}")
    per_epoch = steps_per_epoch(corpus.n, config.batch_size)
    if per_epoch == 0:
        raise ConfigurationError(f"corpus of {corpus.n} samples yields no batch of size {config.batch_size}")

    total = config.epochs * per_epoch
    freeze = config.prototype_freeze_iterations
    if freeze is None:
        freeze = per_epoch
    loss_config = _resolved_loss_config(config, per_epoch)
    records: list[MetricsRecord] = []

    logger.info(
        f"Training: {config.epochs} epochs x {per_epoch} steps, K={config.k_prototypes}, "
        f"batch={config.batch_size}, lr={config.base_lr}, start iteration {state.iteration}"
    )

    epoch_batches = None
    cached_epoch = -1
    epoch_losses: list[float] = []
    steps_done = 0
    while state.iteration < total and (max_steps is None or steps_done < max_steps):
        iteration = state.iteration
        epoch, offset = divmod(iteration, per_epoch)
        if epoch != cached_epoch:
            epoch_batches = batches(corpus, config.batch_size, epoch_seed(config.seed, epoch))
            cached_epoch = epoch
            epoch_losses = []
        batch = epoch_batches[offset]
        lr = cosine_lr(iteration, total, config.base_lr)
        queue_fill = state.queue.fill

        # расходящийся шаг оставляет inf/NaN в параметрах; дальше прямой проход бессмыслен
        if not all(np.isfinite(v).all() for v in state.tensors().values()):
            _abort(iteration, epoch, batch.sample_indices, math.nan, "parameters")

        tape = GradientTape()
        z1 = embed(state.encoder, batch.x1, 0, tape)
        z2 = embed(state.encoder, batch.x2, 1, tape)
        out = swapped_loss(z1, z2, state.bank, state.queue, loss_config, iteration, tape)
        loss = out.value
        if not math.isfinite(loss):
            _abort(iteration, epoch, batch.sample_indices, loss, "loss")

        grads = backward(tape, out.loss)
        frozen = iteration < freeze
        if frozen:
            grads[PROTOTYPES] = np.zeros_like(state.bank.c)
        _sgd_step(state, grads, lr, config.momentum, update_prototypes=not frozen)

        record = MetricsRecord(
            iter=iteration,
            epoch=epoch,
            loss=loss,
            lr=lr,
            code_entropy=code_usage_entropy(out.codes.q1, out.codes.q2),
            queue_fill=queue_fill,
        )
        records.append(record)
        if metrics_sink is not None:
            metrics_sink(record)

        epoch_losses.append(loss)
        state.iteration += 1
        steps_done += 1
        if offset == per_epoch - 1:
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {np.mean(epoch_losses):.6f}, lr {lr:.6g}")

    return TrainResult(state, records)


def _abort(iteration: int, epoch: int, indices: np.ndarray, loss: float, where: str) -> None:
    logger.error(f"Non-finite {where} at iteration {iteration}, epoch {epoch}: loss {loss!r}; batch {indices.tolist()}")
    raise NumericalAbortError(iteration, indices.tolist(), loss)


def _sgd_step(state: Checkpoint, grads: dict[str, np.ndarray], lr: float, momentum: float, update_prototypes: bool) -> None:
    for name, value in state.encoder.params.items():
        buf = state.momentum[name]
        buf *= momentum
        buf += grads[name]
        value -= lr * buf
    buf = state.momentum[PROTOTYPES]
    buf *= momentum
    buf += grads[PROTOTYPES]
    if update_prototypes:
        state.bank = renormalize_prototypes(PrototypeBank(state.bank.c - lr * buf))


# --- Чекпойнты MMCK ---

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    writer = BinaryWriter()
    writer.raw(CHECKPOINT_MAGIC)
    writer.u32(ckpt.version)
    text = config_to_text(ckpt.config).encode("utf-8")
    writer.u32(len(text))
    writer.raw(text)
    tensors = ckpt.tensors()
    writer.u32(len(tensors))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        writer.u32(len(encoded))
        writer.raw(encoded)
        writer.u32(value.ndim)
        for dim in value.shape:
            writer.u32(dim)
        writer.f64_array(value)
    write_bytes(path, writer.getvalue())
    logger.info(f"Checkpoint saved to {path} (iteration {ckpt.iteration})")


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = BinaryReader(read_bytes(path))
    reader.magic(CHECKPOINT_MAGIC)
    version_offset = reader.offset
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", version_offset)
    text_len = reader.u32("config length")
    config_offset = reader.offset
    try:
        text = reader.raw(text_len, "config text").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"config text is not UTF-8: {e}", config_offset) from e
    config = config_from_text(text, TrainConfig)

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.raw(reader.u32("name length"), "tensor name").decode("utf-8")
        rank = reader.u32("rank")
        dims_offset = reader.offset
        shape = tuple(reader.u32("dim") for _ in range(rank))
        # размеры перемножаются в int Python: у np.prod возможно переполнение
        count = math.prod(shape)
        left = reader.remaining
        if 8 * count > left:
            raise FormatError(
                f"tensor '{name}' declares shape {shape} ({8 * count} bytes), only {left} bytes left",
                dims_offset,
            )
        tensors[name] = reader.f64_array(count, f"tensor '{name}'").reshape(shape)
    reader.expect_end()

    ckpt = _checkpoint_from_tensors(config, tensors, reader.offset)
    logger.info(f"Checkpoint loaded from {path} (iteration {ckpt.iteration})")
    return ckpt


def _checkpoint_from_tensors(config: TrainConfig, tensors: dict[str, np.ndarray], offset: int) -> Checkpoint:
    try:
        encoder = Encoder(
            config.encoder,
            {name[len("encoder."):]: value for name, value in tensors.items() if name.startswith("encoder.")},
        )
        bank = PrototypeBank(tensors[PROTOTYPES])
        momentum = {name[len("momentum."):]: value for name, value in tensors.items() if name.startswith("momentum.")}
        fill, cursor = (int(v) for v in tensors["state.queue"])
        queue = FeatureQueue(tensors["queue.rows"], fill, cursor)
        iteration = int(tensors["state.iteration"][0])
    except KeyError as e:
        raise FormatError(f"checkpoint is missing tensor {e}", offset) from e
    return Checkpoint(config, encoder, bank, momentum, queue, iteration)
