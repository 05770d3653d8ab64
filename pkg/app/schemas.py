# Pydantic-схемы: конфигурации запуска, записи метрик и отчёты
from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_ints(value):
    # Канонический текст хранит списки как "64,64"
    if isinstance(value, str):
        return [int(part) for part in value.split(",") if part.strip()]
    return value


class SinkhornConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(
        default=0.05,
        gt=0,
        description="Энтропийная регуляризация ε",
        examples=[0.05, 0.03]
    )
    n_iterations: int = Field(
        default=3,
        ge=1,
        description="Число проходов нормализации (строки, затем столбцы)",
        examples=[3, 1000]
    )
    convergence_tolerance: float = Field(
        default=0.0,
        ge=0,
        description="Максимальное отклонение маргиналов для досрочной остановки; 0 отключает",
        examples=[0.0, 1e-8]
    )

    @classmethod
    def converged(cls, epsilon: float = 0.05, max_iterations: int = 1000) -> "SinkhornConfig":
        """Режим сходимости: допуск 1e-8, не более max_iterations проходов."""
        return cls(epsilon=epsilon, n_iterations=max_iterations, convergence_tolerance=1e-8)


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_dims: tuple[int, int] = Field(
        default=(32, 24),
        description="Размерности входа модальностей (d1, d2)",
        examples=[(32, 24), (16, 16)]
    )
    hidden_dims: list[int] = Field(
        default_factory=lambda: [64],
        min_length=1,
        description="Ширины скрытых слоёв; первый является выходом адаптеров модальностей",
        examples=[[64], [32, 32]]
    )
    embed_dim: int = Field(
        default=128,
        ge=1,
        description="Размерность пространства кодов D",
        examples=[128, 8]
    )

    @field_validator("input_dims", "hidden_dims", mode="before")
    @classmethod
    def _split_dims(cls, value):
        return _split_ints(value)

    @field_validator("input_dims", "hidden_dims")
    @classmethod
    def _positive(cls, value):
        if any(v < 1 for v in value):
            raise ValueError("all dims must be >= 1")
        return value


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    temperature: float = Field(
        default=0.1,
        gt=0,
        description="Температура τ softmax по прототипам",
        examples=[0.1]
    )
    sinkhorn: SinkhornConfig = Field(default_factory=SinkhornConfig)
    queue_length: int = Field(
        default=1920,
        ge=0,
        description="Длина очереди признаков на модальность",
        examples=[1920, 256, 0]
    )
    queue_start_iteration: int | None = Field(
        default=None,
        ge=0,
        description="Итерация, с которой очередь участвует в кодах; None: после первой эпохи (подставляет тренер)",
        examples=[None, 0, 500]
    )


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=30, ge=1, description="Число эпох", examples=[30, 350])
    batch_size: int = Field(default=32, ge=1, description="Размер батча", examples=[32, 24])
    base_lr: float = Field(
        default=0.1,
        ge=0,
        description="Начальный шаг SGD; косинусный спуск до base_lr/1000",
        examples=[0.1, 2e-4]
    )
    momentum: float = Field(default=0.9, ge=0, lt=1, description="Момент SGD", examples=[0.9])
    prototype_freeze_iterations: int | None = Field(
        default=None,
        ge=0,
        description="Сколько первых шагов прототипы заморожены; None: одна эпоха",
        examples=[None, 0, 313]
    )
    loss: LossConfig = Field(default_factory=lambda: LossConfig(queue_length=256))
    k_prototypes: int = Field(default=16, ge=2, description="Число прототипов K", examples=[16, 3000])
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    seed: int = Field(default=0, ge=0, description="Зерно инициализации и перемешивания", examples=[0, 7])

    @classmethod
    def preset(cls, name: str) -> "TrainConfig":
        """
        Именованные наборы гиперпараметров: desk (по умолчанию) и режимы
        video и segmentation для длинных прогонов.
        """
        if name == "desk":
            return cls()
        if name == "video":
            return cls(
                epochs=350,
                batch_size=24,
                base_lr=0.1,
                k_prototypes=3000,
                loss=LossConfig(
                    temperature=0.1,
                    sinkhorn=SinkhornConfig(epsilon=0.05),
                    queue_length=1920,
                ),
                encoder=EncoderConfig(embed_dim=128),
            )
        if name == "segmentation":
            return cls(
                epochs=75,
                batch_size=32,
                base_lr=2e-4,
                k_prototypes=50,
                loss=LossConfig(
                    temperature=0.1,
                    sinkhorn=SinkhornConfig(epsilon=0.03),
                    queue_length=1000,
                ),
                encoder=EncoderConfig(embed_dim=128),
            )
        raise ValueError(f"unknown preset '{name}'")


PRESETS = ("desk", "video", "segmentation")


class CorpusSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(default=2000, ge=1, description="Число пар", examples=[2000, 1000])
    n_latent_clusters: int = Field(default=8, ge=2, description="Число скрытых кластеров", examples=[8])
    latent_dim: int = Field(default=8, ge=1, description="Размерность латентного пространства", examples=[8])
    d1: int = Field(default=32, ge=1, description="Размерность модальности 1", examples=[32])
    d2: int = Field(default=24, ge=1, description="Размерность модальности 2", examples=[24])
    noise_sigma: float = Field(default=0.05, ge=0, description="σ гауссова шума", examples=[0.05, 0.0])
    seed: int = Field(default=0, ge=0, description="Зерно генератора", examples=[0, 7])


class MetricsRecord(BaseModel):
    iter: int = Field(..., ge=0, description="Номер шага оптимизатора (с нуля)")
    epoch: int = Field(..., ge=0, description="Номер эпохи (с нуля)")
    loss: float = Field(..., description="Значение swapped-loss на батче")
    lr: float = Field(..., description="Шаг обучения на этом шаге")
    code_entropy: float = Field(..., description="Энтропия среднего по батчу распределения кодов")
    queue_fill: int = Field(..., ge=0, description="Заполнение очереди до шага")


class ProbeReport(BaseModel):
    kind: Literal["linear", "knn"] = Field(..., description="Тип пробы")
    modality: str = Field(default="1", description="Модальность признаков: 1, 2 или both")
    accuracy: float = Field(..., ge=0, le=1, description="Точность на тесте")
    per_class_accuracy: dict[int, float] = Field(default_factory=dict)
    class_counts: dict[int, int] = Field(default_factory=dict)
    n_train: int = Field(..., ge=0)
    n_test: int = Field(..., ge=0)
    label_fraction: float = Field(
        default=1.0,
        gt=0,
        le=1,
        description="Доля размеченных образцов обучающей части, стратифицированно по классам",
        examples=[1.0, 0.1, 0.05]
    )

    @model_validator(mode="after")
    def _counts_match(self):
        if sum(self.class_counts.values()) != self.n_test:
            raise ValueError("class counts must sum to n_test")
        return self


class ClusterReport(BaseModel):
    kind: Literal["cluster"] = "cluster"
    nmi: float = Field(..., ge=0, le=1, description="NMI с арифметической нормализацией")
    purity: float = Field(..., ge=0, le=1, description="Чистота по мажоритарной метке")
    cluster_sizes: list[int] = Field(default_factory=list, description="Гистограмма размеров по K прототипам")


class GradcheckEntry(BaseModel):
    op: str
    max_relative_error: float
    passed: bool


class GradcheckReport(BaseModel):
    tolerance: float
    entries: list[GradcheckEntry] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    def failed_ops(self) -> list[str]:
        return [entry.op for entry in self.entries if not entry.passed]


class SweepRow(BaseModel):
    k: int = Field(..., ge=2, description="Число прототипов")
    linear_accuracy: float = Field(..., ge=0, le=1)
    nmi: float = Field(..., ge=0, le=1)
    final_loss: float


class RunManifest(BaseModel):
    command: str = Field(..., description="Имя команды CLI", examples=["pretrain"])
    config: dict = Field(default_factory=dict, description="Полная конфигурация после умолчаний")
    config_text: str = Field(default="", description="Канонический key=value текст конфигурации")
    paths: dict[str, str] = Field(default_factory=dict, description="Пути к данным и результатам")
    overrides: dict[str, str] = Field(default_factory=dict, description="Флаги, перекрывшие файл конфигурации")
    seed: int | None = None
    tool_version: str
