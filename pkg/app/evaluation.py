"""
Оценка представлений по скрытым меткам синтетического корпуса:
линейная проба и kNN-проба на замороженных признаках ствола, согласие
кластеров прототипов с метками (NMI, чистота).

Пробы можно обучать на доле размеченных данных (label_fraction): из
обучающей части каждого класса остаётся одна и та же доля образцов,
тестовая часть не меняется.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from sklearn import metrics

from app.data import PairedCorpus
from app.errors import InputError, ParameterError
from app.model import embed, trunk_features
from app.numerics import GradientTape, autograd, backward, l2_normalize_rows, matmul
from app.schemas import ClusterReport, ProbeReport, SweepRow, TrainConfig
from app.trainer import Checkpoint, train

logger = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8
PROBE_STEPS = 500
PROBE_LR = 0.1
MODALITY_CHOICES = ("1", "2", "both")
# поток генератора для отбора размеченных, отдельный от разбиения
LABEL_STREAM = 1


def _require_labels(corpus: PairedCorpus) -> np.ndarray:
    if not corpus.has_labels:
        raise InputError("corpus has no labels; probes need ground-truth cluster labels")
    return corpus.labels


def split_indices(n: int, split_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Перемешивание с зерном и разбиение 80/20."""
    order = np.random.default_rng(split_seed).permutation(n)
    n_train = int(round(TRAIN_FRACTION * n))
    return order[:n_train], order[n_train:]


def labelled_subset(train_idx: np.ndarray, labels: np.ndarray, fraction: float, split_seed: int) -> np.ndarray:
    """
    Стратифицированная доля обучающей части: из каждого класса остаётся
    max(1, round(fraction · n_c)) образцов. Порядок train_idx сохраняется.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"label_fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return train_idx
    rng = np.random.default_rng([split_seed, LABEL_STREAM])
    train_labels = labels[train_idx]
    keep = np.zeros(len(train_idx), dtype=bool)
    for label in np.unique(train_labels):
        positions = np.flatnonzero(train_labels == label)
        n_keep = max(1, int(round(fraction * len(positions))))
        keep[rng.permutation(positions)[:n_keep]] = True
    return train_idx[keep]


def _probe_split(corpus: PairedCorpus, split_seed: int, label_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    train_idx, test_idx = split_indices(corpus.n, split_seed)
    return labelled_subset(train_idx, corpus.labels, label_fraction, split_seed), test_idx


def probe_features(ckpt: Checkpoint, corpus: PairedCorpus, modality: str = "1") -> np.ndarray:
    if modality == "1":
        return trunk_features(ckpt.encoder, corpus.modality1, 0)
    if modality == "2":
        return trunk_features(ckpt.encoder, corpus.modality2, 1)
    if modality == "both":
        return np.hstack([
            trunk_features(ckpt.encoder, corpus.modality1, 0),
            trunk_features(ckpt.encoder, corpus.modality2, 1),
        ])
    raise ParameterError(f"modality must be one of {MODALITY_CHOICES}, got '{modality}'")


def _report(
    kind: str, modality: str, y_true: np.ndarray, y_pred: np.ndarray, n_train: int, label_fraction: float = 1.0
) -> ProbeReport:
    per_class: dict[int, float] = {}
    counts: dict[int, int] = {}
    for label in np.unique(y_true):
        mask = y_true == label
        counts[int(label)] = int(mask.sum())
        per_class[int(label)] = float((y_pred[mask] == label).mean())
    accuracy = float((y_pred == y_true).mean()) if len(y_true) else 0.0
    return ProbeReport(
        kind=kind,
        modality=modality,
        accuracy=accuracy,
        per_class_accuracy=per_class,
        class_counts=counts,
        n_train=n_train,
        n_test=len(y_true),
        label_fraction=label_fraction,
    )


def fit_linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int | None = None,
    modality: str = "1",
    steps: int = PROBE_STEPS,
    lr: float = PROBE_LR,
) -> ProbeReport:
    """
    Мультиномиальная логистическая регрессия: steps полнобатчевых шагов
    градиентного спуска с шагом lr из нулевой инициализации.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    n_classes = n_classes or int(max(train_y.max(), test_y.max())) + 1
    targets = np.eye(n_classes)[train_y]
    weight = np.zeros((train_x.shape[1], n_classes))
    bias = np.zeros(n_classes)

    for _ in range(steps):
        tape = GradientTape()
        w = tape.watch("weight", weight)
        b = tape.watch("bias", bias)
        logp = autograd.log_softmax_rows(train_x @ w + b)
        loss = -autograd.mean(autograd.sum_rows(autograd.mul(targets, logp)))
        grads = backward(tape, loss)
        weight = weight - lr * grads["weight"]
        bias = bias - lr * grads["bias"]

    predictions = np.argmax(matmul(test_x, weight) + bias, axis=1)
    return _report("linear", modality, np.asarray(test_y), predictions, len(train_y))


def linear_probe(
    ckpt: Checkpoint,
    corpus: PairedCorpus,
    split_seed: int = 0,
    modality: str = "1",
    label_fraction: float = 1.0,
) -> ProbeReport:
    labels = _require_labels(corpus)
    features = probe_features(ckpt, corpus, modality)
    train_idx, test_idx = _probe_split(corpus, split_seed, label_fraction)
    report = fit_linear_probe(
        features[train_idx], labels[train_idx], features[test_idx], labels[test_idx],
        n_classes=int(labels.max()) + 1, modality=modality,
    ).model_copy(update={"label_fraction": label_fraction})
    logger.info(f"Linear probe (modality {modality}, {label_fraction:.0%} labelled): accuracy {report.accuracy:.4f}")
    return report


def knn_classify(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int) -> np.ndarray:
    """
    Голосование k ближайших по косинусу. При равенстве голосов побеждает
    метка, чей представитель ближе всех.
    """
    if k < 1 or k > len(train_y):
        raise ParameterError(f"k_neighbors must be in [1, {len(train_y)}], got {k}")
    train_n = l2_normalize_rows(train_x).values
    test_n = l2_normalize_rows(test_x).values
    similarity = matmul(test_n, train_n.T)
    predictions = np.empty(len(test_n), dtype=np.int64)
    for i, row in enumerate(similarity):
        nearest = np.argsort(-row, kind="stable")[:k]
        neighbor_labels = train_y[nearest]
        values, votes = np.unique(neighbor_labels, return_counts=True)
        tied = set(values[votes == votes.max()].tolist())
        # первый в порядке близости среди лидеров голосования
        predictions[i] = next(label for label in neighbor_labels if label in tied)
    return predictions


def knn_probe(
    ckpt: Checkpoint,
    corpus: PairedCorpus,
    k_neighbors: int = 20,
    split_seed: int = 0,
    modality: str = "1",
    label_fraction: float = 1.0,
) -> ProbeReport:
    labels = _require_labels(corpus)
    features = probe_features(ckpt, corpus, modality)
    train_idx, test_idx = _probe_split(corpus, split_seed, label_fraction)
    predictions = knn_classify(features[train_idx], labels[train_idx], features[test_idx], k_neighbors)
    report = _report("knn", modality, labels[test_idx], predictions, len(train_idx), label_fraction)
    logger.info(
        f"kNN probe (k={k_neighbors}, modality {modality}, {label_fraction:.0%} labelled): accuracy {report.accuracy:.4f}"
    )
    return report


def _clip_unit(value: float) -> float:
    return float(min(1.0, max(0.0, value)))


def clustering_scores(labels: Sequence[int], assignments: Sequence[int], k: int | None = None) -> ClusterReport:
    """NMI (арифметическая нормализация) и чистота по мажоритарной метке."""
    labels = np.asarray(labels)
    assignments = np.asarray(assignments)
    nmi = metrics.normalized_mutual_info_score(labels, assignments, average_method="arithmetic")
    contingency = metrics.cluster.contingency_matrix(labels, assignments)
    purity = np.sum(np.amax(contingency, axis=0)) / np.sum(contingency)
    k = k or int(assignments.max()) + 1
    sizes = np.bincount(assignments, minlength=k)
    return ClusterReport(nmi=_clip_unit(nmi), purity=_clip_unit(purity), cluster_sizes=sizes.tolist())


def cluster_agreement(ckpt: Checkpoint, corpus: PairedCorpus) -> ClusterReport:
    """Каждый образец относится к прототипу с максимальной оценкой по эмбеддингу модальности 1."""
    labels = _require_labels(corpus)
    z = embed(ckpt.encoder, corpus.modality1, 0).value
    assignments = np.argmax(matmul(z, ckpt.bank.c.T), axis=1)
    report = clustering_scores(labels, assignments, ckpt.bank.k)
    logger.info(f"Cluster agreement: NMI {report.nmi:.4f}, purity {report.purity:.4f}")
    return report


def prototype_sweep(
    corpus: PairedCorpus,
    config: TrainConfig,
    ks: Sequence[int],
    split_seed: int = 0,
) -> list[SweepRow]:
    """Чувствительность к числу прототипов K: по модели на каждое K."""
    _require_labels(corpus)
    rows: list[SweepRow] = []
    for k in ks:
        logger.info(f"Prototype sweep: training with K={k}")
        result = train(corpus, config.model_copy(update={"k_prototypes": k}, deep=True))
        last_epoch = result.metrics[-1].epoch
        final_loss = float(np.mean([r.loss for r in result.metrics if r.epoch == last_epoch]))
        rows.append(SweepRow(
            k=k,
            linear_accuracy=linear_probe(result.checkpoint, corpus, split_seed).accuracy,
            nmi=cluster_agreement(result.checkpoint, corpus).nmi,
            final_loss=final_loss,
        ))
    return rows
