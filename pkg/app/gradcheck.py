"""
Набор проверок градиентов ленты конечными разностями.

Для каждой операции, из которой собрана функция потерь, строится маленькая
скалярная функция от именованных параметров. Аналитический градиент берётся
обратным проходом, численный пятиточечной центральной схемой; в отчёт
идёт максимальная относительная ошибка по всем параметрам операции.

Коды Синхорна в swapped loss считаются один раз в исходной точке и дальше
фиксированы, как и при обучении.
"""
from __future__ import annotations

import logging
from collections.abc import Callable

import numpy as np

from app.config import settings
from app.errors import ParameterError
from app.model import PROTOTYPES, Encoder, PrototypeBank, embed, init_model, preactivations
from app.numerics import GradientTape, Variable, autograd, backward, compare_gradients, constant
from app.objective import FeatureQueue, compute_swapped_codes, cross_entropy_term, enqueue, swapped_loss_from_codes
from app.schemas import EncoderConfig, GradcheckEntry, GradcheckReport, LossConfig, SinkhornConfig

logger = logging.getLogger(__name__)

BATCH = 4
K = 8
EMBED_DIM = 5
INPUT_DIMS = (3, 4)
HIDDEN_DIMS = [6, 6]
QUEUE_LENGTH = 6
TEMPERATURE = 0.1
# Минимальный отступ входов ReLU от нуля: шаг разностей не должен пересекать излом
KINK_MARGIN = 2e-3
MAX_ATTEMPTS = 200
PERTURB_FACTOR = 1.01

Builder = Callable[[dict[str, np.ndarray], GradientTape | None], Variable]


def _bind(params: dict[str, np.ndarray], name: str, tape: GradientTape | None) -> Variable:
    return tape.watch(name, params[name]) if tape is not None else constant(params[name])


def _readout(out: Variable, weights: np.ndarray) -> Variable:
    # скалярная проекция выхода со случайными весами
    return autograd.total(autograd.mul(out, weights))


def _matmul_case(rng: np.random.Generator) -> tuple[Builder, dict[str, np.ndarray]]:
    weights = rng.standard_normal((3, 2))

    def build(params, tape):
        return _readout(_bind(params, "a", tape) @ _bind(params, "b", tape), weights)

    return build, {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}


def _softmax_case(rng: np.random.Generator) -> tuple[Builder, dict[str, np.ndarray]]:
    weights = rng.standard_normal((BATCH, K))

    def build(params, tape):
        return _readout(autograd.softmax_rows(_bind(params, "scores", tape), TEMPERATURE), weights)

    return build, {"scores": rng.uniform(-1.0, 1.0, size=(BATCH, K))}


def _log_case(rng: np.random.Generator) -> tuple[Builder, dict[str, np.ndarray]]:
    weights = rng.standard_normal((BATCH, K))

    def build(params, tape):
        return _readout(autograd.log(_bind(params, "x", tape)), weights)

    return build, {"x": rng.uniform(0.5, 2.0, size=(BATCH, K))}


def _normalization_case(rng: np.random.Generator) -> tuple[Builder, dict[str, np.ndarray]]:
    weights = rng.standard_normal((BATCH, EMBED_DIM))

    def build(params, tape):
        return _readout(autograd.l2_normalize_rows(_bind(params, "x", tape)), weights)

    return build, {"x": rng.standard_normal((BATCH, EMBED_DIM))}


def _cross_entropy_case(rng: np.random.Generator) -> tuple[Builder, dict[str, np.ndarray]]:
    q = rng.uniform(0.1, 1.0, size=(BATCH, K))
    q /= q.sum(axis=1, keepdims=True)

    def build(params, tape):
        p = autograd.softmax_rows(_bind(params, "scores", tape), TEMPERATURE)
        return cross_entropy_term(p, q)

    return build, {"scores": rng.uniform(-1.0, 1.0, size=(BATCH, K))}


def _clear_of_kinks(encoder: Encoder, x1: np.ndarray, x2: np.ndarray) -> bool:
    traces = preactivations(encoder, x1, 0) + preactivations(encoder, x2, 1)
    return min(float(np.abs(t).min()) for t in traces) > KINK_MARGIN


def _network(seed: int) -> tuple[Encoder, PrototypeBank, np.ndarray, np.ndarray]:
    """Маленькая сеть и батч, у которых все входы ReLU далеко от нуля."""
    config = EncoderConfig(input_dims=INPUT_DIMS, hidden_dims=HIDDEN_DIMS, embed_dim=EMBED_DIM)
    for attempt in range(MAX_ATTEMPTS):
        trial_seed = seed + attempt
        encoder, bank = init_model(config, K, trial_seed)
        rng = np.random.default_rng([trial_seed, 1])
        x1 = rng.standard_normal((BATCH, INPUT_DIMS[0]))
        x2 = rng.standard_normal((BATCH, INPUT_DIMS[1]))
        if _clear_of_kinks(encoder, x1, x2):
            if attempt:
                logger.debug(f"Gradcheck network: seed {seed} shifted by {attempt} to clear ReLU kinks")
            return encoder, bank, x1, x2
    raise ParameterError(f"no network within {MAX_ATTEMPTS} seeds from {seed} keeps ReLU inputs clear of zero")


def _embed_case(seed: int) -> tuple[Builder, dict[str, np.ndarray]]:
    encoder, _, x1, _ = _network(seed)
    weights = np.random.default_rng([seed, 2]).standard_normal((BATCH, EMBED_DIM))

    def build(params, tape):
        return _readout(embed(Encoder(encoder.config, dict(params)), x1, 0, tape), weights)

    # адаптер второй модальности в embed(modality=0) не участвует
    return build, {k: v for k, v in encoder.params.items() if not k.startswith("adapter.1.")}


def _swapped_case(seed: int, with_queue: bool) -> tuple[Builder, dict[str, np.ndarray]]:
    encoder, bank, x1, x2 = _network(seed)
    config = LossConfig(
        temperature=TEMPERATURE,
        sinkhorn=SinkhornConfig(epsilon=0.05, n_iterations=3),
        queue_length=QUEUE_LENGTH if with_queue else 0,
        queue_start_iteration=0,
    )
    queue = None
    if with_queue:
        rng = np.random.default_rng([seed, 3])
        queue = FeatureQueue.empty(QUEUE_LENGTH, EMBED_DIM)
        past = rng.standard_normal((2, QUEUE_LENGTH, EMBED_DIM))
        past /= np.sqrt((past * past).sum(axis=2, keepdims=True))
        enqueue(queue, past[0], past[1])

    codes = compute_swapped_codes(embed(encoder, x1, 0), embed(encoder, x2, 1), bank, queue, config)

    def build(params, tape):
        current = Encoder(encoder.config, {k: v for k, v in params.items() if k != PROTOTYPES})
        z1 = embed(current, x1, 0, tape)
        z2 = embed(current, x2, 1, tape)
        return swapped_loss_from_codes(z1, z2, PrototypeBank(params[PROTOTYPES]), codes.q1, codes.q2, TEMPERATURE, tape)

    params = dict(encoder.params)
    params[PROTOTYPES] = bank.c
    return build, params


OPS = ("matmul", "softmax", "log", "normalization", "cross_entropy", "embed", "swapped_loss", "swapped_loss_queue")


def _cases(seed: int) -> dict[str, tuple[Builder, dict[str, np.ndarray]]]:
    rng = np.random.default_rng(seed)
    return {
        "matmul": _matmul_case(rng),
        "softmax": _softmax_case(rng),
        "log": _log_case(rng),
        "normalization": _normalization_case(rng),
        "cross_entropy": _cross_entropy_case(rng),
        "embed": _embed_case(seed),
        "swapped_loss": _swapped_case(seed, with_queue=False),
        "swapped_loss_queue": _swapped_case(seed, with_queue=True),
    }


def check_op(
    build: Builder,
    params: dict[str, np.ndarray],
    step: float,
    perturb: bool = False,
) -> float:
    tape = GradientTape()
    analytic = backward(tape, build(params, tape))
    if perturb:
        analytic = {name: g * PERTURB_FACTOR for name, g in analytic.items()}
    errors = compare_gradients(lambda p: build(dict(p), None).item(), params, analytic, step)
    return max(errors.values())


def run_gradcheck(
    seed: int = 0,
    perturb_op: str | None = None,
    step: float | None = None,
    tolerance: float | None = None,
) -> GradcheckReport:
    """
    Прогоняет все проверки. perturb_op служит тестовым крючком: аналитический
    градиент названной операции портится, и она обязана провалиться.
    """
    step = step if step is not None else settings.gradcheck_step
    tolerance = tolerance if tolerance is not None else settings.gradcheck_tolerance
    if perturb_op is not None and perturb_op not in OPS:
        raise ParameterError(f"unknown op '{perturb_op}', expected one of {', '.join(OPS)}")

    report = GradcheckReport(tolerance=tolerance)
    for op, (build, params) in _cases(seed).items():
        error = check_op(build, params, step, perturb=op == perturb_op)
        passed = error < tolerance
        report.entries.append(GradcheckEntry(op=op, max_relative_error=error, passed=passed))
        if passed:
            logger.info(f"gradcheck {op}: max relative error {error:.3e}")
        else:
            logger.error(f"gradcheck {op} FAILED: max relative error {error:.3e} >= {tolerance:.1e}")
    return report
