"""
Командная строка: генерация корпуса, предобучение, пробы, демонстрация
кодов Синхорна, проверка градиентов и перебор числа прототипов.

Коды выхода: 0 успех; 1 ввод-вывод и формат файлов; 2 ошибка
использования или конфигурации; 3 численная авария обучения.
Отчёты и матрицы идут в stdout, логи в stderr и файлы логов.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from app.config import settings
from app.data import generate, load_corpus, save_corpus
from app.errors import InputError, MMPError, StorageError
from app.evaluation import MODALITY_CHOICES, cluster_agreement, knn_probe, linear_probe, prototype_sweep
from app.gradcheck import OPS, run_gradcheck
from app.logger import setup_logging
from app.schemas import PRESETS, CorpusSpec, RunManifest, SinkhornConfig, TrainConfig
from app.sinkhorn import compute_codes
from app.trainer import load_checkpoint, save_checkpoint, train
from app.utils import append_json_line, apply_overrides, config_to_text, flatten_config, parse_config_text, read_bytes, write_bytes

logger = logging.getLogger(__name__)

SERVICE_NAME = "mmproto"

# флаг CLI → ключ канонической конфигурации
TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "base_lr",
    "momentum": "momentum",
    "freeze": "prototype_freeze_iterations",
    "k": "k_prototypes",
    "train_seed": "seed",
    "temperature": "loss.temperature",
    "epsilon": "loss.sinkhorn.epsilon",
    "sinkhorn_iters": "loss.sinkhorn.n_iterations",
    "sinkhorn_tolerance": "loss.sinkhorn.convergence_tolerance",
    "queue_length": "loss.queue_length",
    "queue_start": "loss.queue_start_iteration",
    "hidden_dims": "encoder.hidden_dims",
    "embed_dim": "encoder.embed_dim",
}


def _default(model: type[BaseModel], name: str):
    field = model.model_fields[name]
    return field.get_default(call_default_factory=True)


def manifest_path(output: str | Path) -> Path:
    return Path(f"{output}.manifest.json")


def manifest_target(args: argparse.Namespace, beside: str | Path) -> Path:
    """--manifest, если задан, иначе <beside>.manifest.json."""
    return Path(args.manifest) if args.manifest else manifest_path(beside)


def write_manifest(path: Path, manifest: RunManifest) -> None:
    write_bytes(path, (manifest.model_dump_json(indent=2) + "\n").encode("utf-8"))
    logger.info(f"Manifest written to {path}")


def _emit_report(report: BaseModel, results: str | None) -> None:
    print(report.model_dump_json())
    if results:
        append_json_line(results, report)


# --- Команды ---

def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = CorpusSpec(
        n_samples=args.n,
        n_latent_clusters=args.clusters,
        latent_dim=args.latent_dim,
        d1=args.d1,
        d2=args.d2,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    save_corpus(generate(spec), args.out)
    write_manifest(manifest_target(args, args.out), RunManifest(
        command="gen-data",
        config=spec.model_dump(),
        config_text=config_to_text(spec),
        paths={"corpus": str(args.out)},
        seed=spec.seed,
        tool_version=settings.app_version,
    ))
    return 0


def _inline_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "converged", False):
        converged = SinkhornConfig.converged()
        overrides["loss.sinkhorn.n_iterations"] = str(converged.n_iterations)
        overrides["loss.sinkhorn.convergence_tolerance"] = repr(converged.convergence_tolerance)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_train_config(args: argparse.Namespace, corpus_dims: tuple[int, int] | None = None) -> tuple[TrainConfig, dict[str, str]]:
    """
    Пресет, поверх него файл конфигурации, затем флаги. Возвращает
    конфигурацию и флаги, перекрывшие пресет и файл. Размерности входа
    берутся из корпуса, если их не задали явно.
    """
    config = TrainConfig.preset(args.preset)
    file_values: dict[str, str] = {}
    if args.config:
        file_values = parse_config_text(read_bytes(args.config).decode("utf-8"))
    inline = _inline_overrides(args)
    for key in sorted(set(file_values) & set(inline)):
        logger.info(f"Flag overrides config file: {key}={inline[key]} (file had {file_values[key]})")
    merged = {**file_values, **inline}
    if corpus_dims is not None and "encoder.input_dims" not in merged:
        merged["encoder.input_dims"] = f"{corpus_dims[0]},{corpus_dims[1]}"
    return apply_overrides(config, merged), inline


def cmd_pretrain(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.data)
    metrics_file = Path(args.metrics or f"{args.out}.metrics.jsonl")

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        config, overrides = ckpt.config, {}
        if _inline_overrides(args) or args.config:
            logger.warning("Resuming: configuration comes from the checkpoint, config file and flags are ignored")
    else:
        ckpt = None
        config, overrides = resolve_train_config(args, corpus.dims)
        write_bytes(metrics_file, b"")

    result = train(
        corpus,
        config,
        resume_from=ckpt,
        metrics_sink=lambda record: append_json_line(metrics_file, record),
        max_steps=args.max_steps,
    )
    save_checkpoint(result.checkpoint, args.out)
    paths = {"corpus": str(args.data), "checkpoint": str(args.out), "metrics": str(metrics_file)}
    if args.resume:
        paths["resumed_from"] = str(args.resume)
    write_manifest(manifest_target(args, args.out), RunManifest(
        command="pretrain",
        config=config.model_dump(mode="json"),
        config_text=config_to_text(config),
        paths=paths,
        overrides=overrides,
        seed=config.seed,
        tool_version=settings.app_version,
    ))
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    if args.probe == "linear":
        report = linear_probe(ckpt, corpus, args.seed, args.modality, args.label_fraction)
    elif args.probe == "knn":
        report = knn_probe(ckpt, corpus, args.k_neighbors, args.seed, args.modality, args.label_fraction)
    else:
        report = cluster_agreement(ckpt, corpus)
    results = args.results or settings.results_path
    _emit_report(report, results)
    paths = {"checkpoint": str(args.ckpt), "corpus": str(args.data)}
    if results:
        paths["results"] = str(results)
    write_manifest(manifest_target(args, results or f"{args.ckpt}.probe-{args.probe}"), RunManifest(
        command="probe",
        config={
            "probe": args.probe,
            "k_neighbors": args.k_neighbors,
            "modality": args.modality,
            "label_fraction": args.label_fraction,
        },
        paths=paths,
        seed=args.seed,
        tool_version=settings.app_version,
    ))
    return 0


def _read_scores(path: str) -> np.ndarray:
    text = read_bytes(path).decode("utf-8")
    rows = [line for line in text.splitlines() if line.strip()]
    try:
        scores = np.array([[float(v) for v in line.split(",")] for line in rows], dtype=np.float64)
    except ValueError as e:
        raise InputError(f"{path}: scores must be comma-separated numbers: {e}") from e
    if scores.ndim != 2:
        raise InputError(f"{path}: all score rows must have the same length")
    return scores


def cmd_codes(args: argparse.Namespace) -> int:
    if args.converged:
        config = SinkhornConfig.converged(epsilon=args.epsilon)
    else:
        config = SinkhornConfig(epsilon=args.epsilon, n_iterations=args.iters)
    codes = compute_codes(_read_scores(args.scores), config)
    for row in codes.q:
        print(",".join(f"{v:.9g}" for v in row))
    logger.info(f"Codes: {codes.n_sweeps} sweeps, row deviation {codes.row_deviation:.2e}, column deviation {codes.col_deviation:.2e}")
    write_manifest(manifest_target(args, f"{args.scores}.codes"), RunManifest(
        command="codes",
        config=config.model_dump(mode="json"),
        config_text=config_to_text(config),
        paths={"scores": str(args.scores)},
        tool_version=settings.app_version,
    ))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck(seed=args.seed, perturb_op=args.perturb)
    for entry in report.entries:
        status = "ok" if entry.passed else "FAIL"
        print(f"{entry.op:<20} {entry.max_relative_error:.3e} {status}")
    # у gradcheck нет файлов данных: манифест по умолчанию лежит в LOG_DIR
    write_manifest(manifest_target(args, Path(settings.log_dir) / "gradcheck"), RunManifest(
        command="gradcheck",
        config={
            "perturb": args.perturb,
            "step": settings.gradcheck_step,
            "tolerance": report.tolerance,
            "passed": report.passed,
        },
        seed=args.seed,
        tool_version=settings.app_version,
    ))
    if not report.passed:
        print(f"gradcheck failed: {', '.join(report.failed_ops())}")
        return 1
    print(f"gradcheck passed (tolerance {report.tolerance:.1e})")
    return 0


def cmd_sweep_prototypes(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.data)
    config, overrides = resolve_train_config(args, corpus.dims)
    ks = [int(k) for k in args.ks.split(",") if k.strip()]
    if not ks:
        raise InputError("--ks needs at least one prototype count")
    rows = prototype_sweep(corpus, config, ks, args.seed)
    results = args.results or settings.results_path
    for row in rows:
        _emit_report(row, results)
    paths = {"corpus": str(args.data)}
    if results:
        paths["results"] = str(results)
    write_manifest(manifest_target(args, results or f"{args.data}.sweep"), RunManifest(
        command="sweep-prototypes",
        config={**config.model_dump(mode="json"), "ks": ks},
        config_text=config_to_text(config),
        paths=paths,
        overrides=overrides,
        seed=args.seed,
        tool_version=settings.app_version,
    ))
    return 0


# --- Разбор аргументов ---

def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    flat = flatten_config(defaults)
    group = parser.add_argument_group("training configuration (preset < --config < flags)")
    group.add_argument("--config", help="canonical key=value configuration file")
    group.add_argument("--preset", choices=PRESETS, default="desk", help="base hyperparameter set")
    group.add_argument("--epochs", type=int, help=f"training epochs (desk preset: {flat['epochs']})")
    group.add_argument("--batch-size", type=int, help=f"batch size (desk preset: {flat['batch_size']})")
    group.add_argument("--lr", type=float, help=f"base learning rate (desk preset: {flat['base_lr']})")
    group.add_argument("--momentum", type=float, help=f"SGD momentum (desk preset: {flat['momentum']})")
    group.add_argument("--freeze", type=int, help="iterations with frozen prototypes (desk preset: one epoch)")
    group.add_argument("--k", type=int, help=f"number of prototypes K (desk preset: {flat['k_prototypes']})")
    group.add_argument("--train-seed", type=int, help=f"initialization and shuffling seed (desk preset: {flat['seed']})")
    group.add_argument("--temperature", type=float, help=f"softmax temperature (desk preset: {flat['loss.temperature']})")
    group.add_argument("--epsilon", type=float, help=f"Sinkhorn regularization (desk preset: {flat['loss.sinkhorn.epsilon']})")
    group.add_argument("--sinkhorn-iters", type=int, help=f"Sinkhorn sweeps (desk preset: {flat['loss.sinkhorn.n_iterations']})")
    group.add_argument("--sinkhorn-tolerance", type=float, help="Sinkhorn early-stop tolerance (desk preset: 0, off)")
    group.add_argument("--converged", action="store_true", help="converged Sinkhorn: tolerance 1e-8, up to 1000 sweeps")
    group.add_argument("--queue-length", type=int, help=f"feature queue length (desk preset: {flat['loss.queue_length']})")
    group.add_argument("--queue-start", type=int, help="iteration from which the queue is used (desk preset: one epoch)")
    group.add_argument("--hidden-dims", help=f"comma-separated hidden widths (desk preset: {flat['encoder.hidden_dims']})")
    group.add_argument("--embed-dim", type=int, help=f"embedding dimension D (desk preset: {flat['encoder.embed_dim']})")
    group.add_argument("--set", action="append", metavar="KEY=VALUE", help="any canonical config key (repeatable)")


def _add_manifest_flag(parser: argparse.ArgumentParser, default_hint: str) -> None:
    parser.add_argument("--manifest", help=f"where to write the run manifest; if omitted, {default_hint}")


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog=SERVICE_NAME,
        description="Multi-modal swapped-prototype pre-training on synthetic paired corpora.",
        formatter_class=formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired corpus (MMP1)", formatter_class=formatter)
    p.add_argument("--n", type=int, default=_default(CorpusSpec, "n_samples"), help="number of paired samples")
    p.add_argument("--clusters", type=int, default=_default(CorpusSpec, "n_latent_clusters"), help="latent clusters")
    p.add_argument("--latent-dim", type=int, default=_default(CorpusSpec, "latent_dim"), help="latent dimension")
    p.add_argument("--d1", type=int, default=_default(CorpusSpec, "d1"), help="modality-1 dimension")
    p.add_argument("--d2", type=int, default=_default(CorpusSpec, "d2"), help="modality-2 dimension")
    p.add_argument("--sigma", type=float, default=_default(CorpusSpec, "noise_sigma"), help="Gaussian noise sigma")
    p.add_argument("--seed", type=int, default=_default(CorpusSpec, "seed"), help="generator seed")
    p.add_argument("--out", required=True, help="output corpus file")
    _add_manifest_flag(p, "<out>.manifest.json")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train encoder and prototypes", formatter_class=formatter)
    p.add_argument("--data", required=True, help="MMP1 corpus file")
    p.add_argument("--out", required=True, help="output checkpoint (MMCK)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--metrics", help="metrics JSON-lines file (default: <out>.metrics.jsonl)")
    p.add_argument("--max-steps", type=int, help="stop after this many steps of this invocation")
    _add_train_flags(p)
    _add_manifest_flag(p, "<out>.manifest.json")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate a checkpoint against corpus labels", formatter_class=formatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="labelled MMP1 corpus file")
    p.add_argument("--probe", choices=("linear", "knn", "cluster"), default="linear", help="probe kind")
    p.add_argument("--seed", type=int, default=0, help="train/test split seed")
    p.add_argument("--k-neighbors", type=int, default=20, help="neighbours for the kNN probe")
    p.add_argument("--modality", choices=MODALITY_CHOICES, default="1", help="features of modality 1, 2 or both")
    p.add_argument("--label-fraction", type=float, default=1.0, help="stratified fraction of the training split that keeps its labels")
    p.add_argument("--results", help="append the report here (default: RESULTS_FILE)")
    _add_manifest_flag(p, "<results or ckpt>.probe-<kind>.manifest.json")
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("codes", help="print Sinkhorn codes for a score matrix", formatter_class=formatter)
    p.add_argument("--scores", required=True, help="K x B score matrix, comma-separated rows")
    p.add_argument("--epsilon", type=float, default=_default(SinkhornConfig, "epsilon"), help="entropic regularization")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--iters", type=int, default=_default(SinkhornConfig, "n_iterations"), help="fixed number of sweeps")
    mode.add_argument("--converged", action="store_true", help="iterate to tolerance 1e-8 (at most 1000 sweeps)")
    _add_manifest_flag(p, "<scores>.codes.manifest.json")
    p.set_defaults(handler=cmd_codes)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients", formatter_class=formatter)
    p.add_argument("--seed", type=int, default=0, help="seed of the test inputs")
    p.add_argument("--perturb", choices=OPS, help="test hook: corrupt the analytic gradient of this op")
    _add_manifest_flag(p, "LOG_DIR/gradcheck.manifest.json")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("sweep-prototypes", help="train one model per K and probe each", formatter_class=formatter)
    p.add_argument("--data", required=True, help="labelled MMP1 corpus file")
    p.add_argument("--ks", default="4,8,16,32", help="comma-separated prototype counts")
    p.add_argument("--seed", type=int, default=0, help="train/test split seed")
    p.add_argument("--results", help="append rows here (default: RESULTS_FILE)")
    _add_train_flags(p)
    _add_manifest_flag(p, "<results or data>.sweep.manifest.json")
    p.set_defaults(handler=cmd_sweep_prototypes)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(SERVICE_NAME)
    try:
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"Invalid parameters for {args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MMPError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except UnicodeDecodeError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return StorageError.exit_code
