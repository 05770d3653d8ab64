import logging
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path

from app.config import settings

FALLBACK_LOG_DIR = Path("logs")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _writable_dir(requested: Path, root_logger: logging.Logger) -> Path:
    """Создаёт каталог логов; если он недоступен для записи, откатывается на ./logs."""
    try:
        if not requested.exists():
            requested.mkdir(parents=True, exist_ok=True)
            root_logger.info(f"Created log directory: {requested}")
        if requested.is_dir() and _can_write(requested):
            return requested
        root_logger.warning(f"Directory {requested} is NOT writable! Falling back to '{FALLBACK_LOG_DIR}'.")
    except OSError as e:
        root_logger.warning(f"Could not create {requested}: {e}. Falling back to '{FALLBACK_LOG_DIR}'.")
    FALLBACK_LOG_DIR.mkdir(parents=True, exist_ok=True)
    return FALLBACK_LOG_DIR


def _can_write(directory: Path) -> bool:
    marker = directory / ".write_check"
    try:
        marker.touch()
        marker.unlink()
        return True
    except OSError:
        return False


def _rotating(path: Path, level: int, backups: int, formatter: logging.Formatter) -> RotatingFileHandler:
    handler = RotatingFileHandler(path, maxBytes=settings.log_max_bytes, backupCount=backups, encoding="utf-8")
    handler.setFormatter(formatter)
    handler.setLevel(level)
    return handler


def setup_logging(service_name: str, log_dir: str | None = None) -> logging.Logger:
    """
    Настраивает корневой логгер для одной команды CLI.

    Консоль (stderr) получает всё от LOG_LEVEL; stdout остаётся за отчётами.
    Полный лог пишется в <LOG_DIR>/<команда>_<дата>_<время>.log, а ошибки,
    включая аварийные остановки обучения, дублируются в постоянный
    errors_<команда>.log с отдельной ротацией.
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(settings.log_level.upper())
    root_logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root_logger.addHandler(console)

    directory = _writable_dir(Path(log_dir or settings.log_dir), root_logger)
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = (directory / f"{service_name}_{stamp}.log").resolve()
    error_file = (directory / f"errors_{service_name}.log").resolve()

    try:
        full_level = logging.DEBUG if settings.debug else logging.INFO
        root_logger.addHandler(_rotating(log_file, full_level, settings.log_rotation_count, formatter))
        root_logger.addHandler(_rotating(error_file, logging.ERROR, settings.error_log_rotation_count, formatter))
        root_logger.debug(f"Logging to file: {log_file}")
    except OSError as e:
        root_logger.error(f"FAILED to initialize file logging: {e}")

    return logging.getLogger(service_name)
