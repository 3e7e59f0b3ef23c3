#!/usr/bin/env python3
"""
Configuración de proceso centralizada: variables de entorno, logging y
ejecución paralela con orden determinista.

Las variables se leen desde .env una sola vez (python-dotenv) y los flags de la
línea de comandos tienen prioridad sobre ellas.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TypeVar

from dotenv import load_dotenv


_ENV_LOADED = False
_LOGGING_CONFIGURED = False

DEFAULT_MAX_WORKERS = 3
DEFAULT_RESULTS_DIR = "results"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

T = TypeVar("T")
R = TypeVar("R")


def ensure_env_loaded() -> None:
    """Carga variables de entorno desde .env una sola vez."""
    global _ENV_LOADED
    if _ENV_LOADED:
        return

    candidate_paths = [
        Path.cwd() / ".env",
        Path(__file__).resolve().parent / ".env",
    ]
    for env_path in candidate_paths:
        if env_path.exists():
            load_dotenv(env_path, override=False)
            break
    _ENV_LOADED = True


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configura el logging raíz una sola vez.

    Args:
        level: Nivel explícito; si es None se usa LOG_LEVEL (default INFO).
    """
    global _LOGGING_CONFIGURED
    if _LOGGING_CONFIGURED:
        return
    ensure_env_loaded()
    level_name = (level or os.environ.get("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)
    _LOGGING_CONFIGURED = True


def get_max_workers() -> int:
    """Retorna MAX_WORKERS (default 3)."""
    ensure_env_loaded()
    raw = os.environ.get("MAX_WORKERS", str(DEFAULT_MAX_WORKERS))
    try:
        return max(1, int(raw))
    except ValueError:
        return DEFAULT_MAX_WORKERS


def is_parallel() -> bool:
    """Retorna True si PARALLEL_EXECUTION está activo (default true)."""
    ensure_env_loaded()
    return os.environ.get("PARALLEL_EXECUTION", "true").lower() == "true"


def get_results_dir() -> Path:
    """Directorio base para tablas, reportes y gráficos."""
    ensure_env_loaded()
    return Path(os.environ.get("RESULTS_DIR", DEFAULT_RESULTS_DIR))


def get_default_seed() -> Optional[int]:
    """Semilla por defecto desde RUN_SEED, o None si no está definida."""
    ensure_env_loaded()
    raw = os.environ.get("RUN_SEED")
    return int(raw) if raw else None


def resolve_workers(cli_threads: Optional[int] = None) -> int:
    """
    Decide cuántos threads usar.

    Args:
        cli_threads: Valor de --threads; tiene prioridad sobre el entorno.

    Returns:
        Número de workers (>= 1).
    """
    if cli_threads is not None:
        return max(1, int(cli_threads))
    if not is_parallel():
        return 1
    return get_max_workers()


def map_in_order(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Aplica fn a cada item y retorna los resultados en el orden de entrada.

    El resultado no depende del número de workers: cada tarea escribe su propia
    posición y las semillas de cada tarea se derivan de su índice, nunca del
    thread que la ejecuta.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List[Optional[R]] = [None] * len(items)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(fn, item): idx for idx, item in enumerate(items)}
        for future, idx in futures.items():
            results[idx] = future.result()
    return results  # type: ignore[return-value]
