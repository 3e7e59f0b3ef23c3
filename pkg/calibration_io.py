#!/usr/bin/env python3
"""
Entrada y salida del proyecto.

- Configuración de corrida en YAML -> RunConfig (con validación por campo)
- Estimación del modelo a partir de retornos etiquetados por régimen
- Archivos de tablas, parámetros de la red y pools: cabecera "# clave: valor"
  seguida de un cuerpo CSV escrito con precisión de ida y vuelta
"""

import io
import logging
import os
import tempfile
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
import pandas as pd
import yaml

from dp_solver import BeliefGrid, DPOptions, PolicyTable, SearchOptions
from lmcts_solver import KernelConfig, LMCTSOptions, LookupTable, PathPool, pool_from_paths
from market_core import (
    Constraints,
    ModelValidationError,
    RegimeModel,
    UtilitySpec,
    check_belief,
    stationary_distribution,
)
from ntz_network import NtzParams, TrainConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"
EXPERIMENTS = ("no_short", "short", "goal", "cost_sweep")
METHODS = ("dp", "lmcts", "dp_nn", "lmcts_nn", "adjusted_dp")

S = TypeVar("S")


class ConfigError(ValueError):
    """Configuración inválida; `path` es la ruta con puntos del campo."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class TableFormatError(ValueError):
    """Archivo de tabla, parámetros o pool mal formado."""

    def __init__(self, source: Union[str, Path], message: str, row: Optional[int] = None):
        self.source = str(source)
        self.row = row
        where = f"{source} row {row}" if row is not None else str(source)
        super().__init__(f"{where}: {message}")


# ============================================================================
# SECCIONES DE CONFIGURACIÓN
# ============================================================================

@dataclass(frozen=True)
class SmoothingSettings:
    """Suavizado de Savitzky-Golay de la tabla de LMCTS."""

    enabled: bool = True
    window: int = 11
    order: int = 1


@dataclass(frozen=True)
class EvaluationSettings:
    paths: int = 100000
    chunk_size: int = 10000
    cost_sweep: Tuple[float, ...] = (0.0, 0.005, 0.01)

    def __post_init__(self):
        if self.paths < 1 or self.chunk_size < 1:
            raise ValueError("paths and chunk_size must be >= 1")
        if any(c < 0.0 for c in self.cost_sweep):
            raise ValueError("cost_sweep rates must be >= 0")


@dataclass(frozen=True)
class ComparisonSettings:
    experiments: Tuple[str, ...] = EXPERIMENTS
    methods: Tuple[str, ...] = METHODS

    def __post_init__(self):
        unknown = [e for e in self.experiments if e not in EXPERIMENTS]
        if unknown:
            raise ValueError(f"unknown experiment {unknown[0]!r}; expected one of {EXPERIMENTS}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method {unknown[0]!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class RunConfig:
    """Configuración completa y validada de una corrida."""

    model: RegimeModel
    horizon: int
    initial_wealth: float
    initial_belief: Tuple[float, ...]
    constraints: Constraints
    cost_rate: float
    utility: UtilitySpec
    goal: Optional[float]
    seed: int
    dp: DPOptions
    adjusted_penalty: Optional[float]
    lmcts: LMCTSOptions
    smoothing: SmoothingSettings
    nn: TrainConfig
    evaluation: EvaluationSettings
    comparison: ComparisonSettings
    source: Optional[str] = None

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            dp=replace(self.dp, seed=seed),
            lmcts=replace(self.lmcts, seed=seed),
            nn=replace(self.nn, seed=seed),
        )

    def with_workers(self, workers: int) -> "RunConfig":
        return replace(self, dp=replace(self.dp, workers=workers), lmcts=replace(self.lmcts, workers=workers))

    def goal_utility(self) -> UtilitySpec:
        """Utilidad de meta para el experimento de meta (requiere `goal`)."""
        if self.goal is None:
            raise ConfigError("goal", "the goal experiment needs a goal wealth")
        return UtilitySpec(kind="goal", goal=self.goal, steepness=self.utility.steepness)


def _mapping(data: Any, path: str) -> Mapping[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    return data


def _reject_unknown(data: Mapping[str, Any], allowed: Sequence[str], path: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")


def _build(cls: Type[S], data: Mapping[str, Any], path: str, **extra: Any) -> S:
    """Construye una sección dataclass rechazando claves desconocidas."""
    allowed = [f.name for f in fields(cls) if f.init and f.name not in extra]
    _reject_unknown(data, allowed, path)
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _split(data: Mapping[str, Any], keys: Sequence[str]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    inside = {k: v for k, v in data.items() if k in keys}
    rest = {k: v for k, v in data.items() if k not in keys}
    return inside, rest


SEARCH_KEYS = [f.name for f in fields(SearchOptions)]
KERNEL_KEYS = [f.name for f in fields(KernelConfig)]
SMOOTHING_KEYS = {"smooth": "enabled", "sg_window": "window", "sg_order": "order"}

TOP_LEVEL_KEYS = (
    "assets", "regimes", "mu", "cov", "trans", "rf", "model_file",
    "initial_wealth", "initial_belief", "horizon", "constraints", "cost_rate",
    "utility", "goal", "seed", "dp", "lmcts", "nn", "evaluation", "comparison",
)
MODEL_KEYS = ("assets", "regimes", "mu", "cov", "trans", "rf")


# ============================================================================
# MODELO
# ============================================================================

def _array(data: Mapping[str, Any], key: str, ndim: int) -> np.ndarray:
    if key not in data:
        raise ConfigError(key, "missing required key")
    try:
        arr = np.array(data[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"not a numeric array ({exc})") from exc
    if arr.ndim != ndim:
        raise ConfigError(key, f"expected {ndim} dimensions, got {arr.ndim}")
    return arr


def model_from_dict(data: Mapping[str, Any]) -> RegimeModel:
    """
    Construye el modelo desde un diccionario YAML.

    Raises:
        ConfigError: Falta un campo o las formas no cuadran.
        ModelValidationError: Parámetros inválidos (p. ej. fila de transición que no suma 1).
    """
    mu = _array(data, "mu", 2)
    cov = _array(data, "cov", 3)
    trans = _array(data, "trans", 2)
    rf = np.array(data.get("rf", 0.0), dtype=float)
    regimes = int(data.get("regimes", mu.shape[0]))
    if mu.shape[0] != regimes:
        raise ConfigError("mu", f"{mu.shape[0]} regimes listed, header says {regimes}")
    assets = data.get("assets") or ()
    if assets and len(assets) != mu.shape[1]:
        raise ConfigError("assets", f"{len(assets)} names for {mu.shape[1]} risky assets")
    return RegimeModel(mu=mu, sigma=cov, trans=trans, rf=rf, asset_names=tuple(str(a) for a in assets))


def model_to_dict(model: RegimeModel) -> Dict[str, Any]:
    rf = model.rf.tolist()
    return {
        "assets": list(model.asset_names),
        "regimes": model.n_regimes,
        "mu": model.mu.tolist(),
        "cov": model.sigma.tolist(),
        "trans": model.trans.tolist(),
        "rf": rf[0] if len(set(rf)) == 1 else rf,
    }


def load_model(path: Union[str, Path]) -> RegimeModel:
    return model_from_dict(_mapping(_read_yaml(path), str(path)))


def save_model(path: Union[str, Path], model: RegimeModel, comment: Optional[str] = None) -> Path:
    text = yaml.safe_dump(model_to_dict(model), sort_keys=False, default_flow_style=None)
    if comment:
        text = "".join(f"# {line}\n" for line in comment.splitlines()) + text
    return write_atomic(path, text)


def estimate_labeled(
    returns: np.ndarray,
    labels: np.ndarray,
    n_regimes: Optional[int] = None,
    rf: Union[float, Sequence[float]] = 0.0,
    asset_names: Sequence[str] = (),
    sequence: Optional[np.ndarray] = None,
) -> RegimeModel:
    """
    Estima medias, covarianzas y transiciones con etiquetas de régimen conocidas.

    Las transiciones se cuentan solo entre observaciones consecutivas de la
    misma secuencia; un régimen sin transiciones salientes queda absorbente.

    Raises:
        ModelValidationError: Un régimen tiene menos de n + 2 observaciones.
    """
    returns = np.asarray(returns, dtype=float)
    if returns.ndim == 1:
        returns = returns[:, None]
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(returns):
        raise ModelValidationError("labels", f"{len(labels)} labels for {len(returns)} observations")
    k = int(n_regimes) if n_regimes is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= k:
        raise ModelValidationError("labels", f"labels must lie in [0, {k})")
    n = returns.shape[1]

    mu = np.empty((k, n))
    sigma = np.empty((k, n, n))
    for regime in range(k):
        rows = returns[labels == regime]
        if len(rows) < n + 2:
            raise ModelValidationError(
                f"regime {regime}", f"{len(rows)} observations, need at least {n + 2}"
            )
        mu[regime] = rows.mean(axis=0)
        sigma[regime] = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1))

    seq = np.zeros(len(labels), dtype=int) if sequence is None else np.asarray(sequence)
    same = seq[1:] == seq[:-1]
    counts = np.zeros((k, k))
    np.add.at(counts, (labels[:-1][same], labels[1:][same]), 1.0)
    totals = counts.sum(axis=1)
    trans = np.where(totals[:, None] > 0, counts / np.where(totals > 0, totals, 1.0)[:, None], np.eye(k))
    absorbing = [r for r in range(k) if totals[r] == 0]
    if absorbing:
        logger.warning(f"regimes {absorbing} have no outgoing transitions; treated as absorbing")
    return RegimeModel(mu=mu, sigma=sigma, trans=trans, rf=rf, asset_names=tuple(asset_names))


def load_labeled_returns(
    path: Union[str, Path],
    label_column: str = "regime",
    sequence_column: Optional[str] = None,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray], List[str]]:
    """Lee un CSV de retornos con una columna de etiqueta de régimen."""
    frame = pd.read_csv(path, float_precision="round_trip")
    if label_column not in frame.columns:
        raise ConfigError(label_column, f"column not found in {path}")
    drop = [label_column] + ([sequence_column] if sequence_column else [])
    assets = [c for c in frame.columns if c not in drop]
    sequence = frame[sequence_column].to_numpy() if sequence_column else None
    return frame[assets].to_numpy(dtype=float), frame[label_column].to_numpy(dtype=int), sequence, assets


# ============================================================================
# CONFIGURACIÓN DE CORRIDA
# ============================================================================

def _read_yaml(path: Union[str, Path]) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return yaml.safe_load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(str(path), "file not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML ({exc})") from exc


def _constraints(data: Mapping[str, Any]) -> Constraints:
    _reject_unknown(data, ("shorting", "bound", "max_weight"), "constraints")
    try:
        return Constraints(
            allow_short=bool(data.get("shorting", False)),
            short_limit=float(data.get("bound", 1.0)),
            max_weight=None if data.get("max_weight") is None else float(data["max_weight"]),
        )
    except ValueError as exc:
        raise ConfigError("constraints", str(exc)) from exc


def _utility(data: Mapping[str, Any], goal: Optional[float]) -> UtilitySpec:
    data = dict(data)
    if goal is not None and "goal" not in data:
        data["goal"] = goal
    if "goal" not in data:
        data["goal"] = 0.0
    return _build(UtilitySpec, data, "utility")


def _dp_options(data: Mapping[str, Any], seed: int) -> Tuple[DPOptions, Optional[float]]:
    search_data, rest = _split(data, SEARCH_KEYS)
    penalty = rest.pop("penalty", "auto")
    search = _build(SearchOptions, search_data, "dp")
    options = _build(DPOptions, rest, "dp", search=search, seed=seed, penalty=0.0, workers=1)
    if penalty in (None, "auto"):
        return options, None
    try:
        return options, float(penalty)
    except (TypeError, ValueError) as exc:
        raise ConfigError("dp.penalty", "expected a number or 'auto'") from exc


def _lmcts_options(data: Mapping[str, Any], seed: int) -> Tuple[LMCTSOptions, SmoothingSettings]:
    search_data, rest = _split(data, SEARCH_KEYS)
    kernel_data, rest = _split(rest, KERNEL_KEYS)
    smooth_data, rest = _split(rest, list(SMOOTHING_KEYS))
    smoothing = _build(SmoothingSettings, {SMOOTHING_KEYS[k]: v for k, v in smooth_data.items()}, "lmcts")
    options = _build(
        LMCTSOptions,
        rest,
        "lmcts",
        kernel=_build(KernelConfig, kernel_data, "lmcts"),
        search=_build(SearchOptions, search_data, "lmcts"),
        seed=seed,
        workers=1,
    )
    return options, smoothing


def _initial_belief(value: Any, model: RegimeModel) -> Tuple[float, ...]:
    if value is None or value == "stationary":
        return tuple(float(p) for p in stationary_distribution(model.trans))
    try:
        return tuple(float(p) for p in check_belief(np.array(value, dtype=float), model.n_regimes))
    except (TypeError, ValueError) as exc:
        raise ConfigError("initial_belief", str(exc)) from exc


def config_from_dict(data: Mapping[str, Any], source: Optional[str] = None, base_dir: Optional[Path] = None) -> RunConfig:
    """
    Valida un diccionario de configuración y construye RunConfig.

    Raises:
        ConfigError: Clave desconocida o valor inválido (con la ruta del campo).
        ModelValidationError: Parámetros de modelo inválidos.
    """
    data = _mapping(data, source or "config")
    _reject_unknown(data, TOP_LEVEL_KEYS, "")

    if "model_file" in data:
        inline = [k for k in MODEL_KEYS if k in data]
        if inline:
            raise ConfigError(inline[0], "model given both inline and through model_file")
        model_path = Path(data["model_file"])
        if base_dir is not None and not model_path.is_absolute():
            model_path = base_dir / model_path
        model = load_model(model_path)
    else:
        model = model_from_dict(data)

    seed = int(data.get("seed", 0))
    horizon = int(data.get("horizon", 50))
    if horizon < 1:
        raise ConfigError("horizon", f"must be >= 1, got {horizon}")
    initial_wealth = float(data.get("initial_wealth", 1000.0))
    if initial_wealth <= 0.0:
        raise ConfigError("initial_wealth", "must be positive")
    cost_rate = float(data.get("cost_rate", 0.005))
    if cost_rate < 0.0:
        raise ConfigError("cost_rate", "must be >= 0")
    goal = None if data.get("goal") is None else float(data["goal"])

    dp, adjusted_penalty = _dp_options(_mapping(data.get("dp"), "dp"), seed)
    lmcts, smoothing = _lmcts_options(_mapping(data.get("lmcts"), "lmcts"), seed)
    if lmcts.belief_step != dp.belief_step:
        raise ConfigError("lmcts.belief_step", "must match dp.belief_step so both tables share a grid")

    return RunConfig(
        model=model,
        horizon=horizon,
        initial_wealth=initial_wealth,
        initial_belief=_initial_belief(data.get("initial_belief"), model),
        constraints=_constraints(_mapping(data.get("constraints"), "constraints")),
        cost_rate=cost_rate,
        utility=_utility(_mapping(data.get("utility"), "utility"), goal),
        goal=goal,
        seed=seed,
        dp=dp,
        adjusted_penalty=adjusted_penalty,
        lmcts=lmcts,
        smoothing=smoothing,
        nn=_build(TrainConfig, _mapping(data.get("nn"), "nn"), "nn", seed=seed),
        evaluation=_build(EvaluationSettings, _mapping(data.get("evaluation"), "evaluation"), "evaluation"),
        comparison=_build(ComparisonSettings, _mapping(data.get("comparison"), "comparison"), "comparison"),
        source=source,
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    """Lee y valida un archivo YAML de configuración."""
    path = Path(path)
    config = config_from_dict(_read_yaml(path), source=str(path), base_dir=path.parent)
    logger.info(
        f"Loaded {path}: {config.model.n_risky} risky assets, {config.model.n_regimes} regimes, "
        f"horizon {config.horizon}"
    )
    return config


# ============================================================================
# ARCHIVOS CON CABECERA
# ============================================================================

def write_atomic(path: Union[str, Path], text: str) -> Path:
    """Escribe a un temporal en el mismo directorio y lo renombra."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _compose(meta: Dict[str, Any], frame: pd.DataFrame) -> str:
    header = "".join(f"# {key}: {value}\n" for key, value in meta.items())
    return header + frame.to_csv(index=False, float_format=FLOAT_FORMAT)


def _parse(path: Union[str, Path], expected_format: str) -> Tuple[Dict[str, str], pd.DataFrame]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise TableFormatError(path, "file not found") from exc
    meta: Dict[str, str] = {}
    lines = text.splitlines(keepends=True)
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = i
            break
        key, _, value = line[1:].strip().partition(":")
        meta[key.strip()] = value.strip()
    else:
        body_start = len(lines)

    if meta.get("format") != expected_format:
        raise TableFormatError(path, f"expected format {expected_format!r}, found {meta.get('format')!r}")
    version = meta.get("version")
    if version != str(FORMAT_VERSION):
        raise TableFormatError(path, f"unsupported version {version}, expected {FORMAT_VERSION}")
    body = "".join(lines[body_start:])
    if not body.strip():
        raise TableFormatError(path, "empty body")
    try:
        frame = pd.read_csv(io.StringIO(body), float_precision="round_trip")
    except (pd.errors.ParserError, ValueError) as exc:
        raise TableFormatError(path, f"malformed CSV body ({exc})") from exc
    return meta, frame


def _meta_int(meta: Mapping[str, str], key: str, path: Union[str, Path]) -> int:
    try:
        return int(meta[key])
    except (KeyError, ValueError) as exc:
        raise TableFormatError(path, f"header field {key!r} missing or not an integer") from exc


def _meta_float(meta: Mapping[str, str], key: str, path: Union[str, Path]) -> float:
    try:
        return float(meta[key])
    except (KeyError, ValueError) as exc:
        raise TableFormatError(path, f"header field {key!r} missing or not a number") from exc


def _weight_columns(asset_names: Sequence[str]) -> List[str]:
    return [f"w_{name}" for name in asset_names] + ["w_cash"]


def _check_rows(frame: pd.DataFrame, columns: Sequence[str], path: Union[str, Path], what: str) -> None:
    counts = frame[list(columns)].notna().sum(axis=1).to_numpy()
    bad = np.flatnonzero(counts != len(columns))
    if len(bad):
        pos = int(bad[0])
        row = int(frame.index[pos]) + 1
        raise TableFormatError(path, f"expected {len(columns)} {what}, found {int(counts[pos])}", row=row)


# ============================================================================
# TABLAS DE POLÍTICA
# ============================================================================

def save_table(
    path: Union[str, Path],
    table: Union[PolicyTable, LookupTable],
    asset_names: Sequence[str],
    seed: Optional[int] = None,
) -> Path:
    """Guarda una tabla de DP o de LMCTS (completa)."""
    is_policy = isinstance(table, PolicyTable)
    if not is_policy:
        table.require_complete()
    horizon, g, d = table.alloc.shape
    if len(asset_names) != d - 1:
        raise ValueError(f"{len(asset_names)} asset names for {d - 1} risky weights")
    k = table.grid.n_regimes

    meta: Dict[str, Any] = {
        "format": "policy-table",
        "version": FORMAT_VERSION,
        "kind": "dp" if is_policy else "lmcts",
        "horizon": horizon,
        "n_regimes": k,
        "grid_step": repr(table.grid.step),
        "n_weights": d,
        "assets": ",".join(asset_names),
    }
    if is_policy:
        meta.update({
            "utility": table.utility.kind,
            "gamma": repr(table.utility.gamma),
            "penalty": repr(table.penalty),
            "terminal_value": repr(float(table.value[horizon, 0])),
        })
    else:
        meta["smoothed"] = str(table.smoothed).lower()
    if seed is not None:
        meta["seed"] = seed

    t_idx, b_idx = np.meshgrid(np.arange(horizon), np.arange(g), indexing="ij")
    columns: Dict[str, Any] = {"t": t_idx.ravel(), "belief": b_idx.ravel()}
    points = table.grid.points[b_idx.ravel()]
    for j in range(k):
        columns[f"p_{j}"] = points[:, j]
    if is_policy:
        columns["value"] = table.value[:horizon].ravel()
    weights = table.alloc.reshape(-1, d)
    for j, name in enumerate(_weight_columns(asset_names)):
        columns[name] = weights[:, j]
    return write_atomic(path, _compose(meta, pd.DataFrame(columns)))


def load_table(path: Union[str, Path]) -> Tuple[Union[PolicyTable, LookupTable], List[str]]:
    """
    Lee una tabla guardada con save_table.

    Returns:
        (tabla, nombres de activos riesgosos)

    Raises:
        TableFormatError: Versión distinta, filas incompletas o entradas faltantes.
    """
    meta, frame = _parse(path, "policy-table")
    horizon = _meta_int(meta, "horizon", path)
    d = _meta_int(meta, "n_weights", path)
    k = _meta_int(meta, "n_regimes", path)
    assets = [a for a in meta.get("assets", "").split(",") if a]
    if len(assets) != d - 1:
        raise TableFormatError(path, f"header declares {d} weights but names {len(assets)} risky assets")
    weight_cols = _weight_columns(assets)
    present = [c for c in frame.columns if c.startswith("w_")]
    if present != weight_cols:
        raise TableFormatError(path, f"expected weight columns {weight_cols}, found {present}")
    _check_rows(frame, weight_cols, path, "weights")

    grid = BeliefGrid(k, _meta_float(meta, "grid_step", path))
    g = len(grid)
    t = frame["t"].to_numpy(dtype=int)
    b = frame["belief"].to_numpy(dtype=int)
    if np.any((t < 0) | (t >= horizon) | (b < 0) | (b >= g)):
        row = int(np.flatnonzero((t < 0) | (t >= horizon) | (b < 0) | (b >= g))[0])
        raise TableFormatError(path, "t or belief index out of range", row=row + 1)

    alloc = np.full((horizon, g, d), np.nan)
    alloc[t, b] = frame[weight_cols].to_numpy(dtype=float)
    filled = np.zeros((horizon, g), dtype=bool)
    filled[t, b] = True
    if not filled.all():
        mt, mb = np.argwhere(~filled)[0]
        raise TableFormatError(path, f"missing entry for t={int(mt)}, belief={int(mb)}")

    if meta.get("kind") == "dp":
        if "value" not in frame.columns:
            raise TableFormatError(path, "dp table without a value column")
        spec = UtilitySpec(kind=meta.get("utility", "crra"), gamma=_meta_float(meta, "gamma", path))
        value = np.empty((horizon + 1, g))
        value[t, b] = frame["value"].to_numpy(dtype=float)
        value[horizon] = _meta_float(meta, "terminal_value", path)
        table: Union[PolicyTable, LookupTable] = PolicyTable(
            grid=grid, alloc=alloc, value=value, utility=spec, penalty=_meta_float(meta, "penalty", path)
        )
    else:
        table = LookupTable(grid=grid, alloc=alloc, solved=filled, smoothed=meta.get("smoothed") == "true")
    return table, assets


# ============================================================================
# PARÁMETROS DE LA RED
# ============================================================================

def save_params(path: Union[str, Path], params: NtzParams, base_source: str = "", cost_rate: Optional[float] = None) -> Path:
    meta: Dict[str, Any] = {
        "format": "ntz-params",
        "version": FORMAT_VERSION,
        "n_regimes": params.n_regimes,
        "n_risky": params.n_risky,
        "hidden": params.hidden,
        "wealth_feature": str(params.wealth_feature).lower(),
        "center_head": str(params.center_head).lower(),
    }
    if base_source:
        meta["base"] = base_source
    if cost_rate is not None:
        meta["cost_rate"] = repr(cost_rate)
    names: List[str] = []
    index: List[int] = []
    for name, (_, shape) in params.layout.items():
        size = int(np.prod(shape))
        names.extend([name] * size)
        index.extend(range(size))
    frame = pd.DataFrame({"block": names, "index": index, "value": params.vector})
    return write_atomic(path, _compose(meta, frame))


def load_params(path: Union[str, Path]) -> Tuple[NtzParams, Dict[str, str]]:
    """Lee parámetros guardados; retorna también la cabecera (base, cost_rate)."""
    meta, frame = _parse(path, "ntz-params")
    template = NtzParams.zeros(
        _meta_int(meta, "n_regimes", path),
        _meta_int(meta, "n_risky", path),
        hidden=_meta_int(meta, "hidden", path),
        wealth_feature=meta.get("wealth_feature") == "true",
        center_head=meta.get("center_head") == "true",
    )
    _check_rows(frame, ["block", "index", "value"], path, "fields")
    expected = [name for name, (_, shape) in template.layout.items() for _ in range(int(np.prod(shape)))]
    if list(frame["block"]) != expected:
        raise TableFormatError(path, "parameter blocks do not match the declared layout")
    template.vector = frame["value"].to_numpy(dtype=float).copy()
    return template, meta


# ============================================================================
# POOL DE TRAYECTORIAS
# ============================================================================

def save_pool(path: Union[str, Path], pool: PathPool) -> Path:
    g, paths, horizon, n = pool.returns.shape
    meta = {
        "format": "path-pool",
        "version": FORMAT_VERSION,
        "n_regimes": pool.grid.n_regimes,
        "grid_step": repr(pool.grid.step),
        "paths_per_belief": paths,
        "horizon": horizon,
        "n_risky": n,
    }
    b_idx, p_idx, s_idx = np.meshgrid(np.arange(g), np.arange(paths), np.arange(horizon + 1), indexing="ij")
    returns = np.full((g, paths, horizon + 1, n), np.nan)
    returns[:, :, :horizon] = pool.returns
    columns: Dict[str, Any] = {
        "belief": b_idx.ravel(),
        "path": p_idx.ravel(),
        "step": s_idx.ravel(),
        "regime": pool.regimes.ravel(),
    }
    flat = returns.reshape(-1, n)
    for j in range(n):
        columns[f"r_{j}"] = flat[:, j]
    return write_atomic(path, _compose(meta, pd.DataFrame(columns)))


def load_pool(path: Union[str, Path], model: RegimeModel) -> PathPool:
    """Lee un pool y recalcula las creencias con el modelo dado."""
    meta, frame = _parse(path, "path-pool")
    n = _meta_int(meta, "n_risky", path)
    if n != model.n_risky:
        raise TableFormatError(path, f"pool has {n} risky assets, model has {model.n_risky}")
    grid = BeliefGrid(_meta_int(meta, "n_regimes", path), _meta_float(meta, "grid_step", path))
    paths = _meta_int(meta, "paths_per_belief", path)
    horizon = _meta_int(meta, "horizon", path)
    g = len(grid)
    if len(frame) != g * paths * (horizon + 1):
        raise TableFormatError(path, f"expected {g * paths * (horizon + 1)} rows, found {len(frame)}")
    regimes = frame["regime"].to_numpy(dtype=int).reshape(g, paths, horizon + 1)
    cols = [f"r_{j}" for j in range(n)]
    step = frame["step"].to_numpy(dtype=int)
    _check_rows(frame[step < horizon], cols, path, "returns")
    returns = frame[cols].to_numpy(dtype=float).reshape(g, paths, horizon + 1, n)[:, :, :horizon]
    return pool_from_paths(model, grid, returns, regimes)
