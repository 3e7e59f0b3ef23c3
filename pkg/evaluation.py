#!/usr/bin/env python3
"""
Evaluación fuera de muestra de políticas sobre trayectorias nuevas.

Todas las políticas se simulan con la misma contabilidad (costos, quiebra y
filtro de creencias) y con streams de evaluación disjuntos de los usados para
resolver. Los reportes se escriben como CSV y los gráficos como SVG.
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from numpy.typing import NDArray

from calibration_io import FLOAT_FORMAT, write_atomic
from dp_solver import BeliefGrid, PolicyTable
from lmcts_solver import LookupTable
from market_core import (
    BANKRUPTCY_FLOOR,
    SOLVER_STREAMS,
    Constraints,
    FilterStats,
    MarketState,
    RegimeModel,
    SolverError,
    Stream,
    UtilitySpec,
    assert_disjoint_streams,
    make_rng,
    utility,
)
from ntz_network import BasePolicy, NtzParams, zone_targets
from settings import map_in_order

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "regime-portfolio"
QUANTILES = (0.05, 0.50, 0.95)


# ============================================================================
# POLÍTICAS
# ============================================================================

@dataclass
class TablePolicy:
    """Rebalancea cada período a la asignación de la tabla en la creencia más cercana."""

    name: str
    base: BasePolicy

    @classmethod
    def from_table(cls, name: str, table: Union[PolicyTable, LookupTable]) -> "TablePolicy":
        return cls(name=name, base=BasePolicy.from_table(table, name))

    @property
    def horizon(self) -> int:
        return self.base.horizon

    def targets(self, t: int, state: MarketState, initial_wealth: float, constraints: Constraints) -> Tuple[NDArray, NDArray]:
        return self.base.at(t, state.beliefs), np.zeros(len(state.wealth), dtype=bool)


@dataclass
class ZonePolicy:
    """Política base con zona de no transacción aprendida."""

    name: str
    base: BasePolicy
    params: NtzParams

    @property
    def horizon(self) -> int:
        return self.base.horizon

    def targets(self, t: int, state: MarketState, initial_wealth: float, constraints: Constraints) -> Tuple[NDArray, NDArray]:
        return zone_targets(
            self.params, self.base, t, state.beliefs, state.wealth / initial_wealth, state.held, constraints
        )


Policy = Union[TablePolicy, ZonePolicy]


def constant_policy(name: str, alloc: Sequence[float], grid: BeliefGrid, horizon: int) -> TablePolicy:
    """Misma asignación en todo (t, creencia); p. ej. todo en caja."""
    table = np.broadcast_to(np.asarray(alloc, dtype=float), (horizon, len(grid), len(alloc))).copy()
    return TablePolicy(name=name, base=BasePolicy(grid=grid, alloc=table, source=name))


# ============================================================================
# REPORTE
# ============================================================================

@dataclass(frozen=True)
class EvalConfig:
    n_paths: int
    horizon: int
    initial_wealth: float
    initial_belief: Tuple[float, ...]
    cost_rate: float
    utility: UtilitySpec
    constraints: Constraints
    goal: Optional[float] = None
    chunk_size: int = 10000
    workers: int = 1
    stream: Stream = Stream.EVAL


@dataclass
class EvalReport:
    """Estadísticas por período (t = 0..T) y terminales de una política."""

    method: str
    mean_utility: NDArray
    mean_wealth: NDArray
    wealth_quantiles: NDArray
    goal_probability_path: Optional[NDArray]
    turnover: NDArray
    cost: NDArray
    terminal_utility: float
    terminal_se: float
    goal_probability: Optional[float]
    avg_turnover: float
    total_cost: float
    n_paths: int
    seed: int
    cost_rate: float
    secondary_corrections: int = 0
    bankrupt_paths: int = 0
    terminal_wealth: NDArray = field(default_factory=lambda: np.empty(0), repr=False)

    def frame(self) -> pd.DataFrame:
        """Columnas por período con el prefijo del método."""
        horizon = len(self.mean_utility) - 1
        p = self.method
        columns: Dict[str, NDArray] = {
            "t": np.arange(horizon + 1),
            f"{p}_mean_utility": self.mean_utility,
            f"{p}_mean_wealth": self.mean_wealth,
        }
        for q, row in zip(QUANTILES, self.wealth_quantiles):
            columns[f"{p}_wealth_q{int(round(q * 100)):02d}"] = row
        if self.goal_probability_path is not None:
            columns[f"{p}_goal_probability"] = self.goal_probability_path
        columns[f"{p}_turnover"] = np.append(self.turnover, np.nan)
        columns[f"{p}_cost"] = np.append(self.cost, np.nan)
        return pd.DataFrame(columns)

    def summary(self) -> Dict[str, object]:
        return {
            "method": self.method,
            "terminal_utility": self.terminal_utility,
            "terminal_se": self.terminal_se,
            "goal_probability": self.goal_probability,
            "avg_turnover": self.avg_turnover,
            "total_cost": self.total_cost,
            "median_terminal_wealth": float(self.wealth_quantiles[1, -1]),
            "n_paths": self.n_paths,
            "seed": self.seed,
            "cost_rate": self.cost_rate,
            "secondary_corrections": self.secondary_corrections,
            "bankrupt_paths": self.bankrupt_paths,
        }


@dataclass
class _ChunkResult:
    wealth: NDArray
    turnover: NDArray
    cost: NDArray
    secondary: int
    underflows: int


def standard_error(values: NDArray) -> float:
    """Error estándar de la media; exactamente 0 si todos los valores coinciden."""
    if len(values) < 2 or np.ptp(values) == 0.0:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def _chunk_sizes(total: int, chunk: int) -> List[int]:
    sizes = [chunk] * (total // chunk)
    if total % chunk:
        sizes.append(total % chunk)
    return sizes


def evaluate(policy: Policy, model: RegimeModel, config: EvalConfig, seed: int) -> EvalReport:
    """
    Simula la política sobre `config.n_paths` trayectorias nuevas.

    Las trayectorias se generan por bloques con semillas derivadas del índice
    del bloque, así el resultado no depende del número de workers.

    Raises:
        SolverError: La política no cubre el horizonte, o `config.stream` es
            un stream de los solvers.
    """
    assert_disjoint_streams(SOLVER_STREAMS, {config.stream})
    if config.horizon > policy.horizon:
        raise SolverError(policy.name, "evaluate", f"policy covers {policy.horizon} steps, need {config.horizon}")
    floor = BANKRUPTCY_FLOOR * config.initial_wealth
    horizon = config.horizon

    def run_chunk(item: Tuple[int, int]) -> _ChunkResult:
        index, size = item
        rng = make_rng(seed, config.stream, index)
        state = MarketState.initial(model, size, config.initial_wealth, config.initial_belief, rng)
        stats = FilterStats()
        wealth = np.empty((size, horizon + 1))
        traded = np.empty((size, horizon))
        paid = np.empty((size, horizon))
        wealth[:, 0] = state.wealth
        secondary = 0
        for t in range(horizon):
            targets, corrected = policy.targets(t, state, config.initial_wealth, config.constraints)
            secondary += int(np.count_nonzero(corrected & state.alive))
            traded[:, t], paid[:, t] = state.advance(model, targets, config.cost_rate, floor, rng, stats)
            wealth[:, t + 1] = state.wealth
        return _ChunkResult(wealth, traded, paid, secondary, stats.underflows)

    items = list(enumerate(_chunk_sizes(config.n_paths, config.chunk_size)))
    chunks = map_in_order(run_chunk, items, config.workers)
    wealth = np.concatenate([c.wealth for c in chunks])
    traded = np.concatenate([c.turnover for c in chunks])
    paid = np.concatenate([c.cost for c in chunks])
    underflows = sum(c.underflows for c in chunks)
    if underflows:
        logger.warning(f"{policy.name}: {underflows} belief updates kept the prior")

    utilities = utility(config.utility, wealth)
    terminal = utilities[:, -1]
    goal_path = None if config.goal is None else np.mean(wealth >= config.goal, axis=0)
    report = EvalReport(
        method=policy.name,
        mean_utility=utilities.mean(axis=0),
        mean_wealth=wealth.mean(axis=0),
        wealth_quantiles=np.quantile(wealth, QUANTILES, axis=0),
        goal_probability_path=goal_path,
        turnover=traded.mean(axis=0),
        cost=paid.mean(axis=0),
        terminal_utility=float(terminal.mean()),
        terminal_se=standard_error(terminal),
        goal_probability=None if goal_path is None else float(goal_path[-1]),
        avg_turnover=float(traded.sum(axis=1).mean() / horizon),
        total_cost=float(paid.sum(axis=1).mean()),
        n_paths=config.n_paths,
        seed=seed,
        cost_rate=config.cost_rate,
        secondary_corrections=sum(c.secondary for c in chunks),
        bankrupt_paths=int(np.count_nonzero(wealth[:, -1] <= floor)),
        terminal_wealth=wealth[:, -1],
    )
    logger.info(
        f"{policy.name}: E[U]={report.terminal_utility:.6g} ± {report.terminal_se:.2g}, "
        f"turnover={report.avg_turnover:.4f}, cost={report.total_cost:.4g}"
    )
    return report


# ============================================================================
# SALIDAS
# ============================================================================

def write_reports_csv(path: Union[str, Path], reports: Sequence[EvalReport]) -> Path:
    """Un CSV por período con las columnas de todos los métodos."""
    frames = [r.frame() for r in reports]
    merged = frames[0]
    for frame in frames[1:]:
        merged = merged.merge(frame, on="t", how="outer")
    return write_atomic(path, merged.to_csv(index=False, float_format=FLOAT_FORMAT))


def write_summary_csv(path: Union[str, Path], rows: Sequence[Dict[str, object]]) -> Path:
    return write_atomic(path, pd.DataFrame(list(rows)).to_csv(index=False, float_format=FLOAT_FORMAT))


def write_terminal_wealth(path: Union[str, Path], reports: Sequence[EvalReport]) -> Path:
    frame = pd.DataFrame({r.method: r.terminal_wealth for r in reports})
    return write_atomic(path, frame.to_csv(index=False, float_format=FLOAT_FORMAT))


def plot_series(
    path: Union[str, Path],
    title: str,
    ylabel: str,
    series: Dict[str, Tuple[NDArray, NDArray]],
) -> Path:
    """Gráfico de líneas en SVG con salida reproducible byte a byte."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label)
    ax.set_title(title)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend()
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    return write_atomic(path, buffer.getvalue())
