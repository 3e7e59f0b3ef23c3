#!/usr/bin/env python3
"""
Búsqueda de Monte Carlo en árbol con tabla de consulta (lookup).

Se resuelve hacia atrás en el tiempo: para cada (t, creencia de la grilla) se
corre una búsqueda de un solo nivel sobre acciones continuas usando KR-UCT
(regresión kernel sobre las recompensas de acciones vecinas) y los rollouts
siguen la tabla ya resuelta para t + 1, ..., T - 1. Al final la tabla se
suaviza en el tiempo con un filtro de Savitzky-Golay.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.signal import savgol_coeffs

from dp_solver import BeliefGrid, SearchOptions, optimize_action
from market_core import (
    BANKRUPTCY_FLOOR,
    Constraints,
    FilterStats,
    RegimeModel,
    SolverError,
    Stream,
    UtilitySpec,
    draw_regimes,
    filter_step,
    gross_returns,
    make_rng,
    simulate_paths,
    utility,
)
from settings import map_in_order

logger = logging.getLogger(__name__)

WIDEN_TOL = 1e-9


# ============================================================================
# CONFIGURACIÓN
# ============================================================================

@dataclass(frozen=True)
class KernelConfig:
    """
    Parámetros de KR-UCT.

    Attributes:
        bandwidth: Ancho del kernel RBF en norma L2 sobre asignaciones
        tau: Umbral de similitud para candidatos de expansión
        explore_c: Constante de exploración
        widen_intercept, widen_slope: Un hijo nuevo se permite si no hay
            hijos o si hijos <= widen_intercept + widen_slope * visitas; con
            los defaults el hijo k llega a las 25 (k - 1) visitas
        deviations: Desvíos unitarios para generar candidatos
        normalize_values: Escala los valores kernel a [0, 1] entre hermanos
            antes de sumar el bono (variante opcional)
        final_visit_fraction: Un hijo entra en la elección final si tiene al
            menos esta fracción de las visitas del más visitado
    """

    bandwidth: float = 0.10
    tau: float = 0.018
    explore_c: float = 5.0
    widen_intercept: float = 0.0
    widen_slope: float = 0.04
    deviations: Tuple[float, ...] = (0.05, 0.10, 0.20)
    normalize_values: bool = False
    final_visit_fraction: float = 0.1

    def __post_init__(self):
        if self.bandwidth <= 0.0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.explore_c < 0.0:
            raise ValueError(f"explore_c must be >= 0, got {self.explore_c}")
        if self.widen_intercept < 0.0 or self.widen_slope < 0.0:
            raise ValueError("widening needs intercept >= 0 and slope >= 0")
        if not 0.0 <= self.final_visit_fraction <= 1.0:
            raise ValueError(f"final_visit_fraction must lie in [0, 1], got {self.final_visit_fraction}")
        if not self.deviations or any(d <= 0.0 for d in self.deviations):
            raise ValueError("deviations must be positive")
        object.__setattr__(self, "deviations", tuple(float(d) for d in self.deviations))


@dataclass(frozen=True)
class LMCTSOptions:
    """Presupuestos y semilla del constructor de la tabla."""

    iterations: int = 10000
    batch_paths: int = 5
    pool_paths: int = 10000
    belief_step: float = 0.05
    kernel: KernelConfig = KernelConfig()
    search: SearchOptions = SearchOptions()
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_paths < 1:
            raise ValueError(f"batch_paths must be >= 1, got {self.batch_paths}")
        if self.pool_paths < 0:
            raise ValueError(f"pool_paths must be >= 0, got {self.pool_paths}")


# ============================================================================
# KERNEL Y NODOS
# ============================================================================

def rbf_kernel(a: NDArray, b: NDArray, bandwidth: float) -> NDArray:
    """K(a, b) = exp(-||a - b||^2 / (2 h^2)); admite lotes con broadcasting."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * bandwidth * bandwidth))


def kernel_matrix(actions: NDArray, bandwidth: float) -> NDArray:
    actions = np.asarray(actions, dtype=float)
    return rbf_kernel(actions[:, None, :], actions[None, :, :], bandwidth)


@dataclass(eq=False)
class ActionNode:
    """Hijo del árbol: una asignación con su conteo y recompensa media."""

    action: NDArray
    visits: int = 0
    mean_reward: float = 0.0
    parent: Optional["SearchTree"] = field(default=None, repr=False)

    def update(self, reward: float) -> None:
        self.visits += 1
        self.mean_reward += (reward - self.mean_reward) / self.visits


def _child_arrays(children: Sequence[ActionNode]) -> Tuple[NDArray, NDArray, NDArray]:
    actions = np.array([c.action for c in children], dtype=float)
    visits = np.array([c.visits for c in children], dtype=float)
    means = np.array([c.mean_reward for c in children], dtype=float)
    return actions, visits, means


def kr_density(action: NDArray, siblings: Sequence[ActionNode], bandwidth: float) -> float:
    """W(a) = sum_b K(a, b) n_b."""
    if not siblings:
        return 0.0
    actions, visits, _ = _child_arrays(siblings)
    return float(np.sum(rbf_kernel(actions, action, bandwidth) * visits))


def kr_value(action: NDArray, siblings: Sequence[ActionNode], bandwidth: float) -> float:
    """
    Estimador de Nadaraya-Watson de la recompensa en `action`.

    Si la densidad es cero retorna la media simple de los hermanos visitados.
    """
    if not siblings:
        return 0.0
    actions, visits, means = _child_arrays(siblings)
    weights = rbf_kernel(actions, action, bandwidth) * visits
    total = weights.sum()
    if total <= 0.0:
        visited = visits > 0
        return float(means[visited].mean()) if visited.any() else 0.0
    return float(np.sum(weights * means) / total)


def _kr_scores(kernel: NDArray, visits: NDArray, means: NDArray) -> Tuple[NDArray, NDArray]:
    density = kernel @ visits
    with np.errstate(invalid="ignore", divide="ignore"):
        values = (kernel @ (visits * means)) / density
    fallback = means[visits > 0].mean() if np.any(visits > 0) else 0.0
    values = np.where(density > 0.0, values, fallback)
    return values, density


def kr_uct_select(
    children: Sequence[ActionNode],
    config: KernelConfig,
    kernel: Optional[NDArray] = None,
) -> ActionNode:
    """
    Elige el hijo que maximiza valor kernel + C sqrt(log sum_b W(b) / W(a)).

    Los valores kernel van en la escala de la utilidad; con `normalize_values`
    se llevan antes a [0, 1] entre hermanos. Los empates van al hijo insertado
    primero.
    """
    if not children:
        raise SolverError("lmcts", "select", "no children to select from")
    actions, visits, means = _child_arrays(children)
    if kernel is None:
        kernel = kernel_matrix(actions, config.bandwidth)
    values, density = _kr_scores(kernel, visits, means)
    if config.normalize_values:
        spread = values.max() - values.min()
        values = (values - values.min()) / spread if spread > 0.0 else np.zeros_like(values)
    total = density.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        bonus = config.explore_c * np.sqrt(np.log(total) / density)
    bonus = np.where(density > 0.0, bonus, np.inf)
    return children[int(np.argmax(values + bonus))]


def generate_candidates(best: NDArray, deviations: Sequence[float], constraints: Constraints) -> List[NDArray]:
    """
    Vecinos de `best`: cada activo riesgoso sube o baja d contra la caja.

    Se descartan los infactibles y los duplicados; si no queda ninguno se
    retorna [best].
    """
    best = np.asarray(best, dtype=float)
    n_risky = len(best) - 1
    candidates: List[NDArray] = []
    seen = set()
    for asset in range(n_risky):
        for dev in deviations:
            for sign in (1.0, -1.0):
                cand = best.copy()
                cand[asset] += sign * dev
                cand[-1] -= sign * dev
                if not constraints.is_feasible(cand):
                    continue
                key = tuple(np.round(cand, 9))
                if key in seen:
                    continue
                seen.add(key)
                candidates.append(cand)
    return candidates or [best.copy()]


def can_widen(n_children: int, visits: int, config: KernelConfig) -> bool:
    """Ensanchamiento progresivo: el primer hijo siempre; luego uno cada 1 / slope visitas."""
    if n_children == 0:
        return True
    return n_children <= config.widen_intercept + config.widen_slope * visits + WIDEN_TOL


# ============================================================================
# TABLA DE CONSULTA
# ============================================================================

@dataclass
class LookupTable:
    """
    Acción elegida por (t, punto de la grilla), forma (T, G, n + 1).

    Las entradas no resueltas son NaN; `solved` marca las disponibles.
    """

    grid: BeliefGrid
    alloc: NDArray
    solved: NDArray
    diagnostics: List[str] = field(default_factory=list)
    smoothed: bool = False

    @classmethod
    def empty(cls, grid: BeliefGrid, horizon: int, n_weights: int) -> "LookupTable":
        return cls(
            grid=grid,
            alloc=np.full((horizon, len(grid), n_weights), np.nan),
            solved=np.zeros((horizon, len(grid)), dtype=bool),
        )

    @property
    def horizon(self) -> int:
        return self.alloc.shape[0]

    @property
    def n_weights(self) -> int:
        return self.alloc.shape[2]

    def __len__(self) -> int:
        return int(self.solved.sum())

    def set(self, t: int, belief_index: int, action: NDArray) -> None:
        self.alloc[t, belief_index] = action
        self.solved[t, belief_index] = True

    def action(self, t: int, belief_index: int) -> NDArray:
        if not self.solved[t, belief_index]:
            raise SolverError("lmcts", "lookup", f"missing entry for t={t}, belief={belief_index}")
        return self.alloc[t, belief_index]

    def require_complete(self, start: int = 0) -> None:
        missing = np.argwhere(~self.solved[start:])
        if len(missing):
            t, b = missing[0]
            raise SolverError("lmcts", "lookup", f"missing entry for t={int(t) + start}, belief={int(b)}")

    def allocation(self, t: int, beliefs: NDArray) -> NDArray:
        return self.alloc[t, self.grid.snap(beliefs)]


# ============================================================================
# POOL DE TRAYECTORIAS
# ============================================================================

@dataclass(frozen=True, eq=False)
class PathPool:
    """
    Trayectorias pre-simuladas por punto de la grilla.

    returns (G, P, T, n), regimes (G, P, T + 1) y snaps (G, P, T): índice de la
    creencia de decisión en cada paso. La secuencia de creencias no depende de
    las acciones, por eso se precalcula.
    """

    grid: BeliefGrid
    returns: NDArray
    regimes: NDArray
    snaps: NDArray
    rf: NDArray

    @property
    def paths_per_belief(self) -> int:
        return self.returns.shape[1]

    @property
    def horizon(self) -> int:
        return self.returns.shape[2]

    def gross(self, belief_index: int) -> NDArray:
        """Factores brutos (P, T, n + 1) de las trayectorias del punto."""
        regimes = self.regimes[belief_index, :, :-1]
        return gross_returns(self.returns[belief_index], self.rf[regimes])


def _belief_snaps(model: RegimeModel, grid: BeliefGrid, belief: NDArray, returns: NDArray) -> NDArray:
    paths, horizon = returns.shape[:2]
    snaps = np.empty((paths, horizon), dtype=int)
    if paths == 0:
        return snaps
    beliefs = np.tile(np.asarray(belief, dtype=float), (paths, 1))
    stats = FilterStats()
    for s in range(horizon):
        snaps[:, s] = grid.snap(beliefs)
        beliefs = filter_step(model, beliefs, returns[:, s], stats)
    if stats.underflows:
        logger.warning(f"path pool: {stats.underflows} belief updates kept the prior")
    return snaps


def build_path_pool(
    model: RegimeModel,
    grid: BeliefGrid,
    paths_per_belief: int,
    horizon: int,
    seed: int,
    workers: int = 1,
) -> PathPool:
    """Simula el pool completo; el stream de cada punto depende solo de su índice."""

    def simulate(b: int) -> Tuple[NDArray, NDArray]:
        rng = make_rng(seed, Stream.POOL, b)
        start = draw_regimes(rng, np.tile(grid.points[b], (paths_per_belief, 1)))
        return simulate_paths(model, start, horizon, rng)

    sims = map_in_order(simulate, list(range(len(grid))), workers)
    returns = np.stack([s[0] for s in sims])
    regimes = np.stack([s[1] for s in sims])
    return pool_from_paths(model, grid, returns, regimes)


def pool_from_paths(model: RegimeModel, grid: BeliefGrid, returns: NDArray, regimes: NDArray) -> PathPool:
    """Reconstruye el pool (creencias incluidas) a partir de retornos y regímenes."""
    snaps = np.stack(
        [_belief_snaps(model, grid, grid.points[b], returns[b]) for b in range(len(grid))]
    )
    return PathPool(grid=grid, returns=returns, regimes=regimes.astype(int), snaps=snaps, rf=np.asarray(model.rf))


# ============================================================================
# ROLLOUT
# ============================================================================

def rollout(
    t: int,
    belief_index: int,
    action: NDArray,
    lookup: LookupTable,
    pool: PathPool,
    spec: UtilitySpec,
    path_ids: Sequence[int],
) -> float:
    """
    Recompensa media de tomar `action` en t y seguir la tabla hasta T.

    La riqueza parte en 1; una trayectoria en quiebra queda en el piso.

    Raises:
        ValueError: Si el pool está vacío.
    """
    if pool.paths_per_belief == 0:
        raise ValueError("rollout needs a non-empty path pool")
    gross = pool.gross(belief_index)
    horizon = lookup.horizon
    rewards = []
    for j in path_ids:
        wealth = 1.0
        alloc = np.asarray(action, dtype=float)
        for s in range(horizon - t):
            if s > 0:
                alloc = lookup.action(t + s, pool.snaps[belief_index, j, s])
            growth = float(alloc @ gross[j, s])
            if growth <= 0.0:
                wealth = BANKRUPTCY_FLOOR
                break
            wealth *= growth
        rewards.append(float(utility(spec, wealth)))
    return float(np.mean(rewards))


class RolloutCache:
    """
    Rollouts vectorizados para un nodo (t, b).

    La continuación C_j = prod_{s>=1} lookup[t+s](snap_j,s) . g_j,s no depende
    de la acción del nodo, así W_j(a) = (a . g_j,0) C_j.
    """

    def __init__(self, t: int, belief_index: int, lookup: LookupTable, pool: PathPool):
        if pool.paths_per_belief == 0:
            raise ValueError("rollout needs a non-empty path pool")
        lookup.require_complete(t + 1)
        gross = pool.gross(belief_index)
        self.first = gross[:, 0, :]
        paths = gross.shape[0]
        continuation = np.ones(paths)
        dead = np.zeros(paths, dtype=bool)
        for s in range(1, lookup.horizon - t):
            allocs = lookup.alloc[t + s, pool.snaps[belief_index, :, s]]
            growth = np.sum(allocs * gross[:, s, :], axis=1)
            dead |= growth <= 0.0
            continuation *= np.where(dead, 1.0, growth)
        self.continuation = continuation
        self.dead = dead

    @property
    def paths(self) -> int:
        return len(self.continuation)

    def terminal_wealth(self, action: NDArray, path_ids: NDArray) -> NDArray:
        growth = self.first[path_ids] @ action
        wealth = growth * self.continuation[path_ids]
        failed = (growth <= 0.0) | self.dead[path_ids]
        return np.where(failed, BANKRUPTCY_FLOOR, wealth)

    def terminal_wealth_many(self, actions: NDArray) -> NDArray:
        """Riqueza terminal de varias acciones sobre todo el pool, forma (P, k)."""
        growth = self.first @ np.asarray(actions, dtype=float).T
        wealth = growth * self.continuation[:, None]
        failed = (growth <= 0.0) | self.dead[:, None]
        return np.where(failed, BANKRUPTCY_FLOOR, wealth)


# ============================================================================
# BÚSQUEDA POR NODO
# ============================================================================

class SearchTree:
    """Raíz de la búsqueda de un nivel con la matriz kernel mantenida en línea."""

    def __init__(self, config: KernelConfig, capacity: int):
        self.config = config
        self.children: List[ActionNode] = []
        self.visits = 0
        self._kernel = np.zeros((capacity, capacity))

    @property
    def kernel(self) -> NDArray:
        c = len(self.children)
        return self._kernel[:c, :c]

    def add(self, node: ActionNode) -> ActionNode:
        c = len(self.children)
        if c >= self._kernel.shape[0]:
            grown = np.zeros((2 * c + 1, 2 * c + 1))
            grown[:c, :c] = self._kernel[:c, :c]
            self._kernel = grown
        if c:
            actions = np.array([child.action for child in self.children])
            row = rbf_kernel(actions, node.action, self.config.bandwidth)
            self._kernel[c, :c] = row
            self._kernel[:c, c] = row
        self._kernel[c, c] = 1.0
        node.parent = self
        self.children.append(node)
        return node

    def best_by_value(self) -> ActionNode:
        _, visits, means = _child_arrays(self.children)
        values, _ = _kr_scores(self.kernel, visits, means)
        return self.children[int(np.argmax(values))]

    def final_child(self, cache: "RolloutCache", spec: UtilitySpec) -> ActionNode:
        """
        Hijo elegido al cerrar la búsqueda.

        Entran los hijos con al menos `final_visit_fraction` de las visitas del
        más visitado; se comparan por utilidad media sobre todas las
        trayectorias del pool del nodo. Los empates van al primero.
        """
        _, visits, _ = _child_arrays(self.children)
        eligible = np.flatnonzero(visits >= self.config.final_visit_fraction * visits.max())
        actions = np.array([self.children[i].action for i in eligible])
        scores = np.mean(utility(spec, cache.terminal_wealth_many(actions)), axis=0)
        return self.children[int(eligible[int(np.argmax(scores))])]


def expand(
    tree: SearchTree,
    lookup: LookupTable,
    next_key: Tuple[int, int],
    constraints: Constraints,
    seed_action: Optional[NDArray] = None,
) -> Optional[ActionNode]:
    """
    Agrega un hijo a la raíz.

    El primer hijo es la acción de la tabla en `next_key` (o `seed_action`). Los
    siguientes son el candidato de menor densidad kernel entre los vecinos del
    mejor hijo con similitud > tau; retorna None si no queda ninguno.
    """
    config = tree.config
    if not tree.children:
        action = seed_action if seed_action is not None else lookup.action(*next_key)
        return tree.add(ActionNode(action=np.array(action, dtype=float)))

    best = tree.best_by_value()
    candidates = generate_candidates(best.action, config.deviations, constraints)
    existing = np.array([c.action for c in tree.children])
    kept = []
    for cand in candidates:
        if rbf_kernel(best.action, cand, config.bandwidth) <= config.tau:
            continue
        if np.any(np.all(np.abs(existing - cand) <= 1e-12, axis=1)):
            continue
        kept.append(cand)
    if not kept:
        return None

    kept_arr = np.array(kept)
    _, visits, _ = _child_arrays(tree.children)
    density = rbf_kernel(kept_arr[:, None, :], existing[None, :, :], config.bandwidth) @ visits
    return tree.add(ActionNode(action=kept_arr[int(np.argmin(density))]))


@dataclass
class NodeResult:
    action: NDArray
    children: int
    visits: int
    expansions_blocked: int


def solve_node(
    t: int,
    belief_index: int,
    lookup: LookupTable,
    pool: PathPool,
    config: KernelConfig,
    budget: int,
    spec: UtilitySpec,
    constraints: Constraints,
    rng: np.random.Generator,
    batch_paths: int = 5,
    seed_action: Optional[NDArray] = None,
) -> NodeResult:
    """
    Corre `budget` iteraciones de KR-UCT en el nodo (t, b).

    Cada iteración evalúa `batch_paths` trayectorias del pool elegidas al azar y
    retroalimenta la recompensa media. La acción final sale de
    `SearchTree.final_child`.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    cache = RolloutCache(t, belief_index, lookup, pool)
    capacity = int(config.widen_intercept + config.widen_slope * budget) + 2
    tree = SearchTree(config, capacity)
    blocked = 0

    for _ in range(budget):
        node = None
        if can_widen(len(tree.children), tree.visits, config):
            node = expand(tree, lookup, (t + 1, belief_index), constraints, seed_action)
            if node is None:
                blocked += 1
        if node is None:
            node = kr_uct_select(tree.children, config, tree.kernel)
        ids = rng.integers(0, cache.paths, size=batch_paths)
        reward = float(np.mean(utility(spec, cache.terminal_wealth(node.action, ids))))
        node.update(reward)
        tree.visits += 1

    chosen = tree.final_child(cache, spec)
    return NodeResult(action=chosen.action.copy(), children=len(tree.children), visits=tree.visits, expansions_blocked=blocked)


def myopic_seed(
    belief_index: int,
    pool: PathPool,
    spec: UtilitySpec,
    constraints: Constraints,
    search: SearchOptions,
) -> NDArray:
    """Acción de un período que maximiza la utilidad media sobre todo el pool."""
    first = pool.gross(belief_index)[:, 0, :]

    def objective(allocs: NDArray) -> NDArray:
        wealth = np.maximum(first @ allocs.T, BANKRUPTCY_FLOOR)
        return np.mean(utility(spec, wealth), axis=0)

    return optimize_action(objective, first.shape[1], constraints, search).alloc


def build_lookup(
    model: RegimeModel,
    horizon: int,
    constraints: Constraints,
    spec: UtilitySpec,
    options: LMCTSOptions,
    pool: Optional[PathPool] = None,
    initial_wealth: float = 1.0,
) -> LookupTable:
    """
    Construye la tabla hacia atrás, de t = T - 1 a 0.

    En T - 1 el primer hijo de cada nodo es el óptimo miope; en los demás es la
    acción ya resuelta para (t + 1, misma creencia).
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    grid = BeliefGrid(model.n_regimes, options.belief_step)
    if pool is None:
        pool = build_path_pool(model, grid, options.pool_paths, horizon, options.seed, options.workers)
    if pool.horizon < horizon:
        raise ValueError(f"path pool covers {pool.horizon} steps, need {horizon}")
    scaled = spec.scaled(initial_wealth)
    lookup = LookupTable.empty(grid, horizon, model.n_weights)

    logger.info(
        f"LMCTS: horizon={horizon}, grid={len(grid)} beliefs, iterations={options.iterations}, "
        f"pool={pool.paths_per_belief} paths/belief"
    )
    for t in reversed(range(horizon)):

        def solve_point(b: int) -> NodeResult:
            seed_action = None
            if t == horizon - 1:
                seed_action = myopic_seed(b, pool, scaled, constraints, options.search)
            return solve_node(
                t, b, lookup, pool, options.kernel, options.iterations, scaled, constraints,
                make_rng(options.seed, Stream.LMCTS, t, b), options.batch_paths, seed_action,
            )

        results = map_in_order(solve_point, list(range(len(grid))), options.workers)
        for b, result in enumerate(results):
            lookup.set(t, b, result.action)
        blocked = sum(r.expansions_blocked for r in results)
        if blocked:
            lookup.diagnostics.append(f"t={t}: {blocked} expansions found no candidate")
        logger.debug(f"LMCTS stage t={t}: mean children {np.mean([r.children for r in results]):.1f}")
    logger.info(f"LMCTS: table complete with {len(lookup)} entries")
    return lookup


# ============================================================================
# SUAVIZADO
# ============================================================================

def savitzky_golay(series: NDArray, window: int, order: int) -> NDArray:
    """
    Suavizado por mínimos cuadrados locales.

    En los bordes se usa la ventana truncada disponible con un ajuste
    asimétrico de grado min(order, largo - 1).

    Raises:
        ValueError: Ventana par o no positiva, u orden >= ventana.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if order < 0 or order >= window:
        raise ValueError(f"order must lie in [0, window), got order={order}, window={window}")
    values = np.asarray(series, dtype=float)
    n = len(values)
    half = window // 2
    interior = savgol_coeffs(window, order, use="dot")
    out = np.empty(n)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        length = hi - lo
        if length == window:
            coeffs = interior
        elif length == 1:
            out[i] = values[i]
            continue
        else:
            coeffs = savgol_coeffs(length, min(order, length - 1), pos=i - lo, use="dot")
        out[i] = coeffs @ values[lo:hi]
    return out


def smooth_lookup(lookup: LookupTable, window: int, order: int, constraints: Constraints) -> LookupTable:
    """
    Suaviza cada entrada de la tabla a lo largo de t, por punto de la grilla.

    Luego se recorta a las cotas y se renormaliza el presupuesto; si el
    resultado no es factible se conserva la asignación original.
    """
    lookup.require_complete()
    horizon, g, d = lookup.alloc.shape
    lower, upper = constraints.bounds(d - 1)
    smoothed = np.empty_like(lookup.alloc)
    for b in range(g):
        for j in range(d):
            smoothed[:, b, j] = savitzky_golay(lookup.alloc[:, b, j], window, order)

    clipped = np.clip(smoothed, lower, upper)
    totals = clipped.sum(axis=2, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        renormalized = clipped / totals
    ok = (np.abs(totals[..., 0]) > 1e-12) & constraints.is_feasible(renormalized)
    result = np.where(ok[..., None], renormalized, lookup.alloc)

    fallbacks = int((~ok).sum())
    diagnostics = list(lookup.diagnostics)
    if fallbacks:
        diagnostics.append(f"smoothing kept {fallbacks} original entries")
        logger.warning(f"smoothing kept {fallbacks} original entries to stay feasible")
    return LookupTable(grid=lookup.grid, alloc=result, solved=lookup.solved.copy(), diagnostics=diagnostics, smoothed=True)
