#!/usr/bin/env python3
"""
Programación dinámica hacia atrás sobre una grilla de creencias.

Bajo utilidad CRRA el valor es homogéneo en la riqueza, V_t(W, p) = W^gamma
V_t(1, p), de modo que basta resolver con riqueza unitaria. Cada etapa estima
E[g^gamma V_{t+1}(1, p')] por Monte Carlo con números aleatorios comunes para
todas las acciones candidatas de un mismo punto de la grilla.
"""

import logging
from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from market_core import (
    BANKRUPTCY_FLOOR,
    Constraints,
    RegimeModel,
    SolverError,
    Stream,
    UtilitySpec,
    draw_regimes,
    filter_step,
    gross_returns,
    make_rng,
    sample_returns,
    short_magnitude,
    utility,
)
from settings import map_in_order

logger = logging.getLogger(__name__)

PENALTY_MULTIPLIER = 10.0
OBJECTIVE_CHUNK = 2048


# ============================================================================
# GRILLA DE CREENCIAS
# ============================================================================

def _compositions(total: int, parts: int) -> Iterator[Tuple[int, ...]]:
    """Composiciones débiles de `total` en `parts` partes, orden lexicográfico."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass(frozen=True, eq=False)
class BeliefGrid:
    """
    Retícula del símplex de creencias con paso uniforme.

    Los puntos se ordenan lexicográficamente por (p_0, p_1, ...) ascendente; con
    dos regímenes y paso 0.05 son 21 puntos de (0, 1) a (1, 0).
    """

    n_regimes: int
    step: float = 0.05
    points: NDArray = field(init=False, repr=False)
    lattice: NDArray = field(init=False, repr=False)
    _index: NDArray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_regimes < 1:
            raise ValueError(f"n_regimes must be >= 1, got {self.n_regimes}")
        if not 0.0 < self.step <= 1.0:
            raise ValueError(f"belief step must lie in (0, 1], got {self.step}")
        resolution = int(round(1.0 / self.step))
        if abs(resolution * self.step - 1.0) > 1e-9:
            raise ValueError(f"belief step {self.step} does not divide 1")

        lattice = np.array(list(_compositions(resolution, self.n_regimes)), dtype=int)
        index = np.full((resolution + 1,) * (self.n_regimes - 1), -1, dtype=int)
        if self.n_regimes > 1:
            cumulative = np.cumsum(lattice[:, :-1], axis=1)
            index[tuple(cumulative.T)] = np.arange(len(lattice))
        points = lattice / resolution
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "_index", index)

    @property
    def resolution(self) -> int:
        return int(round(1.0 / self.step))

    def __len__(self) -> int:
        return len(self.points)

    def snap(self, beliefs: NDArray, chunk: int = 4096) -> NDArray:
        """Índice del punto más cercano (distancia euclídea, empates al menor índice)."""
        beliefs = np.asarray(beliefs, dtype=float)
        lead = beliefs.shape[:-1]
        flat = beliefs.reshape(-1, self.n_regimes)
        out = np.empty(len(flat), dtype=int)
        for start in range(0, len(flat), chunk):
            block = flat[start:start + chunk]
            dist = np.sum((block[:, None, :] - self.points[None, :, :]) ** 2, axis=-1)
            out[start:start + chunk] = np.argmin(dist, axis=1)
        return out.reshape(lead)

    def interpolation_weights(self, beliefs: NDArray) -> Tuple[NDArray, NDArray]:
        """
        Vértices y pesos baricéntricos del símplice que contiene cada creencia.

        Triangulación de Freudenthal en coordenadas acumuladas
        y_i = M (p_0 + ... + p_i). Exacta en los nodos y lineal en los bordes.

        Returns:
            (índices (m, K), pesos (m, K))
        """
        flat = np.asarray(beliefs, dtype=float).reshape(-1, self.n_regimes)
        m, k = flat.shape
        if k == 1:
            return np.zeros((m, 1), dtype=int), np.ones((m, 1))

        res = self.resolution
        y = np.clip(np.cumsum(flat[:, :-1], axis=1) * res, 0.0, res)
        y = np.maximum.accumulate(y, axis=1)
        base = np.minimum(np.floor(y), res).astype(int)
        frac = y - base

        # fracción descendente; empates al índice de coordenada mayor
        order = (k - 2) - np.argsort(-frac[:, ::-1], axis=1, kind="stable")
        sorted_frac = np.take_along_axis(frac, order, axis=1)

        weights = np.empty((m, k))
        weights[:, 0] = 1.0 - sorted_frac[:, 0]
        weights[:, 1:-1] = sorted_frac[:, :-1] - sorted_frac[:, 1:]
        weights[:, -1] = sorted_frac[:, -1]

        one_hot = np.zeros((m, k - 1, k - 1), dtype=int)
        np.put_along_axis(one_hot, order[:, :, None], 1, axis=2)
        vertices = np.repeat(base[:, None, :], k, axis=1)
        vertices[:, 1:, :] += np.cumsum(one_hot, axis=1)
        vertices = np.minimum(vertices, res)

        idx = self._index[tuple(np.moveaxis(vertices, -1, 0))]
        idx = np.where(weights > 0.0, idx, idx[:, :1])
        if np.any(idx < 0):
            raise SolverError("dp", "interpolation", "belief outside the grid simplex")
        return idx, weights

    def interpolate(self, values: NDArray, beliefs: NDArray) -> NDArray:
        """Interpola valores nodales (G,) en creencias arbitrarias."""
        beliefs = np.asarray(beliefs, dtype=float)
        idx, weights = self.interpolation_weights(beliefs)
        out = np.sum(np.asarray(values)[idx] * weights, axis=1)
        return out.reshape(beliefs.shape[:-1])


# ============================================================================
# TABLA DE POLÍTICA
# ============================================================================

@dataclass
class PolicyTable:
    """
    Asignación y valor por (t, punto de la grilla).

    alloc tiene forma (T, G, n + 1); value tiene forma (T + 1, G) con
    value[T] = U(1).
    """

    grid: BeliefGrid
    alloc: NDArray
    value: NDArray
    utility: UtilitySpec
    penalty: float = 0.0
    diagnostics: List[str] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.alloc.shape[0]

    @property
    def n_weights(self) -> int:
        return self.alloc.shape[2]

    def allocation(self, t: int, beliefs: NDArray) -> NDArray:
        return self.alloc[t, self.grid.snap(beliefs)]


# ============================================================================
# BÚSQUEDA DE ACCIONES
# ============================================================================

@dataclass(frozen=True)
class SearchOptions:
    """Búsqueda de la mejor asignación: retícula gruesa y refinamiento por pares."""

    action_step: float = 0.05
    refine_step: Optional[float] = 0.01
    max_grid_actions: int = 20000
    max_refine_iters: int = 200

    def __post_init__(self):
        if not 0.0 < self.action_step <= 1.0:
            raise ValueError(f"action_step must lie in (0, 1], got {self.action_step}")
        if self.refine_step is not None and not 0.0 < self.refine_step <= self.action_step:
            raise ValueError("refine_step must lie in (0, action_step]")
        if self.max_refine_iters < 1:
            raise ValueError("max_refine_iters must be >= 1")


@dataclass
class SearchResult:
    alloc: NDArray
    value: float
    converged: bool = True


def _count_bounded(total: int, lows: NDArray, highs: NDArray) -> float:
    """Número de vectores enteros en la caja [lows, highs] que suman `total`."""
    target = total - int(lows.sum())
    if target < 0:
        return 0.0
    counts = np.zeros(1)
    counts[0] = 1.0
    for lo, hi in zip(lows, highs):
        counts = np.convolve(counts, np.ones(int(hi - lo) + 1))
    return float(counts[target]) if target < len(counts) else 0.0


def _enumerate_bounded(total: int, lows: Sequence[int], highs: Sequence[int]) -> Iterator[Tuple[int, ...]]:
    if len(lows) == 1:
        if lows[0] <= total <= highs[0]:
            yield (total,)
        return
    rest_low = sum(lows[1:])
    rest_high = sum(highs[1:])
    for first in range(lows[0], highs[0] + 1):
        remaining = total - first
        if rest_low <= remaining <= rest_high:
            for rest in _enumerate_bounded(remaining, lows[1:], highs[1:]):
                yield (first,) + rest


def action_lattice(n_weights: int, step: float, constraints: Constraints, cap: int) -> Optional[NDArray]:
    """
    Todas las asignaciones factibles con entradas múltiplos de `step`.

    Returns:
        Matriz (A, n + 1), o None si hay más de `cap` acciones.
    """
    resolution = int(round(1.0 / step))
    lower, upper = constraints.bounds(n_weights - 1)
    lows = np.ceil(lower * resolution - 1e-9).astype(int)
    highs = np.floor(upper * resolution + 1e-9).astype(int)
    if _count_bounded(resolution, lows, highs) > cap:
        return None
    actions = np.array(list(_enumerate_bounded(resolution, list(lows), list(highs))), dtype=float)
    if actions.size == 0:
        raise SolverError("search", "lattice", "no feasible allocation on the action grid")
    return actions / resolution


def _evaluate_chunked(objective: Callable[[NDArray], NDArray], actions: NDArray) -> NDArray:
    return np.concatenate(
        [objective(actions[i:i + OBJECTIVE_CHUNK]) for i in range(0, len(actions), OBJECTIVE_CHUNK)]
    )


def hill_climb(
    objective: Callable[[NDArray], NDArray],
    start: NDArray,
    step: float,
    constraints: Constraints,
    max_iters: int,
) -> SearchResult:
    """
    Ascenso por transferencias de `step` entre pares de entradas.

    Cada movimiento conserva el presupuesto; se toma el mejor vecino mientras
    mejore estrictamente.
    """
    d = len(start)
    lower, upper = constraints.bounds(d - 1)
    pairs = np.array(list(permutations(range(d), 2)), dtype=int).reshape(-1, 2)
    current = np.asarray(start, dtype=float).copy()
    value = float(objective(current[None, :])[0])
    if len(pairs) == 0:
        return SearchResult(current, value, True)

    rows = np.arange(len(pairs))
    for _ in range(max_iters):
        candidates = np.repeat(current[None, :], len(pairs), axis=0)
        candidates[rows, pairs[:, 0]] += step
        candidates[rows, pairs[:, 1]] -= step
        ok = np.all((candidates >= lower - 1e-12) & (candidates <= upper + 1e-12), axis=1)
        if not ok.any():
            return SearchResult(current, value, True)
        feasible = candidates[ok]
        values = objective(feasible)
        best = int(np.argmax(values))
        if values[best] <= value:
            return SearchResult(current, value, True)
        current = feasible[best]
        value = float(values[best])
    return SearchResult(current, value, False)


def optimize_action(
    objective: Callable[[NDArray], NDArray],
    n_weights: int,
    constraints: Constraints,
    options: SearchOptions,
    warm_start: Optional[NDArray] = None,
) -> SearchResult:
    """
    Maximiza un objetivo vectorizado sobre el conjunto factible.

    Si la retícula gruesa cabe en `max_grid_actions` se recorre completa; si no,
    se asciende desde el mejor punto de partida (caja, pesos iguales, arranque
    en caliente). Luego se refina con el paso fino.
    """
    lattice = action_lattice(n_weights, options.action_step, constraints, options.max_grid_actions)
    if lattice is not None:
        values = _evaluate_chunked(objective, lattice)
        best_idx = int(np.argmax(values))
        result = SearchResult(lattice[best_idx].copy(), float(values[best_idx]), True)
    else:
        cash = np.zeros(n_weights)
        cash[-1] = 1.0
        starts = [cash, np.full(n_weights, 1.0 / n_weights)]
        if warm_start is not None:
            starts.append(np.asarray(warm_start, dtype=float))
        starts = [s for s in starts if constraints.is_feasible(s)]
        if not starts:
            raise SolverError("search", "start", "no feasible starting allocation")
        start_values = objective(np.array(starts))
        start = starts[int(np.argmax(start_values))]
        result = hill_climb(objective, start, options.action_step, constraints, options.max_refine_iters)

    if options.refine_step is not None and options.refine_step < options.action_step:
        refined = hill_climb(objective, result.alloc, options.refine_step, constraints, options.max_refine_iters)
        refined.converged = refined.converged and result.converged
        result = refined
    return result


# ============================================================================
# ETAPA DE MONTE CARLO
# ============================================================================

@dataclass(frozen=True)
class DPOptions:
    """Parámetros del solver de programación dinámica."""

    belief_step: float = 0.05
    mc_paths: int = 2000
    antithetic: bool = True
    search: SearchOptions = SearchOptions()
    penalty: float = 0.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.mc_paths < 1:
            raise ValueError(f"mc_paths must be >= 1, got {self.mc_paths}")
        if self.penalty < 0.0:
            raise ValueError(f"penalty must be >= 0, got {self.penalty}")


@dataclass
class StageSamples:
    """Factores brutos (mc, n + 1) y valor de continuación (mc,) de un punto."""

    gross: NDArray
    continuation: NDArray


def default_penalty(spec: UtilitySpec) -> float:
    """Penalización por venta corta: 10 |U(1)| (al menos 10)."""
    return PENALTY_MULTIPLIER * max(abs(float(utility(spec, 1.0))), 1.0)


def stage_rng(seed: int, belief_index: int) -> np.random.Generator:
    """Stream de una etapa; no depende de t, así todas las etapas comparten muestras."""
    return make_rng(seed, Stream.DP, belief_index)


def sample_stage(
    model: RegimeModel,
    belief: NDArray,
    value_next: Callable[[NDArray], NDArray],
    mc: int,
    rng: np.random.Generator,
    antithetic: bool = True,
) -> StageSamples:
    """
    Muestras de un período desde la creencia `belief`.

    Los retornos no dependen de la acción, así que se generan una sola vez y se
    reutilizan para todas las candidatas. Los pares antitéticos comparten el
    régimen.
    """
    belief = np.asarray(belief, dtype=float)
    draws = (mc + 1) // 2 if antithetic else mc
    regimes = draw_regimes(rng, np.tile(belief, (draws, 1)))
    z = rng.standard_normal((draws, model.n_risky))
    if antithetic:
        regimes = np.concatenate([regimes, regimes])[:mc]
        z = np.concatenate([z, -z])[:mc]

    returns = sample_returns(model, regimes, z)
    gross = gross_returns(returns, model.rf[regimes])
    posterior = filter_step(model, belief, returns)
    return StageSamples(gross=gross, continuation=np.asarray(value_next(posterior), dtype=float))


def expected_values(samples: StageSamples, allocs: NDArray, spec: UtilitySpec) -> NDArray:
    """E[g^gamma V_next] (o E[log g + h_next] con utilidad log) por acción."""
    growth = np.maximum(samples.gross @ np.atleast_2d(allocs).T, BANKRUPTCY_FLOOR)
    cont = samples.continuation[:, None]
    if spec.is_log:
        return np.mean(np.log(growth) + cont, axis=0)
    return np.mean(growth ** spec.gamma * cont, axis=0)


def evaluate_action(
    model: RegimeModel,
    belief: NDArray,
    alloc: NDArray,
    value_next: Callable[[NDArray], NDArray],
    mc: int,
    rng: np.random.Generator,
    spec: UtilitySpec,
    antithetic: bool = True,
) -> float:
    """Estimación de Monte Carlo del valor de elegir `alloc` desde `belief`."""
    samples = sample_stage(model, belief, value_next, mc, rng, antithetic)
    return float(expected_values(samples, np.asarray(alloc, dtype=float), spec)[0])


def solve_stage(
    model: RegimeModel,
    grid: BeliefGrid,
    value_next: NDArray,
    constraints: Constraints,
    spec: UtilitySpec,
    options: DPOptions,
    warm: Optional[NDArray] = None,
) -> Tuple[NDArray, NDArray, List[int]]:
    """
    Resuelve una etapa para todos los puntos de la grilla.

    El valor guardado es la esperanza sin penalizar de la acción elegida.

    Returns:
        (alloc (G, n + 1), value (G,), índices cuyo refinamiento no convergió)
    """
    d = model.n_weights

    def continuation(posterior: NDArray) -> NDArray:
        return grid.interpolate(value_next, posterior)

    def solve_point(b: int) -> Tuple[NDArray, float, bool]:
        samples = sample_stage(
            model, grid.points[b], continuation, options.mc_paths, stage_rng(options.seed, b), options.antithetic
        )

        def objective(allocs: NDArray) -> NDArray:
            values = expected_values(samples, allocs, spec)
            if options.penalty > 0.0:
                values = values - options.penalty * short_magnitude(allocs)
            return values

        result = optimize_action(objective, d, constraints, options.search, None if warm is None else warm[b])
        value = float(expected_values(samples, result.alloc, spec)[0])
        return result.alloc, value, result.converged

    results = map_in_order(solve_point, list(range(len(grid))), options.workers)
    alloc = np.array([r[0] for r in results])
    value = np.array([r[1] for r in results])
    unconverged = [b for b, r in enumerate(results) if not r[2]]
    return alloc, value, unconverged


def solve(
    model: RegimeModel,
    horizon: int,
    constraints: Constraints,
    spec: UtilitySpec,
    options: DPOptions,
) -> PolicyTable:
    """
    Inducción hacia atrás completa.

    Raises:
        ValueError: Horizonte inválido o utilidad no homogénea.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not spec.is_homogeneous:
        raise ValueError(f"dynamic programming needs a CRRA or log utility, got {spec.kind!r}")

    grid = BeliefGrid(model.n_regimes, options.belief_step)
    g = len(grid)
    value = np.empty((horizon + 1, g))
    value[horizon] = float(utility(spec, 1.0))
    alloc = np.empty((horizon, g, model.n_weights))
    diagnostics: List[str] = []

    logger.info(
        f"DP: horizon={horizon}, grid={g} beliefs, mc={options.mc_paths}, "
        f"shorting={'on' if constraints.allow_short else 'off'}, penalty={options.penalty:g}"
    )
    warm = None
    for t in reversed(range(horizon)):
        alloc[t], value[t], unconverged = solve_stage(model, grid, value[t + 1], constraints, spec, options, warm)
        warm = alloc[t]
        for b in unconverged:
            diagnostics.append(f"t={t} belief={b}: refinement stopped at max_refine_iters")
        logger.debug(f"DP stage t={t} done")
    if diagnostics:
        logger.warning(f"DP: {len(diagnostics)} grid points hit the refinement cap")
    logger.info(f"DP: V_0 range [{value[0].min():.6g}, {value[0].max():.6g}]")
    return PolicyTable(grid=grid, alloc=alloc, value=value, utility=spec, penalty=options.penalty, diagnostics=diagnostics)
