#!/usr/bin/env python3
"""
Núcleo de mercado compartido por los tres solvers.

Contiene:
- RegimeModel: retornos gaussianos condicionados a un régimen oculto markoviano
- Filtro de creencias (Bayes + predicción por la matriz de transición)
- Contabilidad de riqueza: crecimiento, deriva de pesos, costos proporcionales
- Utilidades CRRA / logarítmica / de meta y su versión suavizada
- Semillas por stream para reproducibilidad

Convención: una asignación tiene n_risky + 1 entradas y la última es caja.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import linalg
from scipy.special import expit
from scipy.stats import multivariate_normal

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12
BUDGET_TOL = 1e-9
PSD_TOL = 1e-10
# Piso de riqueza relativo a W0 para trayectorias en quiebra
BANKRUPTCY_FLOOR = 1e-6

UTILITY_KINDS = ("crra", "log", "goal", "smoothed_goal")
DEFAULT_STEEPNESS = 0.01


class ModelValidationError(ValueError):
    """Parámetros de modelo inválidos; `field` apunta al campo culpable."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


class SolverError(RuntimeError):
    """Fallo no recuperable dentro de un solver."""

    def __init__(self, method: str, stage: str, message: str):
        self.method = method
        self.stage = stage
        super().__init__(f"[{method}] {stage}: {message}")


class Stream(IntEnum):
    """Streams de números aleatorios; los de solución y evaluación no se cruzan."""

    DP = 1
    POOL = 2
    LMCTS = 3
    NN_TRAIN = 4
    NN_VALID = 5
    EVAL = 6
    CALIBRATION = 7


SOLVER_STREAMS = frozenset({Stream.DP, Stream.POOL, Stream.LMCTS, Stream.NN_TRAIN, Stream.NN_VALID})
EVALUATION_STREAMS = frozenset({Stream.EVAL})


def make_rng(seed: int, stream: Stream, *keys: int) -> np.random.Generator:
    """Generador determinista para (semilla de corrida, stream, claves de tarea)."""
    return np.random.default_rng([int(seed), int(stream), *(int(k) for k in keys)])


def assert_disjoint_streams(solver: Iterable[Stream], evaluation: Iterable[Stream]) -> None:
    """Falla si algún stream de evaluación también se usa para resolver."""
    overlap = set(solver) & set(evaluation)
    if overlap:
        names = ", ".join(sorted(s.name for s in overlap))
        raise SolverError("streams", "setup", f"evaluation reuses solver streams: {names}")


# ============================================================================
# MODELO
# ============================================================================

def repair_covariance(cov: NDArray, field_path: str = "cov", tol: float = PSD_TOL) -> Tuple[NDArray, NDArray]:
    """
    Valida una matriz de covarianza y retorna (covarianza reparada, factor).

    Autovalores negativos por debajo de -tol se rechazan; los negativos
    diminutos se llevan a cero. El factor L cumple L @ L.T == covarianza.

    Raises:
        ModelValidationError: Si la matriz no es simétrica o no es PSD.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ModelValidationError(field_path, f"expected a square matrix, got shape {cov.shape}")
    if cov.size == 0:
        return cov.copy(), cov.copy()
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - cov.T)) > 1e-10 * scale:
        raise ModelValidationError(field_path, "matrix is not symmetric")

    eigvals, eigvecs = linalg.eigh((cov + cov.T) / 2.0)
    smallest = float(eigvals.min())
    if smallest < -tol:
        raise ModelValidationError(field_path, f"not positive semidefinite (eigenvalue {smallest:.3e})")

    floored = np.clip(eigvals, 0.0, None)
    factor = eigvecs * np.sqrt(floored)
    if smallest < 0.0:
        logger.warning(f"{field_path}: flooring eigenvalue {smallest:.3e} to zero")
        return factor @ factor.T, factor
    return cov.copy(), factor


@dataclass(frozen=True, eq=False)
class RegimeModel:
    """
    Modelo de retornos con régimen oculto.

    Attributes:
        mu: Medias por régimen, forma (K, n)
        sigma: Covarianzas por régimen, forma (K, n, n)
        trans: Matriz de transición fila-estocástica (K, K)
        rf: Tasa libre de riesgo por régimen (K,)
        asset_names: Nombres de los activos riesgosos
    """

    mu: NDArray
    sigma: NDArray
    trans: NDArray
    rf: NDArray
    asset_names: Tuple[str, ...] = ()
    factors: NDArray = field(init=False, repr=False)
    _densities: tuple = field(init=False, repr=False)

    def __post_init__(self):
        trans = np.array(self.trans, dtype=float)
        if trans.ndim != 2 or trans.shape[0] != trans.shape[1] or trans.shape[0] == 0:
            raise ModelValidationError("trans", f"expected a square matrix, got shape {trans.shape}")
        k = trans.shape[0]
        if np.any(trans < 0.0):
            row = int(np.argwhere(trans < 0.0)[0][0])
            raise ModelValidationError(f"trans[{row}]", "negative transition probability")
        row_sums = trans.sum(axis=1)
        for row, total in enumerate(row_sums):
            if abs(total - 1.0) > SIMPLEX_TOL:
                raise ModelValidationError(f"trans[{row}]", f"row sums to {total:.12g}, expected 1")

        mu = np.array(self.mu, dtype=float)
        if mu.ndim == 1 and k == 1:
            mu = mu[None, :]
        if mu.ndim != 2 or mu.shape[0] != k:
            raise ModelValidationError("mu", f"expected shape ({k}, n), got {mu.shape}")
        n = mu.shape[1]

        sigma = np.array(self.sigma, dtype=float)
        if n == 0:
            sigma = np.zeros((k, 0, 0))
        if sigma.shape != (k, n, n):
            raise ModelValidationError("cov", f"expected shape ({k}, {n}, {n}), got {sigma.shape}")

        rf = np.broadcast_to(np.asarray(self.rf, dtype=float), (k,)).copy()
        if np.any(rf <= -1.0):
            raise ModelValidationError("rf", "risk-free rate must exceed -1")

        names = tuple(self.asset_names) if self.asset_names else tuple(f"asset_{i}" for i in range(n))
        if len(names) != n:
            raise ModelValidationError("assets", f"{len(names)} names for {n} risky assets")

        repaired = []
        factors = []
        for regime in range(k):
            cov_k, factor_k = repair_covariance(sigma[regime], f"cov[{regime}]")
            repaired.append(cov_k)
            factors.append(factor_k)
        sigma = np.stack(repaired) if n else sigma
        factor_arr = np.stack(factors) if n else np.zeros((k, 0, 0))

        densities = tuple(
            multivariate_normal(mean=mu[regime], cov=sigma[regime], allow_singular=True) for regime in range(k)
        ) if n else ()

        for name, value in (("mu", mu), ("sigma", sigma), ("trans", trans), ("rf", rf)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        factor_arr.setflags(write=False)
        object.__setattr__(self, "asset_names", names)
        object.__setattr__(self, "factors", factor_arr)
        object.__setattr__(self, "_densities", densities)

    @property
    def n_regimes(self) -> int:
        return self.trans.shape[0]

    @property
    def n_risky(self) -> int:
        return self.mu.shape[1]

    @property
    def n_weights(self) -> int:
        return self.n_risky + 1

    def cash_allocation(self) -> NDArray:
        alloc = np.zeros(self.n_weights)
        alloc[-1] = 1.0
        return alloc


def check_belief(belief: NDArray, n_regimes: int) -> NDArray:
    """Valida una creencia (o lote de creencias) sobre el símplex."""
    belief = np.asarray(belief, dtype=float)
    if belief.shape[-1] != n_regimes:
        raise ModelValidationError("belief", f"expected {n_regimes} entries, got {belief.shape[-1]}")
    if np.any(belief < -SIMPLEX_TOL) or np.any(np.abs(belief.sum(axis=-1) - 1.0) > 1e-9):
        raise ModelValidationError("belief", "not a probability vector")
    return belief


def stationary_distribution(trans: NDArray, iterations: int = 2000) -> NDArray:
    """
    Distribución estacionaria de la cadena.

    Usa el promedio de Cesàro de las potencias aplicadas a la uniforme, que
    también converge para cadenas periódicas o reducibles.
    """
    trans = np.asarray(trans, dtype=float)
    k = trans.shape[0]
    current = np.full(k, 1.0 / k)
    total = np.zeros(k)
    for _ in range(iterations):
        total += current
        current = current @ trans
    dist = total / iterations
    return dist / dist.sum()


# ============================================================================
# SIMULACIÓN
# ============================================================================

def draw_regimes(rng: np.random.Generator, probs: NDArray) -> NDArray:
    """Muestrea un índice por fila de una matriz de probabilidades (m, K)."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_returns(model: RegimeModel, regimes: NDArray, z: NDArray) -> NDArray:
    """Retornos dado el régimen y shocks normales estándar z (m, n)."""
    return model.mu[regimes] + np.einsum("mij,mj->mi", model.factors[regimes], z)


def sample_step(model: RegimeModel, regime: int, rng: np.random.Generator) -> Tuple[NDArray, int]:
    """
    Un paso del proceso: retornos bajo el régimen actual y el régimen siguiente.

    Returns:
        (retornos (n,), siguiente régimen)
    """
    z = rng.standard_normal(model.n_risky)
    returns = model.mu[regime] + model.factors[regime] @ z
    next_regime = int(draw_regimes(rng, model.trans[regime][None, :])[0])
    return returns, next_regime


def simulate_paths(
    model: RegimeModel,
    initial_regimes: NDArray,
    horizon: int,
    rng: np.random.Generator,
) -> Tuple[NDArray, NDArray]:
    """
    Simula m trayectorias en paralelo.

    Returns:
        (returns (m, T, n), regimes (m, T + 1))
    """
    regimes = np.asarray(initial_regimes, dtype=int)
    m = regimes.shape[0]
    returns = np.empty((m, horizon, model.n_risky))
    path_regimes = np.empty((m, horizon + 1), dtype=int)
    path_regimes[:, 0] = regimes
    for t in range(horizon):
        z = rng.standard_normal((m, model.n_risky))
        returns[:, t] = sample_returns(model, regimes, z)
        regimes = draw_regimes(rng, model.trans[regimes])
        path_regimes[:, t + 1] = regimes
    return returns, path_regimes


# ============================================================================
# FILTRO DE CREENCIAS
# ============================================================================

@dataclass
class FilterStats:
    """Contador de actualizaciones degeneradas (verosimilitud nula)."""

    underflows: int = 0


def log_likelihoods(model: RegimeModel, returns: NDArray) -> NDArray:
    """Log-densidad de los retornos bajo cada régimen, forma (..., K)."""
    returns = np.asarray(returns, dtype=float)
    lead = returns.shape[:-1]
    if model.n_risky == 0:
        return np.zeros(lead + (model.n_regimes,))
    flat = returns.reshape(-1, model.n_risky)
    cols = [np.reshape(density.logpdf(flat), (-1,)) for density in model._densities]
    return np.stack(cols, axis=-1).reshape(lead + (model.n_regimes,))


def update_belief_from_likelihood(
    belief: NDArray,
    loglik: NDArray,
    stats: Optional[FilterStats] = None,
) -> NDArray:
    """
    Paso de Bayes en espacio logarítmico.

    Si todas las verosimilitudes se anulan en una fila, se conserva la
    creencia previa y se incrementa el contador de diagnóstico.
    """
    belief = np.asarray(belief, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_post = np.log(belief) + loglik
    peak = np.max(log_post, axis=-1, keepdims=True)
    degenerate = ~np.isfinite(peak[..., 0])
    safe_peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        post = np.exp(log_post - safe_peak)
    post = np.where(degenerate[..., None], belief, post)
    post = post / post.sum(axis=-1, keepdims=True)

    if stats is not None and np.any(degenerate):
        stats.underflows += int(np.count_nonzero(degenerate))
    return post


def update_belief(
    model: RegimeModel,
    belief: NDArray,
    returns: NDArray,
    stats: Optional[FilterStats] = None,
) -> NDArray:
    """Posterior sobre el régimen que generó los retornos observados."""
    return update_belief_from_likelihood(belief, log_likelihoods(model, returns), stats)


def predict_belief(model: RegimeModel, belief: NDArray) -> NDArray:
    """Propaga la creencia un período con la matriz de transición."""
    return np.asarray(belief, dtype=float) @ model.trans


def filter_step(
    model: RegimeModel,
    belief: NDArray,
    returns: NDArray,
    stats: Optional[FilterStats] = None,
) -> NDArray:
    """Creencia de decisión del período siguiente: actualizar y luego predecir."""
    return predict_belief(model, update_belief(model, belief, returns, stats))


# ============================================================================
# RIQUEZA Y COSTOS
# ============================================================================

def gross_returns(returns: NDArray, rf: NDArray) -> NDArray:
    """Factores brutos por activo incluida la caja, forma (..., n + 1)."""
    returns = np.asarray(returns, dtype=float)
    rf = np.asarray(rf, dtype=float)
    cash = np.broadcast_to(1.0 + rf, returns.shape[:-1])[..., None]
    return np.concatenate([1.0 + returns, cash], axis=-1)


def grow(
    wealth: NDArray,
    alloc: NDArray,
    returns: NDArray,
    rf: NDArray,
    floor: float = 0.0,
) -> Tuple[NDArray, NDArray, NDArray]:
    """
    Crecimiento de un período y deriva de los pesos.

    Trayectorias cuyo factor de crecimiento es <= 0 quedan en quiebra: su
    riqueza se fija en `floor` y sus pesos pasan a caja.

    Returns:
        (riqueza final, pesos derivados, máscara de quiebra)
    """
    alloc = np.asarray(alloc, dtype=float)
    gross = gross_returns(returns, rf)
    growth = np.sum(alloc * gross, axis=-1)
    bankrupt = growth <= 0.0
    safe_growth = np.where(bankrupt, 1.0, growth)
    drifted = alloc * gross / safe_growth[..., None]
    if np.any(bankrupt):
        cash = np.zeros(alloc.shape[-1])
        cash[-1] = 1.0
        drifted = np.where(bankrupt[..., None], cash, drifted)
    wealth_end = np.where(bankrupt, floor, np.asarray(wealth, dtype=float) * growth)
    return wealth_end, drifted, bankrupt


def turnover(drifted: NDArray, target: NDArray) -> NDArray:
    """Norma L1 del rebalanceo, caja incluida."""
    return np.sum(np.abs(np.asarray(target) - np.asarray(drifted)), axis=-1)


def rebalance(wealth_end: NDArray, drifted: NDArray, target: NDArray, cost_rate: float) -> NDArray:
    """Riqueza luego de pagar costos proporcionales al monto transado."""
    if cost_rate < 0.0:
        raise ValueError(f"cost_rate must be >= 0, got {cost_rate}")
    return np.asarray(wealth_end, dtype=float) / (1.0 + cost_rate * turnover(drifted, target))


# ============================================================================
# RESTRICCIONES
# ============================================================================

@dataclass(frozen=True)
class Constraints:
    """
    Restricciones de cartera.

    Sin venta corta todas las entradas están en [0, 1]; con venta corta en
    [-short_limit, short_limit]. `max_weight` acota por arriba cada activo
    riesgoso (no la caja).
    """

    allow_short: bool = False
    short_limit: float = 1.0
    max_weight: Optional[float] = None

    def __post_init__(self):
        if self.short_limit <= 0.0:
            raise ValueError(f"short_limit must be positive, got {self.short_limit}")
        if self.max_weight is not None and not 0.0 < self.max_weight <= self.short_limit:
            raise ValueError(f"max_weight must lie in (0, {self.short_limit}], got {self.max_weight}")

    def bounds(self, n_risky: int) -> Tuple[NDArray, NDArray]:
        """Cotas (inferior, superior) por entrada, forma (n + 1,)."""
        low = -self.short_limit if self.allow_short else 0.0
        high = self.short_limit if self.allow_short else 1.0
        lower = np.full(n_risky + 1, low)
        upper = np.full(n_risky + 1, high)
        if self.max_weight is not None:
            upper[:n_risky] = np.minimum(upper[:n_risky], self.max_weight)
        return lower, upper

    def is_feasible(self, alloc: NDArray, tol: float = BUDGET_TOL) -> NDArray:
        alloc = np.asarray(alloc, dtype=float)
        lower, upper = self.bounds(alloc.shape[-1] - 1)
        in_box = np.all((alloc >= lower - tol) & (alloc <= upper + tol), axis=-1)
        return in_box & (np.abs(alloc.sum(axis=-1) - 1.0) <= tol)


def short_magnitude(alloc: NDArray) -> NDArray:
    """Suma de las posiciones negativas en valor absoluto, caja incluida."""
    return np.sum(np.clip(-np.asarray(alloc, dtype=float), 0.0, None), axis=-1)


# ============================================================================
# UTILIDAD
# ============================================================================

@dataclass(frozen=True)
class UtilitySpec:
    """
    Preferencia sobre la riqueza terminal.

    kind: crra (W^gamma / gamma; gamma = 0 equivale a log), log, goal
    (indicador W >= goal) o smoothed_goal (logística con pendiente steepness).
    """

    kind: str = "crra"
    gamma: float = -1.0
    goal: float = 0.0
    steepness: float = DEFAULT_STEEPNESS

    def __post_init__(self):
        if self.kind not in UTILITY_KINDS:
            raise ValueError(f"unknown utility kind {self.kind!r}; expected one of {UTILITY_KINDS}")
        if self.kind == "crra" and self.gamma >= 1.0:
            raise ValueError(f"gamma must be < 1, got {self.gamma}")
        if self.kind in ("goal", "smoothed_goal") and self.goal <= 0.0:
            raise ValueError("goal utilities need a positive goal")
        if self.steepness <= 0.0:
            raise ValueError(f"steepness must be positive, got {self.steepness}")

    @property
    def is_log(self) -> bool:
        return self.kind == "log" or (self.kind == "crra" and self.gamma == 0.0)

    @property
    def is_homogeneous(self) -> bool:
        return self.kind in ("crra", "log")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.is_log else self.gamma

    def scaled(self, initial_wealth: float) -> "UtilitySpec":
        """Misma preferencia expresada sobre riqueza normalizada W / W0."""
        if self.kind in ("goal", "smoothed_goal"):
            return UtilitySpec(
                kind=self.kind,
                gamma=self.gamma,
                goal=self.goal / initial_wealth,
                steepness=self.steepness * initial_wealth,
            )
        return self

    def smoothed(self) -> "UtilitySpec":
        """Versión diferenciable (solo cambia las utilidades de meta)."""
        if self.kind == "goal":
            return UtilitySpec(kind="smoothed_goal", gamma=self.gamma, goal=self.goal, steepness=self.steepness)
        return self


def utility(spec: UtilitySpec, wealth: NDArray) -> NDArray:
    """
    Evalúa la utilidad.

    Raises:
        ValueError: Riqueza no positiva bajo CRRA o log.
    """
    wealth = np.asarray(wealth, dtype=float)
    if spec.is_homogeneous:
        if np.any(wealth <= 0.0):
            raise ValueError("CRRA utility is undefined for non-positive wealth")
        if spec.is_log:
            return np.log(wealth)
        return wealth ** spec.gamma / spec.gamma
    if spec.kind == "goal":
        return (wealth >= spec.goal).astype(float)
    return expit(spec.steepness * (wealth - spec.goal))


def marginal_utility(spec: UtilitySpec, wealth: NDArray) -> NDArray:
    """Derivada de la utilidad respecto a la riqueza (cero para la meta dura)."""
    wealth = np.asarray(wealth, dtype=float)
    if spec.is_homogeneous:
        if spec.is_log:
            return 1.0 / wealth
        return wealth ** (spec.gamma - 1.0)
    if spec.kind == "goal":
        return np.zeros_like(wealth)
    s = expit(spec.steepness * (wealth - spec.goal))
    return spec.steepness * s * (1.0 - s)


def merton_allocation(model: RegimeModel, regime: int, gamma: float) -> NDArray:
    """
    Asignación de Merton de un período para un régimen conocido.

    pi = Sigma^-1 (mu - rf) / (1 - gamma); la caja toma el residuo.
    """
    if model.n_risky == 0:
        return model.cash_allocation()
    excess = model.mu[regime] - model.rf[regime]
    risky = linalg.solve(model.sigma[regime], excess, assume_a="sym") / (1.0 - gamma)
    return np.append(risky, 1.0 - risky.sum())


# ============================================================================
# ESTADO DE SIMULACIÓN
# ============================================================================

@dataclass
class MarketState:
    """Estado vectorizado de m trayectorias al inicio del período t."""

    t: int
    regimes: NDArray
    beliefs: NDArray
    wealth: NDArray
    held: NDArray
    alive: NDArray

    @classmethod
    def initial(
        cls,
        model: RegimeModel,
        n_paths: int,
        initial_wealth: float,
        belief: Sequence[float],
        rng: np.random.Generator,
    ) -> "MarketState":
        belief_arr = check_belief(np.asarray(belief, dtype=float), model.n_regimes)
        beliefs = np.tile(belief_arr, (n_paths, 1))
        held = np.tile(model.cash_allocation(), (n_paths, 1))
        return cls(
            t=0,
            regimes=draw_regimes(rng, beliefs),
            beliefs=beliefs,
            wealth=np.full(n_paths, float(initial_wealth)),
            held=held,
            alive=np.ones(n_paths, dtype=bool),
        )

    def advance(
        self,
        model: RegimeModel,
        target: NDArray,
        cost_rate: float,
        floor: float,
        rng: np.random.Generator,
        stats: Optional[FilterStats] = None,
    ) -> Tuple[NDArray, NDArray]:
        """
        Rebalancea a `target`, avanza un período y actualiza las creencias.

        Las trayectorias en quiebra no operan más.

        Returns:
            (turnover, costo pagado en unidades de riqueza)
        """
        target = np.where(self.alive[:, None], target, self.held)
        traded = turnover(self.held, target)
        post_cost = rebalance(self.wealth, self.held, target, cost_rate)
        cost = self.wealth - post_cost

        z = rng.standard_normal((len(self.wealth), model.n_risky))
        returns = sample_returns(model, self.regimes, z)
        rf = model.rf[self.regimes]
        grown, drifted, bankrupt = grow(post_cost, target, returns, rf, floor=floor)
        newly_dead = bankrupt & self.alive

        self.wealth = np.where(self.alive, grown, self.wealth)
        self.held = np.where(self.alive[:, None], drifted, self.held)
        self.alive = self.alive & ~newly_dead
        self.beliefs = filter_step(model, self.beliefs, returns, stats)
        self.regimes = draw_regimes(rng, model.trans[self.regimes])
        self.t += 1
        return traded, cost
