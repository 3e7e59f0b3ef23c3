#!/usr/bin/env python3
"""
Red de zona de no transacción sobre una política base.

La política base (tabla de DP o de LMCTS) fija un centro por (t, creencia). La
red produce, por activo riesgoso, un ancho hacia arriba y otro hacia abajo; si
los pesos derivados quedan dentro de la banda no se opera y si salen se llevan
al borde más cercano. La caja absorbe el residuo.

El entrenamiento desenrolla el horizonte completo sobre un lote de trayectorias
y propaga gradientes hacia atrás a mano (modo reverso vectorizado).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from dp_solver import BeliefGrid, PolicyTable
from lmcts_solver import LookupTable
from market_core import (
    BANKRUPTCY_FLOOR,
    Constraints,
    FilterStats,
    RegimeModel,
    SolverError,
    Stream,
    UtilitySpec,
    check_belief,
    draw_regimes,
    filter_step,
    gross_returns,
    make_rng,
    marginal_utility,
    simulate_paths,
    utility,
)

logger = logging.getLogger(__name__)

WEALTH_FEATURE_CAP = 5.0
COLLAPSED_BIAS = -50.0
MAX_RESTARTS = 3
GRAD_FLOOR = 1e-12
CASH_EPS = 1e-12


def softplus(x: NDArray) -> NDArray:
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


# ============================================================================
# PARÁMETROS
# ============================================================================

def param_layout(n_inputs: int, hidden: int, n_risky: int, center_head: bool) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    """Offset y forma de cada bloque dentro del vector plano."""
    shapes = [
        ("W1", (hidden, n_inputs)),
        ("b1", (hidden,)),
        ("Wu", (n_risky, hidden)),
        ("bu", (n_risky,)),
        ("Wl", (n_risky, hidden)),
        ("bl", (n_risky,)),
    ]
    if center_head:
        shapes += [("Wc", (n_risky, hidden)), ("bc", (n_risky,))]
    layout = {}
    offset = 0
    for name, shape in shapes:
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout


@dataclass
class NtzParams:
    """
    Parámetros de la red como un único vector plano.

    Capa oculta tanh de ancho `hidden`; cabezas softplus para los anchos
    superior e inferior y, opcionalmente, una cabeza lineal que desplaza el
    centro de la zona.
    """

    vector: NDArray
    n_regimes: int
    n_risky: int
    hidden: int = 32
    wealth_feature: bool = False
    center_head: bool = False
    layout: Dict[str, Tuple[int, Tuple[int, ...]]] = field(init=False, repr=False)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        self.layout = param_layout(self.n_inputs, self.hidden, self.n_risky, self.center_head)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout.values())
        if self.vector.shape != (expected,):
            raise ValueError(f"parameter vector has {self.vector.size} entries, layout needs {expected}")

    @property
    def n_inputs(self) -> int:
        return self.n_regimes + int(self.wealth_feature)

    def get(self, name: str) -> NDArray:
        offset, shape = self.layout[name]
        return self.vector[offset:offset + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "NtzParams":
        return NtzParams(
            vector=self.vector.copy(),
            n_regimes=self.n_regimes,
            n_risky=self.n_risky,
            hidden=self.hidden,
            wealth_feature=self.wealth_feature,
            center_head=self.center_head,
        )

    @classmethod
    def zeros(cls, n_regimes: int, n_risky: int, hidden: int = 32, wealth_feature: bool = False,
              center_head: bool = False) -> "NtzParams":
        n_inputs = n_regimes + int(wealth_feature)
        size = sum(int(np.prod(s)) for _, s in param_layout(n_inputs, hidden, n_risky, center_head).values())
        return cls(np.zeros(size), n_regimes, n_risky, hidden, wealth_feature, center_head)

    @classmethod
    def initialize(
        cls,
        n_regimes: int,
        n_risky: int,
        rng: np.random.Generator,
        hidden: int = 32,
        wealth_feature: bool = False,
        center_head: bool = False,
        init_width: float = 0.02,
    ) -> "NtzParams":
        """Pesos pequeños aleatorios; anchos iniciales iguales a `init_width`."""
        params = cls.zeros(n_regimes, n_risky, hidden, wealth_feature, center_head)
        params.get("W1")[:] = rng.normal(0.0, 1.0 / np.sqrt(params.n_inputs), size=(hidden, params.n_inputs))
        params.get("Wu")[:] = rng.normal(0.0, 0.01 / np.sqrt(hidden), size=(n_risky, hidden))
        params.get("Wl")[:] = rng.normal(0.0, 0.01 / np.sqrt(hidden), size=(n_risky, hidden))
        params.get("bu")[:] = inverse_softplus(init_width)
        params.get("bl")[:] = inverse_softplus(init_width)
        return params

    @classmethod
    def collapsed(cls, n_regimes: int, n_risky: int, hidden: int = 32, wealth_feature: bool = False,
                  center_head: bool = False) -> "NtzParams":
        """Cabezas con peso cero y sesgo muy negativo: zona de ancho ~0."""
        params = cls.zeros(n_regimes, n_risky, hidden, wealth_feature, center_head)
        params.get("bu")[:] = COLLAPSED_BIAS
        params.get("bl")[:] = COLLAPSED_BIAS
        return params


# ============================================================================
# POLÍTICA BASE
# ============================================================================

@dataclass(frozen=True, eq=False)
class BasePolicy:
    """Asignación base por (t, punto de la grilla), tomada de DP o de LMCTS."""

    grid: BeliefGrid
    alloc: NDArray
    source: str = "dp"

    @classmethod
    def from_table(cls, table: Union[PolicyTable, LookupTable], source: str) -> "BasePolicy":
        if np.any(np.isnan(table.alloc)):
            t, b = np.argwhere(np.isnan(table.alloc).any(axis=2))[0]
            raise SolverError(source, "base policy", f"missing entry for t={int(t)}, belief={int(b)}")
        return cls(grid=table.grid, alloc=np.array(table.alloc), source=source)

    @property
    def horizon(self) -> int:
        return self.alloc.shape[0]

    @property
    def n_weights(self) -> int:
        return self.alloc.shape[2]

    def at_index(self, t: int, snaps: NDArray) -> NDArray:
        return self.alloc[t, snaps]

    def at(self, t: int, beliefs: NDArray) -> NDArray:
        return self.alloc[t, self.grid.snap(beliefs)]


# ============================================================================
# ZONA Y PROYECCIÓN
# ============================================================================

def features(beliefs: NDArray, wealth_ratio: NDArray, wealth_feature: bool) -> NDArray:
    """Entradas de la red: creencia y, opcionalmente, W / W0 recortado a [0, 5]."""
    beliefs = np.atleast_2d(beliefs)
    if not wealth_feature:
        return beliefs
    ratio = np.clip(np.broadcast_to(wealth_ratio, beliefs.shape[:1]), 0.0, WEALTH_FEATURE_CAP)
    return np.concatenate([beliefs, ratio[:, None]], axis=1)


@dataclass
class _Heads:
    h: NDArray
    su: NDArray
    sl: NDArray
    shift: Optional[NDArray]


def _heads(params: NtzParams, x: NDArray) -> _Heads:
    h = np.tanh(x @ params.get("W1").T + params.get("b1"))
    su = h @ params.get("Wu").T + params.get("bu")
    sl = h @ params.get("Wl").T + params.get("bl")
    shift = h @ params.get("Wc").T + params.get("bc") if params.center_head else None
    return _Heads(h=h, su=su, sl=sl, shift=shift)


def _bands(base: NDArray, heads: _Heads, establish: bool) -> Tuple[NDArray, NDArray]:
    n = base.shape[1] - 1
    center = base[:, :n] if heads.shift is None else base[:, :n] + heads.shift
    if establish:
        return center, center
    return center - softplus(heads.sl), center + softplus(heads.su)


def zone(params: NtzParams, base: NDArray, feats: NDArray) -> Tuple[NDArray, NDArray]:
    """
    Cotas (inferior, superior) de los pesos riesgosos alrededor de la base.

    Returns:
        (lower (m, n), upper (m, n))
    """
    return _bands(np.atleast_2d(base), _heads(params, np.atleast_2d(feats)), establish=False)


@dataclass
class _Projection:
    target: NDArray
    inside: NDArray
    below: NDArray
    above: NDArray
    lower_free: NDArray
    upper_free: NDArray
    secondary: NDArray
    short_of_cash: NDArray
    zone_anchor: NDArray
    clamped: NDArray
    anchor: NDArray
    ratio: NDArray
    denom: NDArray


def _project(drifted: NDArray, lower: NDArray, upper: NDArray, constraints: Constraints) -> _Projection:
    n = lower.shape[1]
    lo, hi = constraints.bounds(n)
    lo_r, hi_r, lo_c, hi_c = lo[:n], hi[:n], lo[n], hi[n]

    lower_b = np.clip(lower, lo_r, hi_r)
    upper_b = np.clip(upper, lo_r, hi_r)
    held = drifted[:, :n]
    below = held < lower_b
    above = held > upper_b
    z = np.where(below, lower_b, np.where(above, upper_b, held))

    total = z.sum(axis=1)
    cash = 1.0 - total
    short_of_cash = cash < lo_c - CASH_EPS
    excess_cash = cash > hi_c + CASH_EPS
    secondary = short_of_cash | excess_cash

    # corrección proporcional: primero dentro de la zona, si no alcanza contra la caja de cotas
    target_sum = np.where(short_of_cash, 1.0 - lo_c, 1.0 - hi_c)
    zone_edge = np.where(short_of_cash[:, None], lower_b, upper_b)
    box_edge = np.where(short_of_cash[:, None], lo_r, hi_r)
    gap = np.abs(target_sum - total)
    zone_anchor = np.abs(np.sum(z - zone_edge, axis=1)) >= gap
    anchor = np.where(zone_anchor[:, None], zone_edge, box_edge)
    denom = np.sum(z - anchor, axis=1)
    safe = np.where(secondary & (denom != 0.0), denom, 1.0)
    ratio = np.where(secondary, (target_sum - total) / safe, 0.0)
    z2 = z + ratio[:, None] * (z - anchor)

    inside = ~np.any(below | above, axis=1) & ~secondary
    target = np.concatenate([z2, (1.0 - z2.sum(axis=1))[:, None]], axis=1)
    target = np.where(inside[:, None], drifted, target)

    return _Projection(
        target=target,
        inside=inside,
        below=below,
        above=above,
        lower_free=(lower > lo_r) & (lower < hi_r),
        upper_free=(upper > lo_r) & (upper < hi_r),
        secondary=secondary,
        short_of_cash=short_of_cash,
        zone_anchor=zone_anchor,
        clamped=z,
        anchor=anchor,
        ratio=ratio,
        denom=safe,
    )


def project_to_zone(
    drifted: NDArray,
    lower: NDArray,
    upper: NDArray,
    constraints: Constraints,
) -> Tuple[NDArray, int]:
    """
    Lleva cada peso riesgoso fuera de la banda a su borde más cercano.

    Si la caja resultante viola sus cotas se reparte el exceso proporcionalmente
    (corrección secundaria, reportada en el conteo). Sin cambios si ya está en
    la zona.

    Returns:
        (asignación objetivo (m, n + 1), número de correcciones secundarias)
    """
    proj = _project(np.atleast_2d(drifted), np.atleast_2d(lower), np.atleast_2d(upper), constraints)
    return proj.target, int(proj.secondary.sum())


def _project_backward(proj: _Projection, d_target: NDArray) -> Tuple[NDArray, NDArray, NDArray]:
    """Adjuntos de (pesos derivados, cota inferior, cota superior)."""
    n = proj.clamped.shape[1]
    inside = proj.inside[:, None]
    d_held = np.where(inside, d_target, 0.0)

    dz2 = np.where(inside, 0.0, d_target[:, :n] - d_target[:, n:])
    sec = proj.secondary[:, None]
    spread = proj.clamped - proj.anchor
    a = np.sum(dz2 * spread, axis=1, keepdims=True) / proj.denom[:, None]
    ratio = proj.ratio[:, None]
    dz = np.where(sec, (1.0 + ratio) * (dz2 - a), dz2)
    d_anchor = np.where(sec & proj.zone_anchor[:, None], -ratio * (dz2 - a), 0.0)

    short = proj.short_of_cash[:, None]
    d_lower_b = dz * proj.below + np.where(short, d_anchor, 0.0)
    d_upper_b = dz * proj.above + np.where(short, 0.0, d_anchor)
    d_held[:, :n] += dz * ~(proj.below | proj.above)
    return d_held, d_lower_b * proj.lower_free, d_upper_b * proj.upper_free


# ============================================================================
# TRAYECTORIAS
# ============================================================================

@dataclass
class PathBatch:
    """Lote de trayectorias: factores brutos, creencias de decisión e índices."""

    gross: NDArray
    beliefs: NDArray
    snaps: NDArray

    @property
    def n_paths(self) -> int:
        return self.gross.shape[0]


def simulate_batch(
    model: RegimeModel,
    grid: BeliefGrid,
    n_paths: int,
    horizon: int,
    initial_belief: NDArray,
    rng: np.random.Generator,
) -> PathBatch:
    belief = check_belief(initial_belief, model.n_regimes)
    start = draw_regimes(rng, np.tile(belief, (n_paths, 1)))
    returns, regimes = simulate_paths(model, start, horizon, rng)
    gross = gross_returns(returns, model.rf[regimes[:, :-1]])

    beliefs = np.empty((n_paths, horizon, model.n_regimes))
    current = np.tile(belief, (n_paths, 1))
    stats = FilterStats()
    for t in range(horizon):
        beliefs[:, t] = current
        current = filter_step(model, current, returns[:, t], stats)
    return PathBatch(gross=gross, beliefs=beliefs, snaps=grid.snap(beliefs))


# ============================================================================
# DESENROLLADO Y GRADIENTE
# ============================================================================

@dataclass
class _Step:
    x: NDArray
    heads: _Heads
    proj: _Projection
    alive: NDArray
    cont: NDArray
    target: NDArray
    delta: NDArray
    wealth: NDArray
    denom: NDArray
    w_plus: NDArray
    gross: NDArray
    growth: NDArray


@dataclass
class UnrollResult:
    loss: float
    terminal_wealth: NDArray
    secondary: int
    tape: List[_Step] = field(default_factory=list, repr=False)


def unroll(
    params: NtzParams,
    base: BasePolicy,
    batch: PathBatch,
    spec: UtilitySpec,
    cost_rate: float,
    constraints: Constraints,
    keep_tape: bool = False,
) -> UnrollResult:
    """
    Simula la política de zona sobre el lote con riqueza inicial 1.

    En t = 0 se pasa de caja al centro pagando costo; desde t = 1 se proyectan
    los pesos derivados. La pérdida es -media de U(W_T).
    """
    m, horizon, d = batch.gross.shape
    if horizon > base.horizon:
        raise ValueError(f"batch covers {horizon} steps but the base policy only {base.horizon}")
    cash = np.zeros(d)
    cash[-1] = 1.0
    wealth = np.ones(m)
    held = np.tile(cash, (m, 1))
    alive = np.ones(m, dtype=bool)
    tape: List[_Step] = []
    secondary = 0

    for t in range(horizon):
        x = features(batch.beliefs[:, t], wealth, params.wealth_feature)
        heads = _heads(params, x)
        lower, upper = _bands(base.at_index(t, batch.snaps[:, t]), heads, establish=(t == 0))
        proj = _project(held, lower, upper, constraints)
        secondary += int(np.count_nonzero(proj.secondary & alive))

        target = np.where(alive[:, None], proj.target, held)
        delta = target - held
        denom = 1.0 + cost_rate * np.sum(np.abs(delta), axis=1)
        w_plus = wealth / denom
        g = batch.gross[:, t]
        growth = np.sum(target * g, axis=1)
        newly_dead = alive & (growth <= 0.0)
        cont = alive & ~newly_dead
        safe_growth = np.where(cont, growth, 1.0)

        if keep_tape:
            tape.append(_Step(x, heads, proj, alive, cont, target, delta, wealth, denom, w_plus, g, safe_growth))

        wealth = np.where(cont, w_plus * growth, np.where(newly_dead, BANKRUPTCY_FLOOR, wealth))
        held = np.where(cont[:, None], target * g / safe_growth[:, None], np.where(newly_dead[:, None], cash, held))
        alive = cont

    loss = -float(np.mean(utility(spec, wealth)))
    return UnrollResult(loss=loss, terminal_wealth=wealth, secondary=secondary, tape=tape)


@dataclass
class GradientResult:
    loss: float
    grad: NDArray
    finite: bool
    secondary: int


def loss_and_gradient(
    params: NtzParams,
    base: BasePolicy,
    batch: PathBatch,
    spec: UtilitySpec,
    cost_rate: float,
    constraints: Constraints,
) -> GradientResult:
    """Pérdida y gradiente exacto por modo reverso sobre el horizonte desenrollado."""
    result = unroll(params, base, batch, spec, cost_rate, constraints, keep_tape=True)
    m = batch.n_paths
    n = base.n_weights - 1
    grad = np.zeros_like(params.vector)
    views = {name: grad[off:off + int(np.prod(shape))].reshape(shape) for name, (off, shape) in params.layout.items()}
    w_u, w_l = params.get("Wu"), params.get("Wl")
    w_c = params.get("Wc") if params.center_head else None
    w_1 = params.get("W1")

    d_wealth = -marginal_utility(spec, result.terminal_wealth) / m
    d_held = np.zeros((m, n + 1))

    for t in reversed(range(len(result.tape))):
        st = result.tape[t]
        cont = st.cont
        dead_before = ~st.alive

        d_wplus = np.where(cont, d_wealth * st.growth, 0.0)
        d_growth = np.where(cont, d_wealth * st.w_plus, 0.0)
        d_next = np.where(cont[:, None], d_held, 0.0)
        d_target = d_next * st.gross / st.growth[:, None]
        d_growth -= np.sum(d_next * st.target * st.gross, axis=1) / st.growth ** 2
        d_target += d_growth[:, None] * st.gross

        d_prev_wealth = d_wplus / st.denom
        d_traded = -d_wplus * st.wealth * cost_rate / st.denom ** 2
        sign = np.sign(st.delta)
        d_target += d_traded[:, None] * sign
        d_prev_held = -d_traded[:, None] * sign

        d_proj_held, d_lower, d_upper = _project_backward(st.proj, d_target)
        d_prev_held += d_proj_held

        heads = st.heads
        d_center = d_lower + d_upper
        if t == 0:
            d_su = np.zeros_like(heads.su)
            d_sl = np.zeros_like(heads.sl)
        else:
            d_su = d_upper * expit(heads.su)
            d_sl = -d_lower * expit(heads.sl)

        views["Wu"] += d_su.T @ heads.h
        views["bu"] += d_su.sum(axis=0)
        views["Wl"] += d_sl.T @ heads.h
        views["bl"] += d_sl.sum(axis=0)
        d_h = d_su @ w_u + d_sl @ w_l
        if params.center_head:
            views["Wc"] += d_center.T @ heads.h
            views["bc"] += d_center.sum(axis=0)
            d_h += d_center @ w_c

        d_a = d_h * (1.0 - heads.h ** 2)
        views["W1"] += d_a.T @ st.x
        views["b1"] += d_a.sum(axis=0)
        if params.wealth_feature:
            d_x = d_a @ w_1
            active = (st.wealth > 0.0) & (st.wealth < WEALTH_FEATURE_CAP)
            d_prev_wealth += d_x[:, -1] * active

        d_wealth = np.where(dead_before, d_wealth, d_prev_wealth)
        d_held = np.where(dead_before[:, None], 0.0, d_prev_held)

    finite = bool(np.isfinite(result.loss) and np.all(np.isfinite(grad)))
    return GradientResult(loss=result.loss, grad=grad, finite=finite, secondary=result.secondary)


# ============================================================================
# ENTRENAMIENTO
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    """
    Hiperparámetros de entrenamiento.

    wealth_feature y center_head en None se activan solo para objetivos de meta.
    Con `scale_to_gradient` la tasa se mide en unidades del primer gradiente:
    el primer paso mueve los parámetros `learning_rate` en RMS, sin importar
    la escala de la utilidad.
    """

    hidden: int = 32
    batch_paths: int = 256
    epochs: int = 20
    steps_per_epoch: int = 20
    learning_rate: float = 1e-3
    momentum: float = 0.9
    validation_paths: int = 2048
    init_width: float = 0.02
    wealth_feature: Optional[bool] = None
    center_head: Optional[bool] = None
    seed: int = 0
    scale_to_gradient: bool = True

    def __post_init__(self):
        if self.hidden < 1 or self.batch_paths < 1 or self.steps_per_epoch < 1:
            raise ValueError("hidden, batch_paths and steps_per_epoch must be >= 1")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0.0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("learning_rate must be > 0 and momentum in [0, 1)")
        if self.init_width <= 0.0:
            raise ValueError(f"init_width must be positive, got {self.init_width}")

    def uses_wealth(self, spec: UtilitySpec) -> bool:
        if self.wealth_feature is not None:
            return self.wealth_feature
        return spec.kind in ("goal", "smoothed_goal")

    def uses_center(self, spec: UtilitySpec) -> bool:
        if self.center_head is not None:
            return self.center_head
        return spec.kind in ("goal", "smoothed_goal")


@dataclass
class TrainResult:
    params: NtzParams
    history: List[Dict[str, float]]
    diagnostics: List[str]
    rejected_batches: int = 0
    restarts: int = 0


def train(
    base: BasePolicy,
    model: RegimeModel,
    config: TrainConfig,
    spec: UtilitySpec,
    constraints: Constraints,
    cost_rate: float,
    initial_belief: NDArray,
    initial_wealth: float = 1.0,
) -> TrainResult:
    """
    SGD con momentum sobre lotes frescos de trayectorias.

    Se conservan los parámetros con mejor pérdida de validación. Si la pérdida
    diverge se reduce la tasa a la mitad y se reinicia desde el mejor punto,
    hasta tres veces.

    Raises:
        SolverError: Si la divergencia persiste luego de los reinicios.
    """
    unit_spec = spec.smoothed().scaled(initial_wealth)
    params = NtzParams.initialize(
        model.n_regimes,
        model.n_risky,
        make_rng(config.seed, Stream.NN_TRAIN, 0),
        hidden=config.hidden,
        wealth_feature=config.uses_wealth(spec),
        center_head=config.uses_center(spec),
        init_width=config.init_width,
    )
    horizon = base.horizon
    if config.epochs == 0:
        return TrainResult(params=params, history=[], diagnostics=[])

    validation = simulate_batch(
        model, base.grid, config.validation_paths, horizon, initial_belief,
        make_rng(config.seed, Stream.NN_VALID, 0),
    )
    best = params.copy()
    best_loss = unroll(best, base, validation, unit_spec, cost_rate, constraints).loss
    velocity = np.zeros_like(params.vector)
    learning_rate = config.learning_rate
    step_scale: Optional[float] = None if config.scale_to_gradient else 1.0
    history: List[Dict[str, float]] = []
    diagnostics: List[str] = []
    rejected = 0
    restarts = 0

    logger.info(
        f"NTZ training on {base.source} base: epochs={config.epochs}, batch={config.batch_paths}, "
        f"cost_rate={cost_rate:g}, initial validation loss={best_loss:.6g}"
    )
    for epoch in range(config.epochs):
        train_losses = []
        for step in range(config.steps_per_epoch):
            batch = simulate_batch(
                model, base.grid, config.batch_paths, horizon, initial_belief,
                make_rng(config.seed, Stream.NN_TRAIN, epoch + 1, step),
            )
            result = loss_and_gradient(params, base, batch, unit_spec, cost_rate, constraints)
            if not np.isfinite(result.loss):
                restarts += 1
                if restarts > MAX_RESTARTS:
                    raise SolverError(f"{base.source}_nn", "train", f"loss diverged after {MAX_RESTARTS} restarts")
                learning_rate /= 2.0
                params = best.copy()
                velocity[:] = 0.0
                diagnostics.append(f"epoch {epoch} step {step}: divergence, lr halved to {learning_rate:g}")
                logger.warning(f"NTZ training diverged; restarting from best with lr={learning_rate:g}")
                continue
            if not result.finite:
                rejected += 1
                diagnostics.append(f"epoch {epoch} step {step}: non-finite gradient, batch rejected")
                continue
            if step_scale is None:
                rms = float(np.sqrt(np.mean(result.grad ** 2)))
                step_scale = 1.0 / rms if rms > GRAD_FLOOR else 1.0
                logger.debug(f"NTZ step scale {step_scale:.4g} from initial gradient RMS {rms:.4g}")
            velocity = config.momentum * velocity - learning_rate * step_scale * result.grad
            params.vector += velocity
            train_losses.append(result.loss)

        valid_loss = unroll(params, base, validation, unit_spec, cost_rate, constraints).loss
        if np.isfinite(valid_loss) and valid_loss < best_loss:
            best_loss = valid_loss
            best = params.copy()
        history.append({
            "epoch": float(epoch),
            "train_loss": float(np.mean(train_losses)) if train_losses else float("nan"),
            "valid_loss": float(valid_loss),
            "learning_rate": learning_rate,
        })
        logger.debug(f"epoch {epoch}: train={history[-1]['train_loss']:.6g} valid={valid_loss:.6g}")

    logger.info(f"NTZ training done: best validation loss={best_loss:.6g}")
    return TrainResult(params=best, history=history, diagnostics=diagnostics, rejected_batches=rejected, restarts=restarts)


# ============================================================================
# DECISIÓN EN EVALUACIÓN
# ============================================================================

def zone_targets(
    params: NtzParams,
    base: BasePolicy,
    t: int,
    beliefs: NDArray,
    wealth_ratio: NDArray,
    held: NDArray,
    constraints: Constraints,
) -> Tuple[NDArray, NDArray]:
    """
    Objetivo de la política de zona en el período t (misma regla que el entrenamiento).

    Returns:
        (objetivos (m, n + 1), máscara de corrección secundaria)
    """
    x = features(beliefs, wealth_ratio, params.wealth_feature)
    lower, upper = _bands(base.at(t, beliefs), _heads(params, x), establish=(t == 0))
    proj = _project(held, lower, upper, constraints)
    return proj.target, proj.secondary
