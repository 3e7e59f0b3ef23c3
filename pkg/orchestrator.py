#!/usr/bin/env python3
"""
Orquestador de experimentos de asignación con regímenes ocultos.

Subcomandos:
    calibrate     Estima el modelo desde un CSV de retornos etiquetados
    solve-dp      Resuelve la tabla de programación dinámica
    solve-lmcts   Construye (y suaviza) la tabla de LMCTS
    train-nn      Entrena la zona de no transacción sobre una tabla base
    evaluate      Evalúa una tabla (con o sin zona) fuera de muestra
    compare       Corre los experimentos de comparación completos

Uso:
    python orchestrator.py --config configs/desk_scale.yaml --seed 7 compare
    python orchestrator.py --config configs/desk_scale.yaml solve-dp --shorting
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from calibration_io import (
    EXPERIMENTS,
    METHODS,
    ConfigError,
    RunConfig,
    TableFormatError,
    estimate_labeled,
    load_config,
    load_labeled_returns,
    load_params,
    load_table,
    save_model,
    save_params,
    save_pool,
    save_table,
    write_atomic,
)
from dp_solver import BeliefGrid, PolicyTable, default_penalty, solve as solve_dp_table
from evaluation import (
    EvalConfig,
    EvalReport,
    Policy,
    TablePolicy,
    ZonePolicy,
    evaluate,
    plot_series,
    write_reports_csv,
    write_summary_csv,
    write_terminal_wealth,
)
from lmcts_solver import LookupTable, build_lookup, build_path_pool, smooth_lookup
from market_core import Constraints, ModelValidationError, SolverError, UtilitySpec
from ntz_network import BasePolicy, NtzParams, train
from settings import configure_logging, get_default_seed, get_results_dir, resolve_workers

logger = logging.getLogger(__name__)

BANNER = "=" * 70
EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2


class ExperimentOrchestrator:
    """
    Coordina solvers, entrenamiento y evaluación para una configuración.

    Las tablas y parámetros se cachean por variante (venta corta, costo,
    objetivo) para que los experimentos de una misma corrida los compartan.
    """

    def __init__(self, config: RunConfig, out_dir: Path, workers: int = 1):
        self.config = config.with_workers(workers)
        self.out_dir = Path(out_dir)
        self.workers = workers
        self._dp: Dict[Tuple[bool, float], PolicyTable] = {}
        self._lmcts: Dict[bool, LookupTable] = {}
        self._nn: Dict[Tuple[str, bool, float, str], NtzParams] = {}
        self.timings: Dict[str, float] = {}
        self.diagnostics: List[str] = []
        self.results: List[Dict[str, Any]] = []

    # ------------------------------------------------------------------
    # Variantes
    # ------------------------------------------------------------------

    def constraints_for(self, shorting: bool) -> Constraints:
        base = self.config.constraints
        return replace(base, allow_short=shorting)

    def _timed(self, key: str, started: float) -> None:
        self.timings[key] = round(self.timings.get(key, 0.0) + time.time() - started, 3)

    # ------------------------------------------------------------------
    # Solvers
    # ------------------------------------------------------------------

    def solve_dp(self, shorting: bool = False, penalty: float = 0.0) -> PolicyTable:
        key = (shorting, penalty)
        if key not in self._dp:
            label = "adjusted_dp" if penalty > 0.0 else "dp"
            print(f"  [{label}] solving DP (shorting={'on' if shorting else 'off'}, penalty={penalty:g})...")
            started = time.time()
            options = replace(self.config.dp, penalty=penalty)
            table = solve_dp_table(self.config.model, self.config.horizon, self.constraints_for(shorting),
                                   self.config.utility, options)
            self._timed(f"{label}_solve", started)
            self.diagnostics.extend(f"{label}: {d}" for d in table.diagnostics)
            suffix = "short" if shorting else "no_short"
            save_table(self.out_dir / "tables" / f"{label}_{suffix}.csv", table, self.config.model.asset_names,
                       self.config.seed)
            print(f"    ✓ DP table: {table.horizon} stages x {len(table.grid)} beliefs")
            self._dp[key] = table
        return self._dp[key]

    def adjusted_penalty(self) -> float:
        if self.config.adjusted_penalty is not None:
            return self.config.adjusted_penalty
        return default_penalty(self.config.utility)

    def solve_lmcts(self, shorting: bool = False, save_pool_file: bool = False) -> LookupTable:
        if shorting not in self._lmcts:
            print(f"  [lmcts] building lookup table (shorting={'on' if shorting else 'off'})...")
            started = time.time()
            options = self.config.lmcts
            grid = BeliefGrid(self.config.model.n_regimes, options.belief_step)
            pool = build_path_pool(self.config.model, grid, options.pool_paths, self.config.horizon,
                                   options.seed, options.workers)
            if save_pool_file:
                save_pool(self.out_dir / "tables" / "path_pool.csv", pool)
            constraints = self.constraints_for(shorting)
            raw = build_lookup(self.config.model, self.config.horizon, constraints, self.config.utility, options,
                               pool=pool, initial_wealth=self.config.initial_wealth)
            suffix = "short" if shorting else "no_short"
            names = self.config.model.asset_names
            save_table(self.out_dir / "tables" / f"lmcts_raw_{suffix}.csv", raw, names, self.config.seed)
            table = raw
            smoothing = self.config.smoothing
            if smoothing.enabled:
                table = smooth_lookup(raw, smoothing.window, smoothing.order, constraints)
                save_table(self.out_dir / "tables" / f"lmcts_{suffix}.csv", table, names, self.config.seed)
            self._timed("lmcts_solve", started)
            self.diagnostics.extend(f"lmcts: {d}" for d in table.diagnostics)
            print(f"    ✓ LMCTS table: {len(table)} entries")
            self._lmcts[shorting] = table
        return self._lmcts[shorting]

    def base_policy(self, source: str, shorting: bool) -> BasePolicy:
        if source == "dp":
            return BasePolicy.from_table(self.solve_dp(shorting), "dp")
        return BasePolicy.from_table(self.solve_lmcts(shorting), "lmcts")

    def train_nn(self, source: str, shorting: bool, cost_rate: float, spec: UtilitySpec) -> NtzParams:
        key = (source, shorting, cost_rate, spec.kind)
        if key not in self._nn:
            base = self.base_policy(source, shorting)
            print(f"  [{source}_nn] training zone (cost={cost_rate:g}, objective={spec.kind})...")
            started = time.time()
            result = train(base, self.config.model, self.config.nn, spec, self.constraints_for(shorting), cost_rate,
                           np.array(self.config.initial_belief), self.config.initial_wealth)
            self._timed(f"{source}_nn_train", started)
            self.diagnostics.extend(f"{source}_nn: {d}" for d in result.diagnostics)
            tag = f"{source}_nn_{'short' if shorting else 'no_short'}_{spec.kind}_c{cost_rate:g}"
            save_params(self.out_dir / "params" / f"{tag}.csv", result.params, source, cost_rate)
            print(f"    ✓ trained {len(result.history)} epochs")
            self._nn[key] = result.params
        return self._nn[key]

    # ------------------------------------------------------------------
    # Evaluación
    # ------------------------------------------------------------------

    def eval_config(self, shorting: bool, cost_rate: float, spec: UtilitySpec) -> EvalConfig:
        settings = self.config.evaluation
        return EvalConfig(
            n_paths=settings.paths,
            horizon=self.config.horizon,
            initial_wealth=self.config.initial_wealth,
            initial_belief=self.config.initial_belief,
            cost_rate=cost_rate,
            utility=spec,
            constraints=self.constraints_for(shorting),
            goal=self.config.goal,
            chunk_size=settings.chunk_size,
            workers=self.workers,
        )

    def build_policy(self, method: str, shorting: bool, cost_rate: float, train_spec: UtilitySpec) -> Policy:
        if method == "dp":
            return TablePolicy.from_table("dp", self.solve_dp(shorting))
        if method == "adjusted_dp":
            return TablePolicy.from_table("adjusted_dp", self.solve_dp(True, self.adjusted_penalty()))
        if method == "lmcts":
            return TablePolicy.from_table("lmcts", self.solve_lmcts(shorting))
        source = method[: -len("_nn")]
        params = self.train_nn(source, shorting, cost_rate, train_spec)
        return ZonePolicy(name=method, base=self.base_policy(source, shorting), params=params)

    def _evaluate_methods(
        self,
        experiment: str,
        methods: Sequence[str],
        shorting: bool,
        cost_rate: float,
        eval_spec: UtilitySpec,
        train_spec: UtilitySpec,
        label_suffix: str = "",
    ) -> Dict[str, EvalReport]:
        reports: Dict[str, EvalReport] = {}
        config = self.eval_config(shorting, cost_rate, eval_spec)
        for method in methods:
            label = f"{method}{label_suffix}"
            entry: Dict[str, Any] = {"experiment": experiment, "method": label, "status": "pending", "errors": []}
            started = time.time()
            stage = "build"
            try:
                policy = self.build_policy(method, shorting, cost_rate, train_spec)
                policy.name = label
                stage = "evaluate"
                report = evaluate(policy, self.config.model, config, self.config.seed)
                reports[label] = report
                entry.update(report.summary())
                entry["status"] = "success"
                print(f"    ✓ {label}: E[U]={report.terminal_utility:.6g} ± {report.terminal_se:.2g}")
            except (ConfigError, TableFormatError, ModelValidationError):
                raise
            except (SolverError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                error = exc if isinstance(exc, SolverError) else SolverError(label, stage, f"{type(exc).__name__}: {exc}")
                entry["status"] = "failed"
                entry["stage"] = error.stage
                entry["errors"].append(str(error))
                print(f"    ✗ {label}: {error}")
                self.results.append(entry)
                if error is exc:
                    raise
                raise error from exc
            self._timed(f"{label}_evaluate", started)
            self.results.append(entry)
        return reports

    def _write_experiment(self, name: str, reports: Dict[str, EvalReport]) -> None:
        if not reports:
            return
        ordered = list(reports.values())
        write_reports_csv(self.out_dir / f"{name}.csv", ordered)
        write_terminal_wealth(self.out_dir / "paths" / f"{name}_terminal_wealth.csv", ordered)

    def run_experiment(self, name: str, methods: Sequence[str]) -> Dict[str, EvalReport]:
        """Corre un experimento y escribe su CSV y sus gráficos."""
        print(f"\n{BANNER}")
        print(f"Experiment: {name} | methods: {', '.join(methods)}")
        print(BANNER)
        crra = self.config.utility
        cost = self.config.cost_rate

        if name in ("no_short", "short"):
            shorting = name == "short"
            reports = self._evaluate_methods(name, methods, shorting, cost, crra, crra)
            self._write_experiment(name, reports)
            plot_series(
                self.out_dir / f"utility_{name}.svg",
                f"Mean utility ({name.replace('_', '-')})",
                "E[U(W_t)]",
                {k: (np.arange(len(r.mean_utility)), r.mean_utility) for k, r in reports.items()},
            )
            return reports

        if name == "goal":
            goal_spec = self.config.goal_utility()
            table_methods = [m for m in methods if not m.endswith("_nn")]
            nn_methods = [m for m in methods if m.endswith("_nn")]
            reports = self._evaluate_methods(name, table_methods, False, cost, goal_spec, crra)
            reports.update(self._evaluate_methods(name, nn_methods, False, cost, goal_spec, goal_spec, "_goal"))
            reports.update(self._evaluate_methods(name, nn_methods, False, cost, goal_spec, crra, "_crra"))
            self._write_experiment(name, reports)
            steps = {k: np.arange(len(r.mean_wealth)) for k, r in reports.items()}
            plot_series(
                self.out_dir / "goal_probability.svg",
                f"P(W_t >= {self.config.goal:g})",
                "probability",
                {k: (steps[k], r.goal_probability_path) for k, r in reports.items()},
            )
            plot_series(
                self.out_dir / "goal_wealth.svg",
                "Median wealth",
                "W_t",
                {k: (steps[k], r.wealth_quantiles[1]) for k, r in reports.items()},
            )
            return reports

        if name == "cost_sweep":
            reports = {}
            nn_methods = [m for m in methods if m.endswith("_nn")]
            for rate in self.config.evaluation.cost_sweep:
                reports.update(self._evaluate_methods(name, nn_methods, False, rate, crra, crra, f"_c{rate:g}"))
            self._write_experiment(name, reports)
            for method in nn_methods:
                plot_series(
                    self.out_dir / f"cost_sweep_{method}.svg",
                    f"Mean wealth by cost rate ({method})",
                    "E[W_t]",
                    {
                        f"c={rate:g}": (np.arange(len(reports[f'{method}_c{rate:g}'].mean_wealth)),
                                        reports[f"{method}_c{rate:g}"].mean_wealth)
                        for rate in self.config.evaluation.cost_sweep
                    },
                )
            return reports

        raise ConfigError("comparison.experiments", f"unknown experiment {name!r}")

    def run_comparison(
        self,
        experiments: Optional[Sequence[str]] = None,
        methods: Optional[Sequence[str]] = None,
    ) -> Dict[str, Dict[str, EvalReport]]:
        """Corre los experimentos pedidos; los métodos se evalúan en secuencia."""
        experiments = list(experiments or self.config.comparison.experiments)
        methods = list(methods or self.config.comparison.methods)
        started = time.time()

        print("\n" + BANNER)
        print("REGIME PORTFOLIO COMPARISON")
        print(BANNER)
        print(f"Experiments: {', '.join(experiments)}")
        print(f"Methods: {', '.join(methods)}")
        print(f"Seed: {self.config.seed} | Workers: {self.workers} | Output: {self.out_dir}")

        all_reports: Dict[str, Dict[str, EvalReport]] = {}
        for name in experiments:
            all_reports[name] = self.run_experiment(name, methods)

        summary_rows = [
            {"experiment": name, **report.summary()}
            for name, reports in all_reports.items()
            for report in reports.values()
        ]
        if summary_rows:
            write_summary_csv(self.out_dir / "summary.csv", summary_rows)
        self.timings["total"] = round(time.time() - started, 3)
        return all_reports

    # ------------------------------------------------------------------
    # Resumen
    # ------------------------------------------------------------------

    def generate_summary(self, command: str, status: str, errors: Sequence[str] = ()) -> Dict[str, Any]:
        succeeded = sum(1 for r in self.results if r["status"] == "success")
        failed = sum(1 for r in self.results if r["status"] == "failed")
        return {
            "command": command,
            "status": status,
            "generated_at": datetime.now(tz=timezone.utc).isoformat(),
            "config": self.config.source,
            "seed": self.config.seed,
            "workers": self.workers,
            "statistics": {
                "total_methods": len(self.results),
                "successful": succeeded,
                "failed": failed,
            },
            "timings_seconds": self.timings,
            "diagnostics": self.diagnostics,
            "errors": list(errors),
            "results": self.results,
        }

    def write_summary(self, summary: Dict[str, Any]) -> Path:
        path = self.out_dir / "run_summary.json"
        write_atomic(path, json.dumps(summary, indent=2, ensure_ascii=False, default=str) + "\n")
        return path

    @staticmethod
    def print_summary(summary: Dict[str, Any]) -> None:
        stats = summary["statistics"]
        print("\n" + BANNER)
        print("EXECUTION SUMMARY")
        print(BANNER)
        print(f"Command: {summary['command']} | Status: {summary['status'].upper()}")
        print(f"Total Duration: {summary['timings_seconds'].get('total', 0.0)}s")
        print(f"✓ Successful: {stats['successful']}")
        print(f"✗ Failed: {stats['failed']}")
        if summary["diagnostics"]:
            print(f"⚠ Diagnostics: {len(summary['diagnostics'])} (see run_summary.json)")
        print(BANNER + "\n")


# ============================================================================
# CLI
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Portfolio allocation under hidden regimes.")
    parser.add_argument("--config", type=Path, help="Run configuration (YAML)")
    parser.add_argument("--seed", type=int, default=None, help="Run seed (overrides RUN_SEED and the config)")
    parser.add_argument("--out", type=Path, default=None, help="Output directory (default RESULTS_DIR)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (overrides MAX_WORKERS)")
    parser.add_argument("--log-level", default=None, help="Logging level (default LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="Estimate the model from labelled returns")
    cal.add_argument("--returns", type=Path, required=True, help="CSV with one column per asset plus labels")
    cal.add_argument("--label-column", default="regime")
    cal.add_argument("--sequence-column", default=None)
    cal.add_argument("--rf", type=float, default=0.0)
    cal.add_argument("--model-out", type=Path, default=None)

    dp = sub.add_parser("solve-dp", help="Solve the belief-grid DP table")
    dp.add_argument("--shorting", action="store_true")
    dp.add_argument("--penalty", default=None, help="Shorting penalty: number or 'auto'")

    lm = sub.add_parser("solve-lmcts", help="Build the LMCTS lookup table")
    lm.add_argument("--shorting", action="store_true")
    lm.add_argument("--save-pool", action="store_true")

    nn = sub.add_parser("train-nn", help="Train a no-trade zone over a saved table")
    nn.add_argument("--base", type=Path, required=True)
    nn.add_argument("--cost-rate", type=float, default=None)
    nn.add_argument("--objective", choices=("crra", "goal"), default="crra")
    nn.add_argument("--shorting", action="store_true")

    ev = sub.add_parser("evaluate", help="Evaluate a saved table, optionally with a zone")
    ev.add_argument("--table", type=Path, required=True)
    ev.add_argument("--params", type=Path, default=None)
    ev.add_argument("--name", default=None)
    ev.add_argument("--cost-rate", type=float, default=None)
    ev.add_argument("--paths", type=int, default=None)
    ev.add_argument("--shorting", action="store_true")

    cmp_ = sub.add_parser("compare", help="Run the comparison experiments")
    cmp_.add_argument("--experiments", nargs="+", choices=EXPERIMENTS, default=None)
    cmp_.add_argument("--methods", nargs="+", choices=METHODS, default=None)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config", f"required for {args.command}")
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else get_default_seed()
    return config.with_seed(seed) if seed is not None else config


def _run_calibrate(args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    returns, labels, sequence, assets = load_labeled_returns(args.returns, args.label_column, args.sequence_column)
    model = estimate_labeled(returns, labels, rf=args.rf, asset_names=assets, sequence=sequence)
    path = save_model(args.model_out or out_dir / "model.yaml", model, comment=f"estimated from {args.returns}")
    print(f"✓ Model with {model.n_regimes} regimes and {model.n_risky} assets saved to: {path}")
    return {"command": "calibrate", "status": "success", "model": str(path), "observations": int(len(labels))}


def _run_command(args: argparse.Namespace, orchestrator: ExperimentOrchestrator) -> None:
    config = orchestrator.config
    if args.command == "solve-dp":
        penalty = 0.0
        if args.penalty is not None:
            penalty = orchestrator.adjusted_penalty() if args.penalty == "auto" else float(args.penalty)
        orchestrator.solve_dp(args.shorting, penalty)
    elif args.command == "solve-lmcts":
        orchestrator.solve_lmcts(args.shorting, save_pool_file=args.save_pool)
    elif args.command == "train-nn":
        table, _ = load_table(args.base)
        source = "dp" if isinstance(table, PolicyTable) else "lmcts"
        spec = config.goal_utility() if args.objective == "goal" else config.utility
        cost_rate = config.cost_rate if args.cost_rate is None else args.cost_rate
        base = BasePolicy.from_table(table, source)
        result = train(base, config.model, config.nn, spec, orchestrator.constraints_for(args.shorting), cost_rate,
                       np.array(config.initial_belief), config.initial_wealth)
        path = save_params(orchestrator.out_dir / "params" / f"{source}_nn_{args.objective}.csv", result.params,
                           source, cost_rate)
        print(f"✓ Parameters saved to: {path}")
    elif args.command == "evaluate":
        table, _ = load_table(args.table)
        name = args.name or ("zone" if args.params else "table")
        base = BasePolicy.from_table(table, name)
        policy: Policy = TablePolicy(name=name, base=base)
        if args.params is not None:
            params, _ = load_params(args.params)
            policy = ZonePolicy(name=name, base=base, params=params)
        cost_rate = config.cost_rate if args.cost_rate is None else args.cost_rate
        eval_config = orchestrator.eval_config(args.shorting, cost_rate, config.utility)
        if args.paths is not None:
            eval_config = replace(eval_config, n_paths=args.paths)
        report = evaluate(policy, config.model, eval_config, config.seed)
        write_reports_csv(orchestrator.out_dir / f"evaluate_{name}.csv", [report])
        orchestrator.results.append({"method": name, "status": "success", "errors": [], **report.summary()})
        print(f"✓ {name}: E[U]={report.terminal_utility:.6g} ± {report.terminal_se:.2g}")
    elif args.command == "compare":
        orchestrator.run_comparison(args.experiments, args.methods)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    out_dir = args.out or get_results_dir()
    workers = resolve_workers(args.threads)

    if args.command == "calibrate":
        try:
            summary = _run_calibrate(args, out_dir)
        except (ConfigError, TableFormatError, ModelValidationError) as exc:
            print(f"✗ {exc}", file=sys.stderr)
            return EXIT_INPUT
        write_atomic(out_dir / "run_summary.json", json.dumps(summary, indent=2) + "\n")
        return EXIT_OK

    try:
        config = _resolve_config(args)
    except (ConfigError, TableFormatError, ModelValidationError) as exc:
        print(f"✗ {exc}", file=sys.stderr)
        return EXIT_INPUT

    orchestrator = ExperimentOrchestrator(config, out_dir, workers)
    started = time.time()
    code = EXIT_OK
    errors: List[str] = []
    try:
        _run_command(args, orchestrator)
    except (ConfigError, TableFormatError, ModelValidationError) as exc:
        errors.append(str(exc))
        code = EXIT_INPUT
    except SolverError as exc:
        errors.append(str(exc))
        code = EXIT_SOLVER
    orchestrator.timings.setdefault("total", round(time.time() - started, 3))

    summary = orchestrator.generate_summary(args.command, "success" if code == EXIT_OK else "failed", errors)
    path = orchestrator.write_summary(summary)
    orchestrator.print_summary(summary)
    for error in errors:
        print(f"✗ {error}", file=sys.stderr)
    print(f"Run summary saved to: {path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
