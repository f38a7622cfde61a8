"""
Orquestração compartilhada pela CLI e pela API: leitura de configs, construção
dos objetos de domínio, diretórios de execução, varreduras e relatórios de decomposição
"""
import json
import math
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from loguru import logger
from pydantic import ValidationError

from config import settings
from schemas import ExperimentConfig, PolicySpec, TopologySpec
from services.errors import ConfigurationError
from services.polytope import CrossbarScheduleSet, ExplicitScheduleSet, ScheduleSet, polytope_service
from services.simulator import PolicyBlueprint, SimConfig, SimResult, TrafficSpec, simulation_service


VERSION = "1.0.1"
FLOAT_FORMAT = "%.17g"


####################################### logger #################################

def setup_logger(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Sink colorido em stderr mais arquivo rotativo em DEBUG"""
    logger.remove()
    logger.add(
        sys.stderr,
        colorize=True,
        format="<green>{time:HH:mm:ss}</green> | <level>{message}</level>",
        level=level or settings.LOG_LEVEL,
    )
    logger.add(log_file or settings.LOG_FILE, rotation=settings.LOG_ROTATION, level="DEBUG", compression="zip")


################################# Config #####################################

def parse_config(data: Any) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("experiment config must be a mapping")
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid experiment config: {e}") from e


def load_config(path) -> ExperimentConfig:
    """
    Lê e valida um config YAML (schema_version 1)

    Args:
        path: caminho do arquivo

    Returns:
        ExperimentConfig
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config file is not valid YAML: {e}") from e
    config = parse_config(data)
    logger.debug("Loaded config '{}' from {}", config.name, path)
    return config


################################# Domain #####################################

def build_schedule_set(topology: TopologySpec) -> ScheduleSet:
    if topology.kind == "crossbar":
        return CrossbarScheduleSet(topology.n)
    return ExplicitScheduleSet(topology.schedules)


def rate_vector(rates, schedule_set: ScheduleSet, name: str = "rates") -> np.ndarray:
    vector = np.asarray(rates, dtype=np.float64).reshape(-1)
    if vector.shape[0] != schedule_set.dimension:
        raise ConfigurationError(f"{name} has {vector.shape[0]} entries, expected {schedule_set.dimension}")
    return vector


def flow_index(flow: Sequence[int], schedule_set: ScheduleSet) -> int:
    """Fluxo 1-indexado ([linha, coluna] no crossbar, [fila] ou [fila, 1] no explícito) -> índice"""
    if isinstance(schedule_set, CrossbarScheduleSet):
        if len(flow) != 2:
            raise ConfigurationError("crossbar flows are given as [row, col]")
        row, col = flow
        if not (1 <= row <= schedule_set.n and 1 <= col <= schedule_set.n):
            raise ConfigurationError(f"flow {list(flow)} outside a {schedule_set.n}x{schedule_set.n} crossbar")
        return (row - 1) * schedule_set.n + (col - 1)
    if len(flow) not in (1, 2) or (len(flow) == 2 and flow[1] != 1):
        raise ConfigurationError("explicit-set flows are given as [queue]")
    if not 1 <= flow[0] <= schedule_set.dimension:
        raise ConfigurationError(f"queue {flow[0]} outside 1..{schedule_set.dimension}")
    return flow[0] - 1


def policy_blueprint(spec: PolicySpec, schedule_set: ScheduleSet) -> PolicyBlueprint:
    """Traduz um PolicySpec (1-indexado) para a receita do simulador (0-indexada)"""
    options: Dict[str, Any] = {}
    learner: Dict[str, Any] = {}
    if spec.kind in ("syl", "syl_tokens"):
        learner = {"max_iters": spec.max_iters or settings.FW_MAX_ITERS,
                   "gap_tol": spec.gap_tol or settings.FW_GAP_TOL}
        if spec.objective is not None:
            learner["objective"] = spec.objective
        if spec.center is not None:
            learner["center"] = rate_vector(spec.center, schedule_set, "center")
        if spec.modulus is not None:
            learner["modulus"] = spec.modulus
        options["refresh_tol"] = spec.refresh_tol or settings.DECOMPOSITION_REFRESH_TOL
    if spec.kind == "syl_tokens":
        if spec.sensitive_flow is None:
            raise ConfigurationError("syl_tokens needs a sensitive_flow")
        options["budget"] = spec.budget
        options["sensitive_flow"] = flow_index(spec.sensitive_flow, schedule_set)
    if spec.kind == "priority" and spec.order is not None:
        if sorted(spec.order) != list(range(1, schedule_set.dimension + 1)):
            raise ConfigurationError(f"priority order must be a permutation of 1..{schedule_set.dimension}")
        options["order"] = [queue - 1 for queue in spec.order]
    if spec.kind == "randomized_known" and spec.target is not None:
        options["target"] = rate_vector(spec.target, schedule_set, "target")
    return PolicyBlueprint(kind=spec.kind, name=spec.name, options=options, learner=learner)


def build_experiment(config: ExperimentConfig) -> Tuple[ScheduleSet, np.ndarray, List[PolicyBlueprint]]:
    """(conjunto de schedules, taxa base achatada, receitas das políticas)"""
    schedule_set = build_schedule_set(config.topology)
    base = rate_vector(config.traffic.rates, schedule_set)
    blueprints = [policy_blueprint(spec, schedule_set) for spec in config.policies]
    return schedule_set, base, blueprints


def run_experiment(config: ExperimentConfig) -> List[SimResult]:
    """Todas as políticas do config sobre o mesmo caminho de chegadas"""
    schedule_set, base, blueprints = build_experiment(config)
    traffic = TrafficSpec.scaled(base, config.traffic.tau, config.traffic.normalizer)
    sim = SimConfig(schedule_set, traffic, blueprints[0], config.horizon, config.seed, config.warmup)
    return simulation_service.compare(sim, blueprints)


def tau_grid(tau_from: float, tau_to: float, step: float) -> List[float]:
    if step <= 0:
        raise ConfigurationError("tau step must be positive")
    if tau_from < 0 or tau_to < tau_from:
        raise ConfigurationError("tau range needs 0 <= tau_from <= tau_to")
    count = int(math.floor((tau_to - tau_from) / step + 1e-9))
    return [round(tau_from + i * step, 12) for i in range(count + 1)]


################################# Output #####################################

def output_root() -> Path:
    return Path(settings.SYL_SIM_OUT)


def prepare_output_dir(out, force: bool = False) -> Path:
    """Cria o diretório de saída; um diretório não vazio só é substituído com force"""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigurationError(f"output directory {out} is not empty (use --force to overwrite)")
        logger.warning("Overwriting output directory {}", out)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_manifest(out: Path, command: str, config_path: Optional[str], seed: Optional[int]) -> Dict[str, Any]:
    manifest = {
        "command": command,
        "config": str(config_path) if config_path is not None else None,
        "seed": seed,
        "output_dir": str(out),
        "version": VERSION,
        "environment": settings.ENVIRONMENT,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def config_echo(config: ExperimentConfig) -> Dict[str, Any]:
    return json.loads(config.json())


def write_result(directory: Path, config: ExperimentConfig, result: SimResult) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(directory / "backlog_trace.csv", result.trace_frame())
    write_csv(directory / "delays.csv", result.delays_frame())
    write_json(directory / "summary.json", {"config": config_echo(config), **result.summary()})


def write_run(out: Path, config: ExperimentConfig, results: Sequence[SimResult]) -> None:
    """Um resultado: arquivos na raiz; vários: um subdiretório por política mais o relatório comum"""
    if len(results) == 1:
        write_result(out, config, results[0])
    else:
        for result in results:
            write_result(out / result.policy, config, result)
    write_csv(out / "delay_report.csv", simulation_service.delay_report(results, slot_scale=config.delay_scale))
    write_csv(out / "mean_delays.csv", simulation_service.mean_delays(results))


BACKLOG_SCRIPT = """set datafile separator ','
set key autotitle columnhead
set xlabel 'slot'
set ylabel 'aggregate backlog'
plot {plots}
"""

DELAY_SCRIPT = """set datafile separator ','
set xlabel 'delay'
set ylabel 'probability'
set logscale y
plot {plots}
"""

SWEEP_SCRIPT = """set datafile separator ','
set xlabel 'tau'
set ylabel 'mean aggregate backlog'
set logscale y
plot {plots}
"""


def write_plot_scripts(out: Path, results: Sequence[SimResult] = (), sweep_policies: Sequence[str] = ()) -> List[Path]:
    """Scripts gnuplot lendo os CSVs gerados"""
    written = []
    if results:
        if len(results) == 1:
            traces = ["'backlog_trace.csv' using 1:2 with lines title '{}'".format(results[0].policy)]
        else:
            traces = [f"'{r.policy}/backlog_trace.csv' using 1:2 with lines title '{r.policy}'" for r in results]
        delays = [
            f"'delay_report.csv' using (strcol(1) eq '{r.policy}' ? $4 : 1/0):6 with points title '{r.policy}'"
            for r in results
        ]
        for name, template, plots in (("backlog.gp", BACKLOG_SCRIPT, traces), ("delays.gp", DELAY_SCRIPT, delays)):
            path = out / name
            path.write_text(template.format(plots=", ".join(plots)), encoding="utf-8")
            written.append(path)
    if sweep_policies:
        plots = [
            f"'sweep_summary.csv' using (strcol(2) eq '{p}' ? $1 : 1/0):5:6 with yerrorlines title '{p}'"
            for p in sweep_policies
        ]
        path = out / "sweep.gp"
        path.write_text(SWEEP_SCRIPT.format(plots=", ".join(plots)), encoding="utf-8")
        written.append(path)
    return written


################################# Commands #####################################

def execute_run(config: ExperimentConfig, out, config_path: Optional[str] = None,
                force: bool = False, plot_scripts: bool = False) -> List[SimResult]:
    """Valida o domínio, escreve o manifesto, simula e grava os resultados"""
    build_experiment(config)
    out = prepare_output_dir(out, force)
    write_manifest(out, "run", config_path, config.seed)
    results = run_experiment(config)
    write_run(out, config, results)
    if plot_scripts:
        write_plot_scripts(out, results=results)
    logger.info("Run written to {}", out)
    return results


def execute_sweep(config: ExperimentConfig, out, taus: Sequence[float], seeds: Sequence[int],
                  policies: Optional[Sequence[str]] = None, jobs: int = 1, config_path: Optional[str] = None,
                  force: bool = False, plot_scripts: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Varredura tau x política x seed; grava sweep.csv e sweep_summary.csv"""
    schedule_set, base, blueprints = build_experiment(config)
    if policies:
        known = {blueprint.label for blueprint in blueprints}
        unknown = [name for name in policies if name not in known]
        if unknown:
            raise ConfigurationError(f"policies {unknown} are not defined in the config (have {sorted(known)})")
        blueprints = [blueprint for blueprint in blueprints if blueprint.label in policies]
    if not taus:
        raise ConfigurationError("sweep needs at least one tau value")
    if not seeds:
        raise ConfigurationError("sweep needs at least one seed")
    out = prepare_output_dir(out, force)
    write_manifest(out, "sweep", config_path, list(seeds)[0])
    table, summary = simulation_service.sweep_tau(
        base, taus, schedule_set, blueprints, config.horizon, seeds=seeds,
        normalizer=config.traffic.normalizer, warmup=config.warmup, jobs=jobs,
    )
    write_csv(out / "sweep.csv", table)
    write_csv(out / "sweep_summary.csv", summary)
    if plot_scripts:
        write_plot_scripts(out, sweep_policies=[blueprint.label for blueprint in blueprints])
    logger.info("Sweep written to {} ({} failed cells)", out, int((table["status"] != "ok").sum()))
    return table, summary


def read_matrix(path) -> np.ndarray:
    """Matriz n x n em texto, uma linha por linha da matriz, separada por espaços"""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"matrix file not found: {path}")
    try:
        matrix = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise ConfigurationError(f"matrix file {path} is not numeric: {e}") from e
    return check_matrix(matrix)


def check_matrix(matrix) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
        raise ConfigurationError(f"matrix must be square, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)) or np.any(matrix < 0):
        raise ConfigurationError("matrix entries must be finite and non-negative")
    return matrix


def decompose_report(matrix, lam=None) -> Dict[str, Any]:
    """
    Pertinência, decomposição de Birkhoff e, se lam for dado, a margem de capacidade

    Args:
        matrix: matriz n x n
        lam: taxa de chegadas n x n (opcional)

    Returns:
        Dicionário com member, terms, residual e eta_star
    """
    matrix = check_matrix(matrix)
    schedule_set = CrossbarScheduleSet(matrix.shape[0])
    report: Dict[str, Any] = {"member": polytope_service.membership(matrix, schedule_set,
                                                                     tol=settings.MEMBERSHIP_TOL),
                              "terms": [], "residual": None, "eta_star": None}
    if report["member"]:
        combination = polytope_service.birkhoff_decompose(matrix, schedule_set)
        n = schedule_set.n
        report["terms"] = [
            {"weight": weight, "schedule": schedule.reshape(n, n).tolist()} for schedule, weight in combination.terms()
        ]
        report["residual"] = combination.residual
    if lam is not None:
        lam = check_matrix(lam)
        if lam.shape != matrix.shape:
            raise ConfigurationError("lam must have the same shape as the matrix")
        margin = polytope_service.capacity_margin(lam, schedule_set, tol=settings.MARGIN_BISECTION_TOL)
        report["eta_star"] = margin.eta_star
        report["feasible"] = margin.feasible
    return report


def format_decomposition(report: Dict[str, Any]) -> str:
    lines = [f"member: {'yes' if report['member'] else 'no'}"]
    if report.get("eta_star") is not None:
        lines.append(f"capacity margin eta*: {report['eta_star']:.6f}")
    for term in report["terms"]:
        rows = [" ".join(str(x) for x in row) for row in term["schedule"]]
        lines.append(f"theta = {term['weight']:.12f}")
        lines.extend(f"  {row}" for row in rows)
    if report["residual"] is not None:
        lines.append(f"terms: {len(report['terms'])}  residual: {report['residual']:.3e}")
    return "\n".join(lines)
