"""
Serviço de simulação em tempo discreto: chegadas Bernoulli -> política -> filas,
traces de backlog, histogramas de atraso por fluxo e varreduras em tau
"""
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from services.errors import ConfigurationError, SchedulingError, SimulationAborted
from services.learner import LearnerConfig
from services.policies import POLICY_KINDS, SchedulingPolicy, build_policy
from services.polytope import ScheduleSet
from services.queueing import QueueSystem, StabilityTrace, growth_ratio, is_plateau, plateau_ratio, stability_metric


ARRIVALS_STREAM = "arrivals"
GROWTH_LIMIT = 1.5


def stream_rng(seed: int, label: str) -> np.random.Generator:
    """Stream independente por (seed, rótulo); o rótulo 'arrivals' é comum a todas as políticas"""
    if seed < 0:
        raise ConfigurationError("seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


@dataclass
class TrafficSpec:
    """Probabilidades Bernoulli por fila (crossbar: matriz n x n achatada)"""
    bernoulli_rates: np.ndarray

    def __post_init__(self):
        rates = np.asarray(self.bernoulli_rates, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(rates)) or np.any(rates < 0) or np.any(rates > 1):
            raise ConfigurationError("Bernoulli rates must lie in [0, 1]")
        self.bernoulli_rates = rates

    @classmethod
    def scaled(cls, base, tau: float, normalizer: float = 1.0) -> "TrafficSpec":
        """Taxas tau * (base / normalizer)"""
        if tau < 0:
            raise ConfigurationError("tau must be non-negative")
        if normalizer <= 0:
            raise ConfigurationError("normalizer must be positive")
        return cls(tau * np.asarray(base, dtype=np.float64).reshape(-1) / normalizer)

    @property
    def dimension(self) -> int:
        return self.bernoulli_rates.shape[0]


@dataclass
class PolicyBlueprint:
    """Receita de uma política: tipo, rótulo, opções do construtor e do aprendiz"""
    kind: str
    name: Optional[str] = None
    options: Dict[str, Any] = field(default_factory=dict)
    learner: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"unknown policy '{self.kind}', expected one of {POLICY_KINDS}")

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class SimConfig:
    schedule_set: ScheduleSet
    traffic: TrafficSpec
    policy: PolicyBlueprint
    horizon: int
    seed: int = 0
    warmup: int = 0
    keep_records: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if self.warmup < 0:
            raise ConfigurationError("warmup must be non-negative")
        if self.traffic.dimension != self.schedule_set.dimension:
            raise ConfigurationError(
                f"traffic has {self.traffic.dimension} rates, schedule set has dimension {self.schedule_set.dimension}"
            )


@dataclass
class SimResult:
    """Resultado de uma execução: trace, histogramas e contagens por fluxo"""
    policy: str
    kind: str
    seed: int
    horizon: int
    trace: StabilityTrace
    delay_histograms: List[Dict[int, int]]
    arrived: np.ndarray
    departed: np.ndarray
    pending: np.ndarray
    excluded: np.ndarray
    flow_labels: List[Tuple[int, int]]
    policy_snapshot: Dict[str, Any]
    learner_snapshot: Optional[Dict[str, Any]] = None
    wall_time: float = 0.0

    @property
    def completed(self) -> np.ndarray:
        """Pacotes servidos que entram nos histogramas (fora do warmup)"""
        return np.asarray([sum(h.values()) for h in self.delay_histograms], dtype=np.int64)

    @property
    def mean_backlog(self) -> float:
        return stability_metric(self.trace, self.horizon)

    @property
    def final_backlog(self) -> int:
        return self.trace.totals[-1]

    def plateau(self) -> Optional[float]:
        try:
            ratio = plateau_ratio(self.trace)
        except SchedulingError:
            return None
        return ratio if math.isfinite(ratio) else None

    def growth(self) -> Optional[float]:
        try:
            ratio = growth_ratio(self.trace)
        except SchedulingError:
            return None
        return ratio if math.isfinite(ratio) else None

    def is_stable(self, growth_limit: float = GROWTH_LIMIT) -> bool:
        """Platô nas duas últimas janelas e sem crescimento do segundo ao último quarto"""
        growth = self.growth()
        return growth is not None and growth <= growth_limit and is_plateau(self.trace)

    def mean_delay(self, flow: int) -> float:
        histogram = self.delay_histograms[flow]
        total = sum(histogram.values())
        if total == 0:
            return float("nan")
        return sum(delay * count for delay, count in histogram.items()) / total

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "slot": np.arange(1, len(self.trace) + 1, dtype=np.int64),
            "total_backlog": np.asarray(self.trace.totals, dtype=np.int64),
        })

    def delays_frame(self) -> pd.DataFrame:
        rows = []
        for flow, histogram in enumerate(self.delay_histograms):
            row, col = self.flow_labels[flow]
            for delay in sorted(histogram):
                rows.append((row, col, int(delay), int(histogram[delay])))
        return pd.DataFrame(rows, columns=["flow_row", "flow_col", "delay_slots", "count"])

    def summary(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "kind": self.kind,
            "seed": self.seed,
            "horizon": self.horizon,
            "mean_backlog": self.mean_backlog,
            "final_backlog": self.final_backlog,
            "plateau_ratio": self.plateau(),
            "growth_ratio": self.growth(),
            "arrived": self.arrived.tolist(),
            "departed": self.departed.tolist(),
            "pending": self.pending.tolist(),
            "excluded_warmup": self.excluded.tolist(),
            "mean_delay": [None if math.isnan(d) else d for d in map(self.mean_delay, range(len(self.arrived)))],
            "policy_state": self.policy_snapshot,
            "learner": self.learner_snapshot,
            "wall_time": self.wall_time,
        }


@dataclass
class SweepCell:
    schedule_set: ScheduleSet
    base_rates: np.ndarray
    tau: float
    normalizer: float
    policy: PolicyBlueprint
    horizon: int
    seed: int
    warmup: int = 0


def _run_sweep_cell(cell: SweepCell) -> Dict[str, Any]:
    row = {"tau": cell.tau, "policy": cell.policy.label, "seed": cell.seed}
    try:
        traffic = TrafficSpec.scaled(cell.base_rates, cell.tau, cell.normalizer)
        config = SimConfig(cell.schedule_set, traffic, cell.policy, cell.horizon, cell.seed, cell.warmup)
        result = simulation_service.run(config)
    except (SchedulingError, ValueError) as e:
        logger.error("Sweep cell tau={} policy={} seed={} failed: {}", cell.tau, cell.policy.label, cell.seed, str(e))
        return {**row, "mean_backlog": float("nan"), "final_backlog": float("nan"),
                "plateau_ratio": float("nan"), "status": "failed", "error": str(e)}
    plateau = result.plateau()
    return {**row, "mean_backlog": result.mean_backlog, "final_backlog": float(result.final_backlog),
            "plateau_ratio": float("nan") if plateau is None else plateau, "status": "ok", "error": ""}


class SimulationService:
    """Driver slot a slot e agregações de resultados"""

    def generate_arrivals(self, traffic: TrafficSpec, rng: np.random.Generator) -> np.ndarray:
        """Um sorteio Bernoulli independente por fila: no máximo 1 pacote por fila por slot"""
        return (rng.random(traffic.dimension) < traffic.bernoulli_rates).astype(np.int64)

    def build_policy(self, blueprint: PolicyBlueprint, schedule_set: ScheduleSet,
                     traffic: TrafficSpec, seed: int) -> SchedulingPolicy:
        learner_config = None
        if blueprint.kind in ("syl", "syl_tokens"):
            learner_config = LearnerConfig(dimension=schedule_set.dimension, **blueprint.learner)
        return build_policy(
            blueprint.kind,
            schedule_set,
            stream_rng(seed, blueprint.label),
            name=blueprint.label,
            rates=traffic.bernoulli_rates,
            learner_config=learner_config,
            **blueprint.options,
        )

    def run(self, config: SimConfig) -> SimResult:
        """
        Executa uma política por `horizon` slots.
        Em cada slot: chegadas -> enfileiramento -> seleção -> serviço -> registro.

        Args:
            config: SimConfig

        Returns:
            SimResult (determinístico dado o seed)
        """
        schedule_set, traffic = config.schedule_set, config.traffic
        policy = self.build_policy(config.policy, schedule_set, traffic, config.seed)
        arrivals_rng = stream_rng(config.seed, ARRIVALS_STREAM)
        queues = QueueSystem(schedule_set.dimension, warmup=config.warmup, keep_records=config.keep_records)
        trace = StabilityTrace()
        logger.info("Running policy '{}' for {} slots (seed {})", policy.name, config.horizon, config.seed)

        start = time.perf_counter()
        for slot in range(1, config.horizon + 1):
            arrivals = self.generate_arrivals(traffic, arrivals_rng)
            try:
                queues.enqueue(arrivals, slot)
                schedule = policy.select(slot, arrivals, queues)
                queues.serve(schedule, slot)
            except (SchedulingError, FloatingPointError) as e:
                logger.error("Policy '{}' aborted at slot {}: {}", policy.name, slot, str(e))
                raise SimulationAborted(str(e), slot, state=self._state_dump(queues, policy)) from e
            if not queues.check_conservation():
                raise SimulationAborted("packet conservation violated", slot, state=self._state_dump(queues, policy))
            trace.record(queues.backlog)
        wall_time = time.perf_counter() - start

        snapshot = policy.snapshot()
        result = SimResult(
            policy=policy.name,
            kind=policy.kind,
            seed=config.seed,
            horizon=config.horizon,
            trace=trace,
            delay_histograms=[dict(h) for h in queues.delay_histograms],
            arrived=queues.arrived.copy(),
            departed=queues.departed.copy(),
            pending=queues.backlog.copy(),
            excluded=queues.excluded.copy(),
            flow_labels=[schedule_set.flow_label(flow) for flow in range(schedule_set.dimension)],
            policy_snapshot={key: value for key, value in snapshot.items() if key != "learner"},
            learner_snapshot=snapshot.get("learner"),
            wall_time=wall_time,
        )
        logger.info("Policy '{}' done in {:.2f}s: mean backlog {:.3f}", policy.name, wall_time, result.mean_backlog)
        return result

    def _state_dump(self, queues: QueueSystem, policy: SchedulingPolicy) -> Dict[str, Any]:
        return {"queues": queues.snapshot(), "policy": policy.snapshot()}

    def compare(self, config: SimConfig, policies: Sequence[PolicyBlueprint]) -> List[SimResult]:
        """Várias políticas sobre o mesmo caminho de chegadas (números aleatórios comuns)"""
        labels = [p.label for p in policies]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"policy names must be unique, got {labels}")
        return [self.run(replace(config, policy=blueprint)) for blueprint in policies]

    def sweep_tau(self, base_rates, taus: Sequence[float], schedule_set: ScheduleSet,
                  policies: Sequence[PolicyBlueprint], horizon: int, seeds: Sequence[int] = (0,),
                  normalizer: float = 1.0, warmup: int = 0, jobs: int = 1) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """
        Varre tau x política x seed com taxas tau * base / normalizer

        Args:
            base_rates: taxa base (lambda da Eq. de referência por padrão no config)
            taus: valores de tau (>= 0)
            schedule_set: conjunto de schedules
            policies: políticas a comparar
            horizon: slots por execução
            seeds: seeds por célula
            normalizer: divisor da taxa base
            warmup: slots fora das estatísticas de atraso
            jobs: processos paralelos

        Returns:
            (tabela por célula, tabela agregada com média e erro padrão)
        """
        if any(tau < 0 for tau in taus):
            raise ConfigurationError("tau values must be non-negative")
        if jobs < 1:
            raise ConfigurationError("jobs must be at least 1")
        base_rates = np.asarray(base_rates, dtype=np.float64).reshape(-1)
        cells = [
            SweepCell(schedule_set, base_rates, float(tau), normalizer, blueprint, horizon, int(seed), warmup)
            for tau in taus for blueprint in policies for seed in seeds
        ]
        logger.info("Sweeping {} cells with {} job(s)", len(cells), jobs)
        if jobs == 1:
            rows = [_run_sweep_cell(cell) for cell in cells]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(_run_sweep_cell, cells))
        table = pd.DataFrame(rows, columns=["tau", "policy", "seed", "mean_backlog", "final_backlog",
                                            "plateau_ratio", "status", "error"])
        return table, self.summarize_sweep(table)

    def summarize_sweep(self, table: pd.DataFrame) -> pd.DataFrame:
        rows = []
        for (tau, policy), group in table.groupby(["tau", "policy"], sort=True):
            ok = group[group["status"] == "ok"]["mean_backlog"]
            stderr = float(ok.std(ddof=1) / math.sqrt(len(ok))) if len(ok) > 1 else 0.0
            rows.append({
                "tau": tau,
                "policy": policy,
                "runs": int(len(ok)),
                "failures": int(len(group) - len(ok)),
                "mean_backlog": float(ok.mean()) if len(ok) else float("nan"),
                "stderr": stderr,
            })
        return pd.DataFrame(rows, columns=["tau", "policy", "runs", "failures", "mean_backlog", "stderr"])

    def delay_report(self, results: Sequence[SimResult], slot_scale: float = 1.0) -> pd.DataFrame:
        """
        Histogramas normalizados (contagem / pacotes completados) por fluxo e política

        Args:
            results: resultados com a mesma topologia
            slot_scale: divisor opcional dos atrasos (1 = slots crus)

        Returns:
            DataFrame policy, flow_row, flow_col, delay, count, probability
        """
        if slot_scale <= 0:
            raise ConfigurationError("slot_scale must be positive")
        if results and any(r.flow_labels != results[0].flow_labels for r in results):
            raise ConfigurationError("delay report needs results sharing one topology")
        rows = []
        for result in results:
            for flow, histogram in enumerate(result.delay_histograms):
                total = sum(histogram.values())
                row, col = result.flow_labels[flow]
                for delay in sorted(histogram):
                    count = histogram[delay]
                    rows.append((result.policy, row, col, delay / slot_scale, int(count), count / total))
        return pd.DataFrame(rows, columns=["policy", "flow_row", "flow_col", "delay", "count", "probability"])

    def mean_delays(self, results: Sequence[SimResult]) -> pd.DataFrame:
        rows = []
        for result in results:
            completed = result.completed
            for flow in range(len(result.delay_histograms)):
                row, col = result.flow_labels[flow]
                rows.append((result.policy, row, col, int(completed[flow]), result.mean_delay(flow)))
        return pd.DataFrame(rows, columns=["policy", "flow_row", "flow_col", "completed", "mean_delay"])


# Instância global do serviço
simulation_service = SimulationService()
