"""
Núcleo de filas em tempo discreto: recursão Q_{k+1} = [Q_k + A_k - S_k]^+,
registro FIFO de pacotes e métricas de estabilidade
"""
from collections import Counter, deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from services.errors import ConfigurationError, SlotRangeError


# slack para comparações de drift em ponto flutuante
DRIFT_TOL = 1e-12


@dataclass
class PacketRecord:
    """Pacote unitário de um fluxo (fila)"""
    flow: int
    arrival_slot: int
    departure_slot: Optional[int] = None

    @property
    def pending(self) -> bool:
        return self.departure_slot is None

    @property
    def delay(self) -> Optional[int]:
        if self.departure_slot is None:
            return None
        return self.departure_slot - self.arrival_slot


def _as_vector(values, n: int, name: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.int64).reshape(-1)
    if vector.shape[0] != n:
        raise ConfigurationError(f"{name} has length {vector.shape[0]}, expected {n}")
    return vector


def queue_update(q: Sequence[int], arrivals: Sequence[int], service: Sequence[int]) -> np.ndarray:
    """
    Atualização pura de uma fila: [q + arrivals - service]^+ componente a componente

    Args:
        q: backlog atual (n inteiros não negativos)
        arrivals: chegadas do slot (n inteiros >= 0)
        service: schedule do slot (n inteiros >= 0)

    Returns:
        Novo backlog
    """
    q = np.asarray(q, dtype=np.int64).reshape(-1)
    n = q.shape[0]
    arrivals = _as_vector(arrivals, n, "arrivals")
    service = _as_vector(service, n, "service")
    if np.any(arrivals < 0):
        raise ConfigurationError("arrivals must be non-negative")
    return np.maximum(q + arrivals - service, 0)


class StabilityTrace:
    """
    Backlog agregado (norma l1 de Q_k) por slot, com somas acumuladas exatas
    para a média de longo prazo
    """

    def __init__(self):
        self.totals: List[int] = []
        self._cumulative: List[int] = []

    def __len__(self) -> int:
        return len(self.totals)

    def record(self, backlog: np.ndarray) -> int:
        total = int(np.sum(backlog))
        previous = self._cumulative[-1] if self._cumulative else 0
        self.totals.append(total)
        self._cumulative.append(previous + total)
        return total

    def running_mean(self) -> np.ndarray:
        """(1/k) * soma_{i<=k} ||Q_i||_1 para todo k"""
        if not self.totals:
            return np.zeros(0)
        cumulative = np.asarray(self._cumulative, dtype=np.float64)
        return cumulative / np.arange(1, len(cumulative) + 1)

    def cumulative(self, k: int) -> int:
        return self._cumulative[k - 1]


def stability_metric(trace: StabilityTrace, k: int) -> float:
    """
    Média temporal do backlog agregado até o slot k

    Args:
        trace: trace da simulação
        k: slot (1-indexado)

    Returns:
        (1/k) * soma_{i=1..k} ||Q_i||_1
    """
    if k < 1 or k > len(trace):
        raise SlotRangeError(f"slot {k} outside recorded range 1..{len(trace)}")
    return trace.cumulative(k) / k


def drift_diagnostic(expected_arrival, expected_service, eta: float) -> bool:
    """
    Condição de drift negativo E[Z_k] = lambda - mu <= -eta * 1

    Args:
        expected_arrival: taxa média de chegadas
        expected_service: taxa média de serviço
        eta: margem positiva

    Returns:
        True se a condição vale em todas as coordenadas
    """
    arrival = np.asarray(expected_arrival, dtype=np.float64).reshape(-1)
    service = np.asarray(expected_service, dtype=np.float64).reshape(-1)
    if arrival.shape != service.shape:
        raise ConfigurationError("arrival and service rates must have the same dimension")
    if eta <= 0:
        raise ConfigurationError("eta must be positive")
    return bool(np.all(arrival - service <= -eta + DRIFT_TOL))


def plateau_ratio(trace: Union[StabilityTrace, Sequence[int]], fraction: float = 0.1) -> float:
    """
    Razão entre o backlog médio nos últimos `fraction` slots e nos `fraction` anteriores.
    Critério de estabilidade em escala de bancada: razão dentro de [0.5, 2].

    Returns:
        Razão; 1.0 quando ambas as janelas são nulas, inf quando só a anterior é nula
    """
    totals = np.asarray(trace.totals if isinstance(trace, StabilityTrace) else trace, dtype=np.float64)
    window = int(len(totals) * fraction)
    if window < 1:
        raise SlotRangeError("trace too short for the plateau criterion")
    last = totals[-window:].mean()
    previous = totals[-2 * window:-window].mean()
    if previous == 0:
        return 1.0 if last == 0 else float("inf")
    return float(last / previous)


def is_plateau(trace: Union[StabilityTrace, Sequence[int]], factor: float = 2.0) -> bool:
    ratio = plateau_ratio(trace)
    return 1.0 / factor <= ratio <= factor


def growth_ratio(trace: Union[StabilityTrace, Sequence[int]], fraction: float = 0.25) -> float:
    """
    Razão entre o backlog médio no último `fraction` do horizonte e no segundo
    bloco do mesmo tamanho. Crescimento linear a partir de zero dá cerca de 2.33;
    um regime estacionário fica perto de 1.

    Returns:
        Razão; 1.0 quando ambas as janelas são nulas, inf quando só a de referência é nula
    """
    totals = np.asarray(trace.totals if isinstance(trace, StabilityTrace) else trace, dtype=np.float64)
    window = int(len(totals) * fraction)
    if window < 1 or 2 * window > len(totals):
        raise SlotRangeError("trace too short for the growth criterion")
    last = totals[-window:].mean()
    reference = totals[window:2 * window].mean()
    if reference == 0:
        return 1.0 if last == 0 else float("inf")
    return float(last / reference)


class QueueSystem:
    """
    Máquina de estados das n filas com contabilidade por pacote.

    Dentro de um slot as chegadas entram no fim da fila antes do serviço,
    então o serviço alcança chegadas do mesmo slot (atraso mínimo 0).
    """

    def __init__(self, n: int, warmup: int = 0, keep_records: bool = False):
        if n < 1:
            raise ConfigurationError("a queue system needs at least one queue")
        self.n = n
        self.warmup = warmup
        self.keep_records = keep_records
        self.backlog = np.zeros(n, dtype=np.int64)
        self.arrived = np.zeros(n, dtype=np.int64)
        self.departed = np.zeros(n, dtype=np.int64)
        self.excluded = np.zeros(n, dtype=np.int64)
        self.delay_histograms: List[Counter] = [Counter() for _ in range(n)]
        self.completed_records: List[PacketRecord] = []
        self._fifo: List[Deque[PacketRecord]] = [deque() for _ in range(n)]

    def enqueue(self, arrivals, slot: int) -> None:
        arrivals = _as_vector(arrivals, self.n, "arrivals")
        if np.any(arrivals < 0):
            raise ConfigurationError("arrivals must be non-negative")
        for flow in np.flatnonzero(arrivals):
            flow = int(flow)
            fifo = self._fifo[flow]
            for _ in range(int(arrivals[flow])):
                fifo.append(PacketRecord(flow, slot))
        self.arrived += arrivals
        self.backlog += arrivals

    def serve(self, service, slot: int) -> np.ndarray:
        """Remove até service_j pacotes da cabeça de cada fila; serviço excedente é perdido"""
        service = _as_vector(service, self.n, "service")
        served = np.minimum(np.maximum(service, 0), self.backlog)
        for flow in np.flatnonzero(served):
            flow = int(flow)
            fifo = self._fifo[flow]
            histogram = self.delay_histograms[flow]
            for _ in range(int(served[flow])):
                record = fifo.popleft()
                record.departure_slot = slot
                if record.arrival_slot > self.warmup:
                    histogram[slot - record.arrival_slot] += 1
                else:
                    self.excluded[flow] += 1
                if self.keep_records:
                    self.completed_records.append(record)
        self.departed += served
        self.backlog -= served
        return served

    def update(self, arrivals, service, slot: int) -> np.ndarray:
        self.enqueue(arrivals, slot)
        self.serve(service, slot)
        return self.backlog.copy()

    def hol_delays(self, slot: int) -> np.ndarray:
        """Espera do pacote na cabeça de cada fila; 0 para filas vazias"""
        delays = np.zeros(self.n, dtype=np.int64)
        for flow, fifo in enumerate(self._fifo):
            if fifo:
                delays[flow] = slot - fifo[0].arrival_slot
        return delays

    def pending_records(self, flow: int) -> List[PacketRecord]:
        return list(self._fifo[flow])

    def check_conservation(self) -> bool:
        """chegadas = partidas + backlog, e backlog = pacotes pendentes, por fila"""
        conserved = np.array_equal(self.arrived, self.departed + self.backlog)
        consistent = all(len(fifo) == int(q) for fifo, q in zip(self._fifo, self.backlog))
        if not (conserved and consistent):
            logger.error("Queue bookkeeping mismatch: arrived={} departed={} backlog={}",
                         self.arrived.tolist(), self.departed.tolist(), self.backlog.tolist())
        return conserved and consistent

    def snapshot(self) -> Dict[str, List[int]]:
        return {
            "backlog": self.backlog.tolist(),
            "arrived": self.arrived.tolist(),
            "departed": self.departed.tolist(),
        }
