"""
Serviço de políticas de escalonamento: SYL, SYL com tokens, randomizada com
lambda conhecido, max-weight, delay max-weight e prioridade
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from services.errors import ConfigurationError, SchedulingError
from services.learner import DualAveragingLearner, LearnerConfig
from services.matching import matching_service, perm_to_matrix
from services.polytope import (
    SUPPORT_THRESHOLD,
    ConvexCombination,
    CrossbarScheduleSet,
    ExplicitScheduleSet,
    ScheduleSet,
    polytope_service,
    schedule_key,
)
from services.queueing import QueueSystem


POLICY_KINDS = ("syl", "syl_tokens", "randomized_known", "max_weight", "delay_max_weight", "priority")
DECOMPOSITION_REFRESH_TOL = 1e-6


def sample_combination(combination: ConvexCombination, u: float) -> np.ndarray:
    """Schedule s_j escolhido pela inversa da CDF no sorteio uniforme u"""
    return combination.schedules[combination.sample_index(u)].copy()


def randomized_known_select(combination: ConvexCombination, rng: np.random.Generator) -> np.ndarray:
    """Prob(S_k = s_j) = theta_j"""
    return sample_combination(combination, rng.random())


def _argmax_schedule(weights: np.ndarray, schedule_set: ScheduleSet) -> np.ndarray:
    if isinstance(schedule_set, CrossbarScheduleSet):
        n = schedule_set.n
        perm, _ = matching_service.max_weight_perfect_matching(weights.reshape(n, n).astype(np.float64))
        return perm_to_matrix(perm).reshape(-1)
    values = schedule_set.schedules @ weights
    return schedule_set.schedules[int(np.argmax(values))].copy()


def max_weight_select(q, schedule_set: ScheduleSet) -> np.ndarray:
    """
    Max-weight: matching de peso máximo com os backlogs como pesos.
    A permutação crua é mantida; serviço sobre filas vazias é desperdiçado na fila.
    """
    return _argmax_schedule(np.asarray(q).reshape(-1), schedule_set)


def delay_max_weight_select(hol_delays, schedule_set: ScheduleSet) -> np.ndarray:
    """Mesmo argmax do max-weight com as esperas head-of-line como pesos"""
    return _argmax_schedule(np.asarray(hol_delays).reshape(-1), schedule_set)


def _single_queue_schedules(schedule_set: ScheduleSet) -> Dict[int, np.ndarray]:
    if not isinstance(schedule_set, ExplicitScheduleSet):
        raise ConfigurationError("priority policy needs an explicit schedule set")
    serving = {}
    for schedule in schedule_set.schedules:
        nonzero = np.flatnonzero(schedule)
        if len(nonzero) == 1 and schedule[nonzero[0]] == 1:
            serving[int(nonzero[0])] = schedule.copy()
    return serving


def priority_select(q, order: Sequence[int], schedule_set: ScheduleSet) -> np.ndarray:
    """
    Serve a fila não vazia de maior prioridade; ocioso se todas estão vazias

    Args:
        q: backlog
        order: índices de fila (0-indexados), do mais prioritário ao menos
        schedule_set: conjunto explícito com schedules de fila única

    Returns:
        schedule
    """
    serving = _single_queue_schedules(schedule_set)
    q = np.asarray(q).reshape(-1)
    for flow in order:
        if q[flow] > 0:
            if flow not in serving:
                raise ConfigurationError(f"no single-queue schedule serves queue {flow + 1}")
            return serving[flow].copy()
    return schedule_set.zero_schedule()


class SchedulingPolicy:
    """Interface comum: um schedule por slot a partir das chegadas e do estado das filas"""

    kind = "abstract"

    def __init__(self, schedule_set: ScheduleSet, name: Optional[str] = None):
        self.schedule_set = schedule_set
        self.name = name or self.kind

    def select(self, slot: int, arrivals: np.ndarray, queues: QueueSystem) -> np.ndarray:
        raise NotImplementedError

    def snapshot(self) -> Dict[str, Any]:
        return {"kind": self.kind, "name": self.name}


class MaxWeightPolicy(SchedulingPolicy):
    kind = "max_weight"

    def select(self, slot, arrivals, queues):
        return max_weight_select(queues.backlog, self.schedule_set)


class DelayMaxWeightPolicy(SchedulingPolicy):
    kind = "delay_max_weight"

    def select(self, slot, arrivals, queues):
        return delay_max_weight_select(queues.hol_delays(slot), self.schedule_set)


class PriorityPolicy(SchedulingPolicy):
    kind = "priority"

    def __init__(self, schedule_set: ScheduleSet, order: Sequence[int], name: Optional[str] = None):
        super().__init__(schedule_set, name)
        serving = _single_queue_schedules(schedule_set)
        missing = [flow + 1 for flow in order if flow not in serving]
        if missing:
            raise ConfigurationError(f"no single-queue schedule for queues {missing}")
        self.order = list(order)

    def select(self, slot, arrivals, queues):
        return priority_select(queues.backlog, self.order, self.schedule_set)

    def snapshot(self):
        return {**super().snapshot(), "order": [flow + 1 for flow in self.order]}


class RandomizedKnownPolicy(SchedulingPolicy):
    """Política randomizada com lambda conhecido: combinação fixa, sorteada a cada slot"""

    kind = "randomized_known"

    def __init__(self, schedule_set: ScheduleSet, combination: ConvexCombination,
                 rng: np.random.Generator, name: Optional[str] = None):
        super().__init__(schedule_set, name)
        self.combination = combination
        self.rng = rng

    @classmethod
    def from_rates(cls, schedule_set: ScheduleSet, rates, rng: np.random.Generator,
                   target=None, name: Optional[str] = None) -> "RandomizedKnownPolicy":
        """mu = alvo explícito, ou lambda + eta* 1 pela margem de capacidade"""
        if target is None:
            margin = polytope_service.capacity_margin(rates, schedule_set)
            if not margin.feasible:
                raise ConfigurationError("known-rate policy needs arrival rates inside the capacity region")
            target = np.asarray(rates, dtype=np.float64).reshape(-1) + margin.eta_star
            logger.info("Known-rate policy target: lambda + {:.6f}", margin.eta_star)
        combination = polytope_service.decompose(target, schedule_set)
        return cls(schedule_set, combination, rng, name)

    def select(self, slot, arrivals, queues):
        return randomized_known_select(self.combination, self.rng)

    def snapshot(self):
        return {**super().snapshot(), "terms": len(self.combination)}


class SYLPolicy(SchedulingPolicy):
    """
    Schedule as You Learn: observa A_k, avança o aprendiz, decompõe a média
    móvel e sorteia um schedule com probabilidade theta_j
    """

    kind = "syl"

    def __init__(self, schedule_set: ScheduleSet, learner_config: LearnerConfig,
                 rng: np.random.Generator, name: Optional[str] = None,
                 refresh_tol: float = DECOMPOSITION_REFRESH_TOL):
        super().__init__(schedule_set, name)
        if isinstance(schedule_set, ExplicitScheduleSet):
            learner_config.track_combination = True
        self.learner = DualAveragingLearner(schedule_set, learner_config)
        self.rng = rng
        self.refresh_tol = refresh_tol
        self.combination: Optional[ConvexCombination] = None
        self.decompositions = 0
        self._decomposed_target: Optional[np.ndarray] = None

    @property
    def target(self) -> np.ndarray:
        """Alvo da randomização: mu_bar (modo slack: média móvel de mu_hat)"""
        return self.learner.state.mu_bar

    def refresh_combination(self) -> ConvexCombination:
        target = self.target
        stale = (
            self._decomposed_target is None
            or float(np.max(np.abs(target - self._decomposed_target))) > self.refresh_tol
        )
        if stale:
            if isinstance(self.schedule_set, ExplicitScheduleSet):
                self.combination = self.learner.running_combination()
            else:
                self.combination = polytope_service.decompose(target, self.schedule_set)
            self._decomposed_target = target.copy()
            self.decompositions += 1
        return self.combination

    def learn_and_sample(self, arrivals: np.ndarray) -> np.ndarray:
        self.learner.step(arrivals)
        self.refresh_combination()
        return randomized_known_select(self.combination, self.rng)

    def select(self, slot, arrivals, queues):
        return self.learn_and_sample(arrivals)

    def snapshot(self):
        return {**super().snapshot(), "decompositions": self.decompositions, "learner": self.learner.snapshot()}


@dataclass
class TokenState:
    """Reserva de tokens e tokens alocados por schedule; reserva + alocados = orçamento"""
    budget: int
    sensitive_flow: int
    reserve: int = 0
    per_schedule: Dict[Tuple[int, ...], int] = field(default_factory=dict)
    schedules: Dict[Tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigurationError("token budget must be non-negative")
        self.reserve = self.budget

    def allocated(self) -> int:
        return sum(self.per_schedule.values())

    def conserved(self) -> bool:
        return self.reserve + self.allocated() == self.budget and 0 <= self.reserve <= self.budget

    def allocate(self, schedule: np.ndarray) -> None:
        key = schedule_key(schedule)
        self.reserve -= 1
        self.per_schedule[key] = self.per_schedule.get(key, 0) + 1
        self.schedules.setdefault(key, schedule.copy())

    def repay(self) -> np.ndarray:
        """Devolve um token do schedule com mais tokens (empate: menor schedule)"""
        key = max(sorted(self.per_schedule), key=lambda k: self.per_schedule[k])
        self.per_schedule[key] -= 1
        if self.per_schedule[key] == 0:
            del self.per_schedule[key]
        self.reserve += 1
        return self.schedules[key].copy()


class SYLTokenPolicy(SYLPolicy):
    """
    Variante do SYL que reserva tokens para schedules que servem um fluxo sensível
    """

    kind = "syl_tokens"

    def __init__(self, schedule_set: ScheduleSet, learner_config: LearnerConfig,
                 rng: np.random.Generator, budget: int, sensitive_flow: int,
                 name: Optional[str] = None, refresh_tol: float = DECOMPOSITION_REFRESH_TOL):
        super().__init__(schedule_set, learner_config, rng, name, refresh_tol)
        if not 0 <= sensitive_flow < schedule_set.dimension:
            raise ConfigurationError(f"sensitive flow index {sensitive_flow} out of range")
        self.tokens = TokenState(budget=budget, sensitive_flow=sensitive_flow)
        self.overrides = 0
        self.repayments = 0

    def _serving_schedule(self) -> Optional[np.ndarray]:
        """
        Schedule usado num override: sorteado dos termos da combinação que servem o
        fluxo sensível, com probabilidade proporcional ao peso. Assim o override tem a
        mesma lei que um s_rand que serve o fluxo, e a troca override/repagamento
        mantém a taxa média de serviço.
        """
        flow = self.tokens.sensitive_flow
        combination = self.combination
        serving = np.flatnonzero((combination.schedules[:, flow] > 0) & (combination.weights > 0))
        if serving.size:
            weights = combination.weights[serving]
            pick = serving[int(self.rng.choice(serving.size, p=weights / weights.sum()))]
            return combination.schedules[pick].copy()
        target = self.target
        if isinstance(self.schedule_set, CrossbarScheduleSet):
            n = self.schedule_set.n
            row, col = divmod(flow, n)
            support = target.reshape(n, n) > SUPPORT_THRESHOLD
            support[row, :] = False
            support[:, col] = False
            support[row, col] = True
            perm = matching_service.support_perfect_matching(support)
            return None if perm is None else perm_to_matrix(perm).reshape(-1)
        candidates = self.schedule_set.schedules[self.schedule_set.schedules[:, flow] > 0]
        if candidates.shape[0] == 0:
            return None
        return candidates[int(np.argmax(candidates @ target))].copy()

    def select(self, slot, arrivals, queues):
        s_rand = self.learn_and_sample(arrivals)
        tokens = self.tokens
        flow = tokens.sensitive_flow
        serves = s_rand[flow] > 0
        waiting = queues.backlog[flow] > 0
        chosen = s_rand

        if waiting and tokens.reserve > 0 and not serves:
            override = self._serving_schedule()
            if override is not None:
                tokens.allocate(s_rand)
                self.overrides += 1
                chosen = override
        elif not waiting and serves and tokens.per_schedule:
            chosen = tokens.repay()
            self.repayments += 1

        if not tokens.conserved():
            raise SchedulingError(
                f"token conservation violated: reserve={tokens.reserve} allocated={tokens.allocated()}"
            )
        return chosen

    def snapshot(self):
        return {
            **super().snapshot(),
            "budget": self.tokens.budget,
            "reserve": self.tokens.reserve,
            "overrides": self.overrides,
            "repayments": self.repayments,
        }


def build_policy(kind: str, schedule_set: ScheduleSet, rng: np.random.Generator,
                 name: Optional[str] = None, rates=None, learner_config: Optional[LearnerConfig] = None,
                 budget: int = 100, sensitive_flow: int = 0, order: Optional[Sequence[int]] = None,
                 target=None, refresh_tol: float = DECOMPOSITION_REFRESH_TOL) -> SchedulingPolicy:
    """
    Constrói uma política pelo nome usado nos configs

    Args:
        kind: um de POLICY_KINDS
        schedule_set: conjunto de schedules
        rng: stream aleatório próprio da política

    Returns:
        SchedulingPolicy
    """
    if kind not in POLICY_KINDS:
        raise ConfigurationError(f"unknown policy '{kind}', expected one of {POLICY_KINDS}")
    if kind in ("syl", "syl_tokens") and learner_config is None:
        learner_config = LearnerConfig(dimension=schedule_set.dimension)
    if kind == "syl":
        return SYLPolicy(schedule_set, learner_config, rng, name, refresh_tol)
    if kind == "syl_tokens":
        return SYLTokenPolicy(schedule_set, learner_config, rng, budget, sensitive_flow, name, refresh_tol)
    if kind == "randomized_known":
        if rates is None and target is None:
            raise ConfigurationError("randomized_known needs traffic rates or an explicit target")
        return RandomizedKnownPolicy.from_rates(schedule_set, rates, rng, target=target, name=name)
    if kind == "max_weight":
        return MaxWeightPolicy(schedule_set, name)
    if kind == "delay_max_weight":
        return DelayMaxWeightPolicy(schedule_set, name)
    if order is None:
        order = list(range(schedule_set.dimension))[::-1]
    return PriorityPolicy(schedule_set, order, name)
