"""
Serviço de aprendizado da taxa média de serviço por dual averaging de Nesterov
aplicado ao dual de Lagrange: atualização do estado dual, argmin interno sobre
conv(S), média móvel mu_bar_k e diagnósticos dos limites teóricos
"""
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from services.errors import ConfigurationError, DomainError, NumericError
from services.polytope import (
    ConvexCombination,
    ScheduleSet,
    polytope_service,
    schedule_key,
)


OBJECTIVES = ("quadratic", "slack")
# f(gamma) = gamma^2 - gamma é 2-fortemente convexa
SLACK_MODULUS = 2.0
BERNOULLI_SUPPORT_MAX_DIM = 16


@dataclass
class LearnerConfig:
    """
    Configuração do aprendiz.

    objective "quadratic": f(u) = (m/2)||u - c||^2, argmin interno por Frank-Wolfe.
    objective "slack": mu = mu_hat - gamma*1 com f(gamma) = gamma^2 - gamma.
    Prox fixo phi(u) = ||u||^2/2 (sigma = 1) e passo alpha_k = 1/sqrt(k).
    """
    dimension: int
    objective: str = "slack"
    center: Optional[np.ndarray] = None
    modulus: float = 1.0
    sigma: float = 1.0
    max_iters: int = 200
    gap_tol: float = 1e-6
    track_combination: bool = False
    record_history: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown learner objective '{self.objective}'")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be at least 1")
        if self.gap_tol <= 0:
            raise ConfigurationError("gap_tol must be positive")
        if self.objective == "quadratic":
            if self.modulus <= 0:
                raise ConfigurationError("quadratic objective needs a positive modulus")
            if self.center is None:
                self.center = np.zeros(self.dimension)
            self.center = np.asarray(self.center, dtype=np.float64).reshape(-1)
            if self.center.shape[0] != self.dimension:
                raise ConfigurationError(f"center has length {self.center.shape[0]}, expected {self.dimension}")

    @property
    def strong_convexity(self) -> float:
        return self.modulus if self.objective == "quadratic" else SLACK_MODULUS


@dataclass
class LearnerState:
    """Estado do dual averaging; k é o índice do próximo passo (s_1 = 0, k = 1)"""
    s: np.ndarray
    weighted_sum: np.ndarray
    mu_bar: np.ndarray
    k: int = 1
    weight_total: float = 0.0
    last_mu: Optional[np.ndarray] = None
    last_mu_hat: Optional[np.ndarray] = None
    last_gamma: Optional[float] = None
    active: Optional[ConvexCombination] = None
    ledger: Dict[Tuple[int, ...], List[Any]] = field(default_factory=dict)
    history: List[Tuple[float, np.ndarray]] = field(default_factory=list)

    @classmethod
    def initial(cls, dimension: int) -> "LearnerState":
        return cls(
            s=np.zeros(dimension),
            weighted_sum=np.zeros(dimension),
            mu_bar=np.zeros(dimension),
        )


@dataclass
class BoundDiagnostics:
    """Constantes dos limites: B, margem eta, sigma e módulo m"""
    B: float
    eta: float
    sigma: float
    m: float

    def lemma2_bound(self, k: int) -> float:
        """B/(sigma*m) * (log k + 1)/sqrt(k)"""
        return self.B / (self.sigma * self.m) * (np.log(k) + 1.0) / np.sqrt(k)

    @property
    def tau(self) -> float:
        """(4B/(eta^2 sigma m))^2: a partir daí lambda - E[mu_bar_k] <= -(eta/2) 1"""
        return max(1.0, (4.0 * self.B / (self.eta ** 2 * self.sigma * self.m)) ** 2)

    def as_dict(self) -> Dict[str, float]:
        return {"B": self.B, "eta": self.eta, "sigma": self.sigma, "m": self.m, "tau": self.tau}


def dual_point(state: LearnerState) -> np.ndarray:
    """y = argmax_{v >= 0} <s, v> - ||v||^2/2 = [s]^+"""
    return np.maximum(state.s, 0.0)


def bernoulli_support(dimension: int) -> np.ndarray:
    """Todos os vetores de chegada 0/1 de uma dada dimensão"""
    if dimension > BERNOULLI_SUPPORT_MAX_DIM:
        raise ConfigurationError(f"refusing to enumerate 2^{dimension} arrival vectors")
    return np.asarray(list(product((0, 1), repeat=dimension)), dtype=np.float64)


class DualAveragingLearner:
    """Um estado de aprendizado por política; mutado por um único driver"""

    def __init__(self, schedule_set: ScheduleSet, config: LearnerConfig):
        if config.dimension != schedule_set.dimension:
            raise ConfigurationError("learner dimension does not match the schedule set")
        self.schedule_set = schedule_set
        self.config = config
        self.state = LearnerState.initial(config.dimension)

    # ----------------------------------------------------------------- inner problems

    def inner_argmin_quadratic(self, y: np.ndarray,
                               warm: Optional[ConvexCombination] = None) -> Tuple[np.ndarray, ConvexCombination]:
        """
        argmin_{u em conv(S)} (m/2)||u - c||^2 - <y, u> por Frank-Wolfe com passos de afastamento

        Args:
            y: ponto dual
            warm: conjunto ativo da iteração anterior (ponto de partida)

        Returns:
            (u, combinação convexa de schedules que representa u)
        """
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise NumericError("dual point has non-finite entries")
        cfg = self.config
        m, center = cfg.modulus, cfg.center

        if warm is None:
            keys = [schedule_key(self.schedule_set.zero_schedule())]
            vertices = [self.schedule_set.zero_schedule().astype(np.float64)]
            weights = np.ones(1)
        else:
            keys = [schedule_key(s) for s in warm.schedules]
            vertices = [s.astype(np.float64) for s in warm.schedules]
            weights = warm.weights.astype(np.float64).copy()

        x = weights @ np.vstack(vertices)
        for _ in range(cfg.max_iters):
            gradient = m * (x - center) - y
            v = polytope_service.lmo(-gradient, self.schedule_set).astype(np.float64)
            fw_gap = float(gradient @ (x - v))
            if fw_gap <= cfg.gap_tol:
                break
            active = np.vstack(vertices)
            away_values = active @ gradient
            away = int(np.argmax(away_values))
            away_gap = float(away_values[away] - gradient @ x)

            if fw_gap >= away_gap:
                direction = v - x
                max_step = 1.0
            else:
                direction = x - active[away]
                max_step = weights[away] / (1.0 - weights[away])
            norm = float(direction @ direction)
            if norm == 0.0:
                break
            step = min(max_step, -float(gradient @ direction) / (m * norm))
            if step <= 0.0:
                break

            if fw_gap >= away_gap:
                weights *= 1.0 - step
                key = schedule_key(v)
                if key in keys:
                    weights[keys.index(key)] += step
                else:
                    keys.append(key)
                    vertices.append(v)
                    weights = np.append(weights, step)
            else:
                weights *= 1.0 + step
                weights[away] -= step
            keep = weights > 1e-15
            if not np.all(keep):
                keys = [key for key, kept in zip(keys, keep) if kept]
                vertices = [vertex for vertex, kept in zip(vertices, keep) if kept]
                weights = weights[keep]
            weights /= weights.sum()
            x = weights @ np.vstack(vertices)

        combination = ConvexCombination(schedules=np.vstack(vertices).astype(np.int64), weights=weights)
        return x, combination

    def inner_argmin_slack(self, y: np.ndarray) -> Tuple[np.ndarray, float]:
        """
        Problema interno separável do modo slack

        Returns:
            (mu_hat = lmo(y), gamma = max(0, (1 - <y, 1>)/2))
        """
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise NumericError("dual point has non-finite entries")
        mu_hat = polytope_service.lmo(y, self.schedule_set)
        gamma = max(0.0, (1.0 - float(y.sum())) / 2.0)
        return mu_hat, gamma

    # ----------------------------------------------------------------------- update

    def step(self, arrivals) -> LearnerState:
        """
        Um passo: y_k = [s]^+, mu_k pelo argmin interno, s <- s + alpha_k (A_k - mu_k),
        e a média ponderada mu_bar_k
        """
        state, cfg = self.state, self.config
        arrivals = np.asarray(arrivals, dtype=np.float64).reshape(-1)
        if arrivals.shape[0] != cfg.dimension:
            raise ConfigurationError(f"arrivals have length {arrivals.shape[0]}, expected {cfg.dimension}")
        alpha = 1.0 / np.sqrt(state.k)
        y = dual_point(state)

        if cfg.objective == "quadratic":
            mu, combination = self.inner_argmin_quadratic(y, warm=state.active)
            state.active = combination
            tracked = mu
            state.last_mu = mu
        else:
            mu_hat, gamma = self.inner_argmin_slack(y)
            tracked = mu_hat.astype(np.float64)
            combination = ConvexCombination(schedules=mu_hat[None, :], weights=np.ones(1))
            # a média móvel acompanha mu_hat; o dual usa mu = mu_hat - gamma*1
            state.last_mu = tracked - gamma
            state.last_mu_hat = mu_hat
            state.last_gamma = gamma

        state.s = state.s + alpha * (arrivals - state.last_mu)
        state.weighted_sum = state.weighted_sum + alpha * tracked
        state.weight_total += alpha
        state.mu_bar = state.weighted_sum / state.weight_total

        if cfg.track_combination:
            for schedule, weight in combination.terms():
                key = schedule_key(schedule)
                if key in state.ledger:
                    state.ledger[key][1] += alpha * weight
                else:
                    state.ledger[key] = [schedule.copy(), alpha * weight]
        if cfg.record_history:
            state.history.append((alpha, tracked.copy()))
        state.k += 1
        return state

    def running_combination(self) -> ConvexCombination:
        """mu_bar como combinação convexa exata dos vértices visitados"""
        if not self.state.ledger:
            raise ConfigurationError("combination tracking is disabled or no step was taken")
        entries = sorted(self.state.ledger.items())
        schedules = np.vstack([entry[1][0] for entry in entries])
        weights = np.asarray([entry[1][1] for entry in entries]) / self.state.weight_total
        weights /= weights.sum()
        return ConvexCombination(schedules=schedules, weights=weights)

    def snapshot(self) -> Dict[str, Any]:
        state = self.state
        return {
            "objective": self.config.objective,
            "k": state.k,
            "s": state.s.tolist(),
            "weighted_sum": state.weighted_sum.tolist(),
            "weight_total": state.weight_total,
            "mu_bar": state.mu_bar.tolist(),
            "last_mu_hat": None if state.last_mu_hat is None else state.last_mu_hat.tolist(),
            "last_gamma": state.last_gamma,
        }

    def restore(self, snapshot: Dict[str, Any]) -> None:
        """Retoma a partir de um snapshot (s, k, weighted_sum, weight_total)"""
        state = LearnerState.initial(self.config.dimension)
        state.s = np.asarray(snapshot["s"], dtype=np.float64)
        state.k = int(snapshot["k"])
        state.weighted_sum = np.asarray(snapshot["weighted_sum"], dtype=np.float64)
        state.weight_total = float(snapshot["weight_total"])
        if state.weight_total > 0:
            state.mu_bar = state.weighted_sum / state.weight_total
        self.state = state


class LearnerDiagnosticsService:
    """Constantes dos limites teóricos em escala de bancada"""

    def bound_diagnostics(self, schedule_set: ScheduleSet, arrival_support, lam,
                          config: LearnerConfig) -> BoundDiagnostics:
        """
        B = (1/2) max_{mu em C, a em A} ||mu - a||^2 (máximo atingido em vértices de C),
        eta pela margem de capacidade

        Args:
            schedule_set: conjunto de schedules
            arrival_support: conjunto finito A de vetores de chegada
            lam: taxa média de chegadas
            config: configuração do aprendiz

        Returns:
            BoundDiagnostics
        """
        vertices = schedule_set.vertices().astype(np.float64)
        support = np.atleast_2d(np.asarray(arrival_support, dtype=np.float64))
        if support.shape[1] != schedule_set.dimension:
            raise ConfigurationError("arrival support dimension does not match the schedule set")
        distances = (
            np.sum(vertices ** 2, axis=1)[:, None]
            + np.sum(support ** 2, axis=1)[None, :]
            - 2.0 * vertices @ support.T
        )
        B = 0.5 * float(distances.max())
        margin = polytope_service.capacity_margin(lam, schedule_set)
        if not margin.feasible or margin.eta_star <= 0:
            raise DomainError("arrival rate is not in the interior of the capacity region")
        diagnostics = BoundDiagnostics(B=B, eta=margin.eta_star, sigma=config.sigma, m=config.strong_convexity)
        logger.debug("Bound diagnostics: {}", diagnostics.as_dict())
        return diagnostics


# Instância global do serviço
learner_diagnostics_service = LearnerDiagnosticsService()
