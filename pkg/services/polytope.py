"""
Serviço de operações sobre conv(S): pertinência, margem de capacidade,
decomposição convexa (Birkhoff e genérica) e oráculo linear
"""
from dataclasses import dataclass
from itertools import permutations
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import linprog

from services.errors import ConfigurationError, DecompositionError, DomainError, NumericError
from services.matching import BRUTE_FORCE_MAX_N, matching_service, perm_to_matrix


MEMBERSHIP_TOL = 1e-9
SUPPORT_THRESHOLD = 1e-10
RESIDUAL_FLOOR = 1e-8
PEEL_THRESHOLD = 1e-14
BALANCE_TOL = 1e-13
BALANCE_MAX_ITERS = 200
SIMPLEX_ACCEPT_RESIDUAL = 1e-6
SIMPLEX_MAX_ITERS = 100_000
SIMPLEX_IMPROVEMENT_TOL = 1e-12
MAX_EXPLICIT_SCHEDULES = 10_000


def schedule_key(schedule: np.ndarray) -> Tuple[int, ...]:
    """Chave hashable e ordenável de um schedule"""
    return tuple(int(x) for x in schedule)


class ScheduleSet:
    """Conjunto discreto de ações S; cada schedule é um vetor inteiro de comprimento `dimension`"""

    kind = "abstract"
    dimension = 0

    def zero_schedule(self) -> np.ndarray:
        return np.zeros(self.dimension, dtype=np.int64)

    def vertices(self) -> np.ndarray:
        raise NotImplementedError

    def flow_label(self, flow: int) -> Tuple[int, int]:
        raise NotImplementedError


class CrossbarScheduleSet(ScheduleSet):
    """
    Crossbar n x n: as n! matrizes de permutação mais a matriz nula, achatadas
    em vetores de comprimento n^2. Nunca materializado por inteiro.
    """

    kind = "crossbar"

    def __init__(self, n: int):
        if n < 1:
            raise ConfigurationError("crossbar size must be at least 1")
        self.n = n
        self.dimension = n * n

    def vertices(self) -> np.ndarray:
        if self.n > BRUTE_FORCE_MAX_N:
            raise ConfigurationError(f"refusing to enumerate {self.n}! schedules")
        rows = [perm_to_matrix(np.asarray(p)).reshape(-1) for p in permutations(range(self.n))]
        rows.append(self.zero_schedule())
        return np.vstack(rows)

    def flow_label(self, flow: int) -> Tuple[int, int]:
        # rótulos 1-indexados (fluxo 1-2 = entrada 1 -> saída 2)
        return flow // self.n + 1, flow % self.n + 1

    def __repr__(self) -> str:
        return f"CrossbarScheduleSet(n={self.n})"


class ExplicitScheduleSet(ScheduleSet):
    """Lista explícita de schedules; o schedule nulo é sempre incluído"""

    kind = "explicit"

    def __init__(self, schedules: Sequence[Sequence[int]]):
        matrix = np.asarray(schedules, dtype=np.int64)
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise ConfigurationError("explicit schedule set needs a non-empty list of vectors")
        if np.any(matrix < 0):
            raise ConfigurationError("schedules must be non-negative")
        if len({schedule_key(row) for row in matrix}) != matrix.shape[0]:
            raise ConfigurationError("schedules must be distinct")
        zero_rows = np.flatnonzero(~matrix.any(axis=1))
        if zero_rows.size == 0:
            logger.debug("Appending the idle schedule to the explicit schedule set")
            matrix = np.vstack([matrix, np.zeros(matrix.shape[1], dtype=np.int64)])
            zero_rows = np.array([matrix.shape[0] - 1])
        if matrix.shape[0] > MAX_EXPLICIT_SCHEDULES:
            raise ConfigurationError(f"explicit schedule set larger than {MAX_EXPLICIT_SCHEDULES}")
        self.schedules = matrix
        self.dimension = matrix.shape[1]
        self.zero_index = int(zero_rows[0])

    def vertices(self) -> np.ndarray:
        return self.schedules.copy()

    def flow_label(self, flow: int) -> Tuple[int, int]:
        return flow + 1, 1

    def __len__(self) -> int:
        return self.schedules.shape[0]

    def __repr__(self) -> str:
        return f"ExplicitScheduleSet({self.schedules.tolist()})"


@dataclass
class ConvexCombination:
    """Pesos theta_j >= 0 (soma 1) sobre schedules; linha j de `schedules` é s_j"""
    schedules: np.ndarray
    weights: np.ndarray
    residual: float = 0.0

    def __len__(self) -> int:
        return len(self.weights)

    def reconstruct(self) -> np.ndarray:
        return self.weights @ self.schedules

    def error(self, mu) -> float:
        """Erro de reconstrução em norma l-infinito"""
        return float(np.max(np.abs(self.reconstruct() - np.asarray(mu, dtype=np.float64).reshape(-1))))

    def sample_index(self, u: float) -> int:
        """Inversa da CDF: primeiro j com soma acumulada > u"""
        cumulative = np.cumsum(self.weights)
        index = int(np.searchsorted(cumulative, u, side="right"))
        return min(index, len(self.weights) - 1)

    def terms(self) -> List[Tuple[np.ndarray, float]]:
        return [(self.schedules[j], float(self.weights[j])) for j in range(len(self.weights))]


@dataclass
class CapacityMargin:
    eta_star: float
    feasible: bool


def project_onto_simplex(v: np.ndarray) -> np.ndarray:
    """Projeção euclidiana no simplex unitário (algoritmo por ordenação)"""
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1.0
    ranks = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - cumulative / ranks > 0)[-1]
    theta = cumulative[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def balance_line_sums(matrix: np.ndarray, tol: float = BALANCE_TOL,
                      max_iters: int = BALANCE_MAX_ITERS) -> np.ndarray:
    """
    Reescala linhas e colunas alternadamente (Sinkhorn-Knopp) até todas as somas
    valerem 1. O suporte não muda; para uma matriz já quase duplamente estocástica
    a correção tem a ordem do desvio das somas.
    """
    balanced = np.array(matrix, dtype=np.float64)
    for _ in range(max_iters):
        balanced /= balanced.sum(axis=1, keepdims=True)
        balanced /= balanced.sum(axis=0, keepdims=True)
        if float(np.max(np.abs(balanced.sum(axis=1) - 1.0))) <= tol:
            break
    return balanced


class PolytopeService:
    """Operações sobre o politopo de schedules conv(S)"""

    def _check_dimension(self, mu, schedule_set: ScheduleSet) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        if mu.shape[0] != schedule_set.dimension:
            raise ConfigurationError(f"rate vector has length {mu.shape[0]}, expected {schedule_set.dimension}")
        return mu

    def _line_sums(self, mu: np.ndarray, n: int) -> np.ndarray:
        matrix = mu.reshape(n, n)
        return np.concatenate([matrix.sum(axis=1), matrix.sum(axis=0)])

    def membership(self, mu, schedule_set: ScheduleSet, tol: float = MEMBERSHIP_TOL) -> bool:
        """
        Verifica se mu pertence a conv(S)

        Args:
            mu: vetor de taxas
            schedule_set: conjunto de schedules
            tol: tolerância

        Returns:
            True se mu está em conv(S)
        """
        mu = self._check_dimension(mu, schedule_set)
        if isinstance(schedule_set, CrossbarScheduleSet):
            if np.any(mu < -tol):
                return False
            sums = self._line_sums(mu, schedule_set.n)
            common = sums.mean()
            return bool(np.all(np.abs(sums - common) <= tol) and common <= 1.0 + tol)
        _, residual = self._simplex_least_squares(mu, schedule_set)
        return residual <= tol

    def dominated(self, x, schedule_set: ScheduleSet, tol: float = MEMBERSHIP_TOL) -> bool:
        """
        Região de capacidade: x <= mu para algum mu em conv(S)

        Args:
            x: vetor de taxas
            schedule_set: conjunto de schedules
            tol: tolerância

        Returns:
            True se x é dominado por algum ponto de conv(S)
        """
        x = self._check_dimension(x, schedule_set)
        if np.any(x < -tol):
            return False
        if isinstance(schedule_set, CrossbarScheduleSet):
            return bool(np.all(self._line_sums(x, schedule_set.n) <= 1.0 + tol))
        vertices = schedule_set.schedules.astype(np.float64)
        m = vertices.shape[0]
        result = linprog(
            c=np.zeros(m),
            A_ub=-vertices.T,
            b_ub=-x + tol,
            A_eq=np.ones((1, m)),
            b_eq=np.array([1.0]),
            bounds=[(0, None)] * m,
            method="highs",
        )
        return result.status == 0

    def capacity_margin(self, lam, schedule_set: ScheduleSet, tol: float = 1e-6, eta_hi: float = 1.0) -> CapacityMargin:
        """
        Maior eta com lambda + eta*1 na região de capacidade, por bisseção

        Args:
            lam: taxa de chegadas
            schedule_set: conjunto de schedules
            tol: largura final do intervalo da bisseção
            eta_hi: limite superior (1 basta para schedules 0/1)

        Returns:
            CapacityMargin
        """
        lam = self._check_dimension(lam, schedule_set)
        if np.any(lam < 0):
            raise ConfigurationError("arrival rates must be non-negative")
        if not self.dominated(lam, schedule_set):
            logger.info("Arrival rate lies outside the capacity region")
            return CapacityMargin(eta_star=0.0, feasible=False)
        ones = np.ones_like(lam)
        if self.dominated(lam + eta_hi * ones, schedule_set):
            return CapacityMargin(eta_star=eta_hi, feasible=True)
        lo, hi = 0.0, eta_hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.dominated(lam + mid * ones, schedule_set):
                lo = mid
            else:
                hi = mid
        return CapacityMargin(eta_star=lo, feasible=True)

    def birkhoff_decompose(self, mu, schedule_set: CrossbarScheduleSet) -> ConvexCombination:
        """
        Birkhoff-von Neumann guloso sobre mu/t, mais o schedule nulo com peso 1 - t

        Args:
            mu: ponto de conv(S) (matriz n x n achatada)
            schedule_set: crossbar

        Returns:
            ConvexCombination com no máximo (n-1)^2 + 1 permutações
        """
        if not isinstance(schedule_set, CrossbarScheduleSet):
            raise ConfigurationError("Birkhoff decomposition needs a crossbar schedule set")
        mu = self._check_dimension(mu, schedule_set)
        if not self.membership(mu, schedule_set):
            raise DomainError("rate matrix is not in conv(S)")
        n = schedule_set.n
        rows = np.arange(n)
        matrix = np.clip(mu.reshape(n, n), 0.0, None)
        t = float(matrix.sum(axis=1).mean())
        zero = schedule_set.zero_schedule()
        if t <= RESIDUAL_FLOOR:
            return ConvexCombination(schedules=zero[None, :], weights=np.ones(1))

        remainder = balance_line_sums(matrix / t)
        schedules: List[np.ndarray] = []
        weights: List[float] = []
        while True:
            mass = float(remainder.sum(axis=1).max())
            if mass <= PEEL_THRESHOLD:
                break
            perm = matching_service.support_perfect_matching(remainder > PEEL_THRESHOLD)
            if perm is None:
                if mass <= RESIDUAL_FLOOR:
                    break
                raise DecompositionError("no perfect matching on the remaining support", mass)
            entries = remainder[rows, perm]
            lowest = int(np.argmin(entries))
            weight = float(entries[lowest])
            remainder[rows, perm] -= weight
            remainder[lowest, perm[lowest]] = 0.0
            remainder[remainder < PEEL_THRESHOLD] = 0.0
            schedules.append(perm_to_matrix(perm).reshape(-1))
            weights.append(weight)

        scaled = np.asarray(weights) * t
        zero_weight = 0.0 if t > 1.0 - MEMBERSHIP_TOL else 1.0 - t
        if zero_weight > 0:
            schedules.append(zero)
            scaled = np.append(scaled, zero_weight)
        scaled = scaled / scaled.sum()
        combination = ConvexCombination(schedules=np.vstack(schedules), weights=scaled)
        combination.residual = combination.error(mu)
        if combination.residual > RESIDUAL_FLOOR:
            raise DecompositionError("Birkhoff reconstruction above the residual floor", combination.residual)
        logger.debug("Birkhoff decomposition: {} terms, residual {:.2e}", len(combination), combination.residual)
        return combination

    def _simplex_least_squares(self, mu: np.ndarray, schedule_set: ExplicitScheduleSet,
                               max_iters: int = SIMPLEX_MAX_ITERS,
                               improvement_tol: float = SIMPLEX_IMPROVEMENT_TOL) -> Tuple[np.ndarray, float]:
        vertices = schedule_set.schedules.astype(np.float64)
        m = vertices.shape[0]
        theta = np.full(m, 1.0 / m)
        lipschitz = float(np.linalg.eigvalsh(vertices @ vertices.T).max())
        if lipschitz > 0:
            step = 1.0 / lipschitz
            objective = 0.5 * float(np.sum((theta @ vertices - mu) ** 2))
            for _ in range(max_iters):
                gradient = vertices @ (theta @ vertices - mu)
                theta = project_onto_simplex(theta - step * gradient)
                updated = 0.5 * float(np.sum((theta @ vertices - mu) ** 2))
                improvement = objective - updated
                objective = updated
                if improvement < improvement_tol or objective == 0.0:
                    break
        theta = self._polish_on_support(theta, vertices, mu)
        residual = float(np.max(np.abs(theta @ vertices - mu)))
        return theta, residual

    def _polish_on_support(self, theta: np.ndarray, vertices: np.ndarray, mu: np.ndarray) -> np.ndarray:
        # mínimos quadrados com restrição de igualdade no suporte atual (sistema KKT)
        support = np.flatnonzero(theta > 1e-12)
        active = vertices[support]
        k = len(support)
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = active @ active.T
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.append(active @ mu, 1.0)
        solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
        if np.any(solution < -1e-12):
            return theta
        polished = np.zeros_like(theta)
        polished[support] = np.clip(solution, 0.0, None)
        if polished.sum() <= 0:
            return theta
        polished /= polished.sum()
        if np.sum((polished @ vertices - mu) ** 2) <= np.sum((theta @ vertices - mu) ** 2):
            return polished
        return theta

    def simplex_decompose(self, mu, schedule_set: ExplicitScheduleSet) -> ConvexCombination:
        """
        Mínimos quadrados no simplex: min ||sum theta_j s_j - mu||^2, theta >= 0, sum theta = 1,
        por gradiente projetado

        Args:
            mu: ponto a decompor
            schedule_set: conjunto explícito

        Returns:
            ConvexCombination com o resíduo reportado
        """
        if not isinstance(schedule_set, ExplicitScheduleSet):
            raise ConfigurationError("simplex decomposition needs an explicit schedule set")
        mu = self._check_dimension(mu, schedule_set)
        theta, residual = self._simplex_least_squares(mu, schedule_set)
        if residual > SIMPLEX_ACCEPT_RESIDUAL:
            raise DomainError(f"rate vector outside conv(S) (least-squares residual {residual:.3e})")
        keep = theta > 0
        return ConvexCombination(schedules=schedule_set.schedules[keep], weights=theta[keep], residual=residual)

    def decompose(self, mu, schedule_set: ScheduleSet) -> ConvexCombination:
        if isinstance(schedule_set, CrossbarScheduleSet):
            return self.birkhoff_decompose(mu, schedule_set)
        return self.simplex_decompose(mu, schedule_set)

    def lmo(self, direction, schedule_set: ScheduleSet) -> np.ndarray:
        """
        argmax_{s em S} <direction, s>; empates com o schedule nulo devolvem o nulo

        Args:
            direction: vetor de pesos
            schedule_set: conjunto de schedules

        Returns:
            schedule (vetor inteiro)
        """
        direction = self._check_dimension(direction, schedule_set)
        if not np.all(np.isfinite(direction)):
            raise NumericError("linear oracle called with a non-finite direction")
        if isinstance(schedule_set, CrossbarScheduleSet):
            n = schedule_set.n
            perm, value = matching_service.max_weight_perfect_matching(direction.reshape(n, n))
            if value > 0:
                return perm_to_matrix(perm).reshape(-1)
            return schedule_set.zero_schedule()
        values = schedule_set.schedules @ direction
        best = values.max()
        if values[schedule_set.zero_index] >= best:
            return schedule_set.schedules[schedule_set.zero_index].copy()
        return schedule_set.schedules[int(np.argmax(values))].copy()


# Instância global do serviço
polytope_service = PolytopeService()
