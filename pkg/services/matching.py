"""
Serviço de matching perfeito de peso máximo em grafos bipartidos n x n
"""
from itertools import permutations
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from services.errors import ConfigurationError


# enumeração exaustiva acima disso explode combinatorialmente
BRUTE_FORCE_MAX_N = 8


def perm_to_matrix(perm: np.ndarray) -> np.ndarray:
    """Materializa a permutação (linha -> coluna) como matriz 0/1"""
    n = len(perm)
    matrix = np.zeros((n, n), dtype=np.int64)
    matrix[np.arange(n), perm] = 1
    return matrix


def perm_weight(w: np.ndarray, perm: np.ndarray) -> float:
    # soma em ordem de linha, igual para o Hungarian e para a força bruta
    total = 0.0
    for row, col in enumerate(perm):
        total += float(w[row, col])
    return total


def _as_square(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
        raise ConfigurationError(f"weight matrix must be square and non-empty, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ConfigurationError("weight matrix has non-finite entries")
    return w


class MatchingService:
    """Kernel compartilhado por max-weight, oráculo linear e decomposição de Birkhoff"""

    def max_weight_perfect_matching(self, w) -> Tuple[np.ndarray, float]:
        """
        Matching perfeito de peso máximo (algoritmo de atribuição, O(n^3))

        Args:
            w: matriz de pesos n x n

        Returns:
            (perm, total) com perm[i] = coluna atribuída à linha i
        """
        w = _as_square(w)
        # linear_sum_assignment minimiza custo; maximizar w = minimizar -w
        rows, cols = linear_sum_assignment(-w)
        perm = np.empty(w.shape[0], dtype=np.int64)
        perm[rows] = cols
        return perm, perm_weight(w, perm)

    def brute_force_matching(self, w) -> Tuple[np.ndarray, float]:
        """
        Enumera as n! permutações; empates ficam com a lexicograficamente menor

        Args:
            w: matriz de pesos n x n com n <= 8

        Returns:
            (perm, total)
        """
        w = _as_square(w)
        n = w.shape[0]
        if n > BRUTE_FORCE_MAX_N:
            raise ConfigurationError(f"brute force refused for n={n} > {BRUTE_FORCE_MAX_N}")
        best_perm, best_weight = None, -np.inf
        for candidate in permutations(range(n)):
            weight = perm_weight(w, candidate)
            if weight > best_weight:
                best_perm, best_weight = candidate, weight
        return np.asarray(best_perm, dtype=np.int64), best_weight

    def support_perfect_matching(self, support) -> Optional[np.ndarray]:
        """
        Permutação usando apenas células permitidas, ou None se não existir

        Args:
            support: matriz booleana n x n

        Returns:
            perm ou None (violação de Hall)
        """
        support = np.asarray(support, dtype=bool)
        if support.ndim != 2 or support.shape[0] != support.shape[1]:
            raise ConfigurationError(f"support must be square, got shape {support.shape}")
        n = support.shape[0]
        weights = np.where(support, 1.0, -float(n))
        perm, total = self.max_weight_perfect_matching(weights)
        if total >= n - 0.5:
            return perm
        return None


# Instância global do serviço
matching_service = MatchingService()
