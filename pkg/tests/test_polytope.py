import pytest
import numpy as np
import sys
import os

# pytest app import fix
sys.path.append(os.path.abspath('.'))

from services.errors import ConfigurationError, DecompositionError, DomainError, NumericError
from services.matching import matching_service, perm_to_matrix
from services.polytope import (
    ConvexCombination,
    CrossbarScheduleSet,
    ExplicitScheduleSet,
    polytope_service,
    schedule_key,
)


################################ Fixtures #####################################################

@pytest.fixture
def crossbar():
    return CrossbarScheduleSet(3)


@pytest.fixture
def toy_set():
    """
    Fixture to return the two-queue server: serve queue 1, serve queue 2, or idle.
    """
    return ExplicitScheduleSet([[1, 0], [0, 1], [0, 0]])


@pytest.fixture
def lam():
    return np.array([[0.6, 0.3, 0.0], [0.1, 0.0, 0.8], [0.2, 0.6, 0.1]])


@pytest.fixture
def printed_combination():
    """
    Fixture to return the four permutations and weights 19/30, 6/30, 4/30, 1/30.
    """
    schedules = np.array([
        [[1, 0, 0], [0, 0, 1], [0, 1, 0]],
        [[0, 1, 0], [0, 0, 1], [1, 0, 0]],
        [[0, 1, 0], [1, 0, 0], [0, 0, 1]],
        [[0, 0, 1], [0, 1, 0], [1, 0, 0]],
    ]).reshape(4, 9)
    weights = np.array([19, 6, 4, 1]) / 30
    return ConvexCombination(schedules=schedules, weights=weights)


################################ Test #####################################################

def test_crossbar_membership(crossbar, lam):
    """
    Test membership through equal line sums not above one.
    """
    assert polytope_service.membership(lam, crossbar)
    assert polytope_service.membership(np.eye(3), crossbar)
    assert polytope_service.membership(np.zeros((3, 3)), crossbar)
    assert not polytope_service.membership(lam + np.diag([0.1, 0.0, 0.0]), crossbar)
    assert not polytope_service.membership(np.full((3, 3), 0.4), crossbar)
    negative = np.eye(3)
    negative[0, 1] = -0.1
    assert not polytope_service.membership(negative, crossbar)
    with pytest.raises(ConfigurationError):
        polytope_service.membership(np.eye(2), crossbar)


def test_dominance(crossbar, lam):
    """
    Test the capacity-region check on the crossbar.
    """
    assert polytope_service.dominated(lam, crossbar)
    assert polytope_service.dominated(np.diag([0.5, 0.0, 0.0]), crossbar)
    assert not polytope_service.dominated(lam + 0.2, crossbar)


def test_capacity_margin_crossbar(crossbar, lam):
    """
    Test that the margin of the 3x3 rate matrix is 1/30.
    """
    margin = polytope_service.capacity_margin(lam, crossbar)
    assert margin.feasible
    assert abs(margin.eta_star - 1 / 30) <= 5e-4
    assert abs(margin.eta_star - 1 / 30) <= 2e-6


def test_capacity_margin_edge_cases(crossbar, lam):
    """
    Test zero traffic and traffic beyond capacity.
    """
    zero = polytope_service.capacity_margin(np.zeros(9), crossbar)
    assert zero.feasible and abs(zero.eta_star - 1 / 3) <= 2e-6
    beyond = polytope_service.capacity_margin(lam * 1.02 / 0.9, crossbar)
    assert not beyond.feasible and beyond.eta_star == 0.0


def test_capacity_margin_explicit(toy_set):
    """
    Test the LP-based margin on the two-queue server.
    """
    margin = polytope_service.capacity_margin([0.3, 0.2], toy_set)
    assert margin.feasible
    assert abs(margin.eta_star - 0.25) <= 2e-6
    assert not polytope_service.capacity_margin([0.7, 0.4], toy_set).feasible


def test_printed_combination_reconstructs_mu(lam, printed_combination):
    """
    Test the fixed four-term combination against lambda + 1/30.
    """
    assert printed_combination.error(lam + 1 / 30) <= 1e-9


def test_birkhoff_decomposition_of_margin_target(crossbar, lam):
    """
    Test the decomposition of lambda + 1/30: convex, exact and at most five terms.
    """
    mu = lam + 1 / 30
    combination = polytope_service.birkhoff_decompose(mu, crossbar)
    assert abs(combination.weights.sum() - 1.0) <= 1e-9
    assert np.all(combination.weights > 0)
    assert combination.error(mu) <= 1e-9
    assert combination.residual <= 1e-9
    assert len(combination) <= 5
    for schedule in combination.schedules:
        matrix = schedule.reshape(3, 3)
        assert np.all(matrix.sum(axis=0) == 1) and np.all(matrix.sum(axis=1) == 1)


def test_birkhoff_identity(crossbar):
    """
    Test that the identity decomposes into itself with weight 1.
    """
    combination = polytope_service.birkhoff_decompose(np.eye(3), crossbar)
    assert len(combination) == 1
    assert combination.schedules[0].tolist() == np.eye(3, dtype=int).reshape(-1).tolist()
    assert combination.weights[0] == 1.0


def test_birkhoff_two_permutations(crossbar):
    """
    Test that half identity plus half a 3-cycle decomposes into exactly those two.
    """
    cycle = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    combination = polytope_service.birkhoff_decompose(0.5 * np.eye(3) + 0.5 * cycle, crossbar)
    keys = {schedule_key(s) for s in combination.schedules}
    assert keys == {schedule_key(np.eye(3, dtype=int).reshape(-1)), schedule_key(cycle.reshape(-1))}
    np.testing.assert_allclose(combination.weights, [0.5, 0.5], atol=1e-12)


def test_birkhoff_substochastic_adds_idle(crossbar):
    """
    Test that line sums below one put the remaining weight on the zero schedule.
    """
    combination = polytope_service.birkhoff_decompose(0.5 * np.eye(3), crossbar)
    weights = {schedule_key(s): w for s, w in combination.terms()}
    assert abs(weights[schedule_key(np.zeros(9, dtype=int))] - 0.5) <= 1e-12
    assert combination.error(0.5 * np.eye(3)) <= 1e-12

    zero = polytope_service.birkhoff_decompose(np.zeros((3, 3)), crossbar)
    assert len(zero) == 1 and not zero.schedules[0].any()


def test_birkhoff_rejects_non_member(crossbar):
    """
    Test that a matrix with unequal line sums is refused.
    """
    with pytest.raises(DomainError):
        polytope_service.birkhoff_decompose(np.array([[0.5, 0.5, 0], [0, 0.5, 0], [0, 0, 0.5]]), crossbar)


def test_simplex_decomposition(toy_set):
    """
    Test least-squares decomposition on the explicit set.
    """
    combination = polytope_service.simplex_decompose([0.3, 0.6], toy_set)
    assert combination.error([0.3, 0.6]) <= 1e-9
    assert abs(combination.weights.sum() - 1.0) <= 1e-9
    assert polytope_service.membership([0.3, 0.6], toy_set)
    assert not polytope_service.membership([0.6, 0.6], toy_set)
    with pytest.raises(DomainError):
        polytope_service.simplex_decompose([0.8, 0.8], toy_set)


def test_explicit_set_appends_idle():
    """
    Test that the zero schedule is always part of an explicit set.
    """
    schedule_set = ExplicitScheduleSet([[1, 0], [0, 1]])
    assert len(schedule_set) == 3
    assert not schedule_set.schedules[schedule_set.zero_index].any()
    with pytest.raises(ConfigurationError):
        ExplicitScheduleSet([[1, 0], [1, 0]])


def test_lmo_crossbar(crossbar):
    """
    Test the linear oracle on the crossbar, including ties with the zero schedule.
    """
    direction = np.diag([1.0, 2.0, 3.0]).reshape(-1)
    assert polytope_service.lmo(direction, crossbar).tolist() == np.eye(3, dtype=int).reshape(-1).tolist()
    assert not polytope_service.lmo(-np.ones(9), crossbar).any()
    assert not polytope_service.lmo(np.zeros(9), crossbar).any()
    with pytest.raises(NumericError):
        polytope_service.lmo(np.full(9, np.inf), crossbar)


def test_lmo_explicit(toy_set):
    """
    Test the linear oracle over an explicit list.
    """
    assert polytope_service.lmo([0.2, 0.5], toy_set).tolist() == [0, 1]
    assert polytope_service.lmo([-1.0, -1.0], toy_set).tolist() == [0, 0]
    with pytest.raises(NumericError):
        polytope_service.lmo([np.nan, 0.0], toy_set)


def test_inverse_cdf_sampling(printed_combination):
    """
    Test the inverse-CDF index on cumulative weights 19/30, 25/30, 29/30, 1.
    """
    assert printed_combination.sample_index(0.5) == 0
    assert printed_combination.sample_index(0.7) == 1
    assert printed_combination.sample_index(0.9) == 2
    assert printed_combination.sample_index(0.99) == 3
    assert printed_combination.sample_index(0.0) == 0


def random_mixture(rng, n, terms):
    perms = [rng.permutation(n) for _ in range(terms)]
    weights = rng.dirichlet(np.ones(terms))
    return sum(w * perm_to_matrix(p) for w, p in zip(weights, perms))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_lmo_matches_exhaustive_search(n):
    """
    Test the linear oracle against every schedule of small crossbars, zero schedule included.
    """
    schedule_set = CrossbarScheduleSet(n)
    vertices = schedule_set.vertices()
    rng = np.random.default_rng(n)
    for _ in range(25):
        direction = rng.normal(size=n * n)
        best = float((vertices @ direction).max())
        assert abs(float(polytope_service.lmo(direction, schedule_set) @ direction) - best) <= 1e-12


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_birkhoff_random_mixtures(n):
    """
    Test that random mixtures of permutations reconstruct within 1e-8 using at most (n-1)^2 + 1 terms.
    """
    rng = np.random.default_rng(100 + n)
    schedule_set = CrossbarScheduleSet(n)
    for _ in range(10):
        mu = random_mixture(rng, n, terms=2 * n)
        combination = polytope_service.birkhoff_decompose(mu, schedule_set)
        assert combination.error(mu) <= 1e-8
        assert len(combination) <= (n - 1) ** 2 + 1
        assert np.all(combination.weights >= 0)
        assert abs(combination.weights.sum() - 1.0) <= 1e-12


def test_birkhoff_accepts_points_at_membership_tolerance():
    """
    Test that points admitted by the membership test with line sums off by about 1e-9
    still decompose within 1e-8.
    """
    rng = np.random.default_rng(12)
    n = 30
    schedule_set = CrossbarScheduleSet(n)
    for _ in range(10):
        mu = random_mixture(rng, n, terms=40)
        mu = mu + (mu > 0) * rng.uniform(0.0, 3e-11, size=mu.shape)
        assert polytope_service.membership(mu, schedule_set)
        combination = polytope_service.birkhoff_decompose(mu, schedule_set)
        assert combination.error(mu) <= 1e-8


def test_birkhoff_degenerate_support_raises(crossbar, monkeypatch):
    """
    Test that a support without a perfect matching surfaces as DecompositionError with its residual.
    """
    monkeypatch.setattr(matching_service, "support_perfect_matching", lambda support: None)
    with pytest.raises(DecompositionError) as error:
        polytope_service.birkhoff_decompose(np.full(9, 1 / 3), crossbar)
    assert error.value.residual == pytest.approx(1.0)


def test_simplex_decomposition_of_equal_rates(toy_set):
    """
    Test that mu = (0.3, 0.3) on the two-queue server splits as 0.3, 0.3 and 0.4 idle.
    """
    combination = polytope_service.simplex_decompose([0.3, 0.3], toy_set)
    weights = {schedule_key(s): w for s, w in combination.terms()}
    assert weights[(1, 0)] == pytest.approx(0.3, abs=1e-6)
    assert weights[(0, 1)] == pytest.approx(0.3, abs=1e-6)
    assert weights[(0, 0)] == pytest.approx(0.4, abs=1e-6)
