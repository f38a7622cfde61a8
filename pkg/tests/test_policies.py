import pytest
import numpy as np
import sys
import os
from itertools import permutations

# pytest app import fix
sys.path.append(os.path.abspath('.'))

from services.errors import ConfigurationError
from services.learner import LearnerConfig
from services.matching import perm_to_matrix
from services.policies import (
    PriorityPolicy,
    RandomizedKnownPolicy,
    SYLPolicy,
    SYLTokenPolicy,
    build_policy,
    delay_max_weight_select,
    max_weight_select,
    priority_select,
    randomized_known_select,
)
from services.polytope import ConvexCombination, CrossbarScheduleSet, ExplicitScheduleSet, schedule_key
from services.queueing import QueueSystem


################################ Fixtures #####################################################

@pytest.fixture
def crossbar():
    return CrossbarScheduleSet(3)


@pytest.fixture
def toy_set():
    return ExplicitScheduleSet([[1, 0], [0, 1], [0, 0]])


@pytest.fixture
def lam():
    return np.array([0.6, 0.3, 0.0, 0.1, 0.0, 0.8, 0.2, 0.6, 0.1])


@pytest.fixture
def printed_combination():
    schedules = np.array([
        [[1, 0, 0], [0, 0, 1], [0, 1, 0]],
        [[0, 1, 0], [0, 0, 1], [1, 0, 0]],
        [[0, 1, 0], [1, 0, 0], [0, 0, 1]],
        [[0, 0, 1], [0, 1, 0], [1, 0, 0]],
    ]).reshape(4, 9)
    return ConvexCombination(schedules=schedules, weights=np.array([19, 6, 4, 1]) / 30)


def crossbar_schedules(n):
    rows = [perm_to_matrix(np.asarray(p)).reshape(-1) for p in permutations(range(n))]
    return np.vstack(rows + [np.zeros(n * n, dtype=np.int64)])


################################ Test #####################################################

def test_sampling_frequencies(printed_combination):
    """
    Test that empirical frequencies over 10^5 draws lie within 3 binomial sigmas of theta.
    """
    rng = np.random.default_rng(12345)
    draws = 100_000
    index = {schedule_key(s): j for j, s in enumerate(printed_combination.schedules)}
    counts = np.zeros(4)
    total = np.zeros(9)
    for _ in range(draws):
        schedule = randomized_known_select(printed_combination, rng)
        counts[index[schedule_key(schedule)]] += 1
        total += schedule
    theta = printed_combination.weights
    sigma = np.sqrt(theta * (1 - theta) / draws)
    assert np.all(np.abs(counts / draws - theta) <= 3 * sigma)
    assert np.max(np.abs(total / draws - printed_combination.reconstruct())) <= 0.01


def test_degenerate_combination_is_deterministic():
    """
    Test that a single schedule with weight 1 is always selected.
    """
    combination = ConvexCombination(schedules=np.array([[0, 1]]), weights=np.ones(1))
    rng = np.random.default_rng(0)
    assert all(randomized_known_select(combination, rng).tolist() == [0, 1] for _ in range(100))


def test_max_weight_examples(crossbar, toy_set):
    """
    Test max-weight on a dominant diagonal, on the toy server and with empty queues.
    """
    q = np.diag([5, 5, 5]).reshape(-1)
    assert max_weight_select(q, crossbar).tolist() == np.eye(3, dtype=int).reshape(-1).tolist()
    assert max_weight_select([3, 1], toy_set).tolist() == [1, 0]
    empty = max_weight_select(np.zeros(9), crossbar)
    assert int(empty.sum()) == 3


def test_max_weight_matches_brute_force():
    """
    Test that the selected schedule attains the brute-force optimum of <Q, s> for n <= 4.
    """
    rng = np.random.default_rng(77)
    for n in (2, 3, 4):
        schedule_set = CrossbarScheduleSet(n)
        schedules = crossbar_schedules(n)
        for _ in range(50):
            q = rng.integers(0, 10, size=n * n)
            chosen = max_weight_select(q, schedule_set)
            assert int(chosen @ q) == int((schedules @ q).max())
            assert int((3 * q) @ max_weight_select(3 * q, schedule_set)) == 3 * int((schedules @ q).max())


def test_delay_max_weight(crossbar, toy_set):
    """
    Test that head-of-line delays drive the choice and can diverge from max-weight.
    """
    hol = np.zeros(9)
    hol[5] = 50
    assert delay_max_weight_select(hol, crossbar)[5] == 1
    assert delay_max_weight_select([1, 5], toy_set).tolist() == [0, 1]
    assert max_weight_select([2, 2], toy_set).tolist() == [1, 0]

    switch = CrossbarScheduleSet(2)
    queues = QueueSystem(4)
    queues.enqueue([0, 1, 1, 0], slot=1)
    queues.enqueue([1, 0, 0, 1], slot=5)
    assert queues.backlog.tolist() == [1, 1, 1, 1]
    chosen = delay_max_weight_select(queues.hol_delays(6), switch)
    assert chosen.tolist() == [0, 1, 1, 0]


def test_priority_select(toy_set):
    """
    Test strict priority of queue 2 over queue 1.
    """
    order = [1, 0]
    assert priority_select([4, 1], order, toy_set).tolist() == [0, 1]
    assert priority_select([4, 0], order, toy_set).tolist() == [1, 0]
    assert priority_select([0, 0], order, toy_set).tolist() == [0, 0]


def test_priority_needs_explicit_set(crossbar):
    """
    Test that priority scheduling is refused on a crossbar.
    """
    with pytest.raises(ConfigurationError):
        PriorityPolicy(crossbar, order=list(range(9)))


def test_syl_combination_tracks_target(crossbar, lam):
    """
    Test that SYL samples from a decomposition of its current running average.
    """
    policy = SYLPolicy(crossbar, LearnerConfig(dimension=9), np.random.default_rng(1), refresh_tol=0.0)
    rng = np.random.default_rng(2)
    queues = QueueSystem(9)
    for slot in range(1, 201):
        arrivals = (rng.random(9) < lam).astype(int)
        queues.enqueue(arrivals, slot)
        schedule = policy.select(slot, arrivals, queues)
        queues.serve(schedule, slot)
        assert policy.combination.error(policy.target) <= 1e-8
        matrix = schedule.reshape(3, 3)
        assert not matrix.any() or (np.all(matrix.sum(axis=0) == 1) and np.all(matrix.sum(axis=1) == 1))
    assert policy.learner.state.k == 201


def test_syl_explicit_set_uses_ledger(toy_set):
    """
    Test SYL on an explicit set: the sampled schedule belongs to S and the combination is exact.
    """
    policy = SYLPolicy(toy_set, LearnerConfig(dimension=2), np.random.default_rng(4), refresh_tol=0.0)
    queues = QueueSystem(2)
    keys = {schedule_key(s) for s in toy_set.schedules}
    for slot in range(1, 101):
        queues.enqueue([1, 0], slot)
        schedule = policy.select(slot, np.array([1, 0]), queues)
        assert schedule_key(schedule) in keys
        queues.serve(schedule, slot)
    assert policy.combination.error(policy.target) <= 1e-10


def test_zero_budget_token_policy_equals_syl(crossbar, lam):
    """
    Test that a token policy without tokens selects exactly what plain SYL selects.
    """
    plain = SYLPolicy(crossbar, LearnerConfig(dimension=9), np.random.default_rng(8))
    tokens = SYLTokenPolicy(crossbar, LearnerConfig(dimension=9), np.random.default_rng(8),
                            budget=0, sensitive_flow=1)
    rng = np.random.default_rng(10)
    queues = QueueSystem(9)
    for slot in range(1, 301):
        arrivals = (rng.random(9) < lam).astype(int)
        queues.enqueue(arrivals, slot)
        a = plain.select(slot, arrivals, queues)
        b = tokens.select(slot, arrivals, queues)
        assert a.tolist() == b.tolist()
        queues.serve(a, slot)


def test_token_override_and_repayment(toy_set):
    """
    Test both token cases on the toy server with a fixed randomized choice.
    """
    policy = SYLTokenPolicy(toy_set, LearnerConfig(dimension=2), np.random.default_rng(0),
                            budget=2, sensitive_flow=1)
    policy.combination = ConvexCombination(schedules=np.array([[1, 0], [0, 1]]), weights=np.array([0.7, 0.3]))
    queues = QueueSystem(2)
    queues.enqueue([0, 1], slot=1)

    policy.learn_and_sample = lambda arrivals: np.array([1, 0])
    chosen = policy.select(1, np.array([0, 1]), queues)
    assert chosen.tolist() == [0, 1]
    assert policy.tokens.reserve == 1
    assert policy.tokens.per_schedule == {(1, 0): 1}

    queues.serve(chosen, slot=1)
    policy.learn_and_sample = lambda arrivals: np.array([0, 1])
    chosen = policy.select(2, np.array([0, 0]), queues)
    assert chosen.tolist() == [1, 0]
    assert policy.tokens.reserve == 2
    assert policy.tokens.per_schedule == {}
    assert policy.tokens.conserved()


def test_token_override_follows_serving_weights(crossbar):
    """
    Test that overrides are drawn from the serving terms in proportion to their weights,
    so the override/repayment exchange keeps the mean service rate.
    """
    policy = SYLTokenPolicy(crossbar, LearnerConfig(dimension=9), np.random.default_rng(3),
                            budget=1, sensitive_flow=1)
    schedules = np.array([
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        [[0, 1, 0], [0, 0, 1], [1, 0, 0]],
        [[0, 1, 0], [1, 0, 0], [0, 0, 1]],
    ]).reshape(3, 9)
    policy.combination = ConvexCombination(schedules=schedules, weights=np.array([0.6, 0.3, 0.1]))
    draws = [schedule_key(policy._serving_schedule()) for _ in range(4000)]
    share = draws.count(schedule_key(schedules[1])) / len(draws)
    assert set(draws) == {schedule_key(schedules[1]), schedule_key(schedules[2])}
    assert abs(share - 0.75) <= 0.03


def test_token_override_falls_back_to_support_matching(crossbar):
    """
    Test the forced matching through the sensitive cell when no decomposition term serves it.
    """
    policy = SYLTokenPolicy(crossbar, LearnerConfig(dimension=9), np.random.default_rng(0),
                            budget=1, sensitive_flow=1)
    identity = np.eye(3, dtype=np.int64).reshape(-1)
    policy.combination = ConvexCombination(schedules=identity[None, :], weights=np.ones(1))
    policy.learner.state.mu_bar = np.full(9, 1 / 3)
    policy.learn_and_sample = lambda arrivals: identity.copy()
    queues = QueueSystem(9)
    queues.enqueue(np.eye(1, 9, 1, dtype=int)[0], slot=1)
    chosen = policy.select(1, np.zeros(9), queues)
    assert chosen[1] == 1
    assert chosen.reshape(3, 3).sum(axis=1).tolist() == [1, 1, 1]
    assert policy.tokens.reserve == 0

    queues.enqueue(np.eye(1, 9, 1, dtype=int)[0], slot=2)
    assert policy.select(2, np.zeros(9), queues).tolist() == identity.tolist()


def test_token_conservation_over_run(crossbar, lam):
    """
    Test that reserve plus allocated tokens equals the budget at every slot.
    """
    policy = SYLTokenPolicy(crossbar, LearnerConfig(dimension=9), np.random.default_rng(6),
                            budget=100, sensitive_flow=1)
    rng = np.random.default_rng(7)
    queues = QueueSystem(9)
    rates = 0.98 * lam / 0.9
    for slot in range(1, 3001):
        arrivals = (rng.random(9) < rates).astype(int)
        queues.enqueue(arrivals, slot)
        queues.serve(policy.select(slot, arrivals, queues), slot)
        assert policy.tokens.reserve + policy.tokens.allocated() == 100
        assert 0 <= policy.tokens.reserve <= 100
    assert policy.overrides > 0


def test_randomized_known_from_rates(crossbar, lam):
    """
    Test that the known-rate policy decomposes lambda + eta* 1.
    """
    policy = RandomizedKnownPolicy.from_rates(crossbar, lam, np.random.default_rng(0))
    assert policy.combination.error(lam + 1 / 30) <= 2e-6
    assert len(policy.combination) <= 6


def test_build_policy_errors(crossbar, lam):
    """
    Test the policy factory on unknown kinds and missing rates.
    """
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        build_policy("round_robin", crossbar, rng)
    with pytest.raises(ConfigurationError):
        build_policy("randomized_known", crossbar, rng)
    with pytest.raises(ConfigurationError):
        build_policy("syl_tokens", crossbar, rng, sensitive_flow=9)
    with pytest.raises(ConfigurationError):
        build_policy("randomized_known", crossbar, rng, rates=lam * 1.2)
    assert build_policy("max_weight", crossbar, rng).name == "max_weight"
