import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdk.errors import DimensionError, ValidationError
from bdk.markov_tv import (
    MIXED,
    NOT_MIXED,
    DiscreteChain,
    DiscreteDistribution,
    chain_mixing_time,
    cyclic_walk,
    is_group_walk,
    stationary_distribution,
    submultiplicative_check,
    time_reversal_check,
    tv_curve,
    tv_distance,
    tv_distance_bruteforce,
    two_state_mixing_time,
    worst_case_tv,
)


def _normalize(w):
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


weights = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.lists(st.floats(1e-6, 1.0), min_size=n, max_size=n), st.lists(st.floats(1e-6, 1.0), min_size=n, max_size=n)
)))
def test_tv_equals_event_maximum(pair):
    p, q = _normalize(pair[0]), _normalize(pair[1])
    assert abs(tv_distance(p, q) - tv_distance_bruteforce(p, q)) <= 1e-12


def test_tv_basic_values():
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv_distance([0.2, 0.8], [0.5, 0.5]) == pytest.approx(0.3)


def test_distribution_validation():
    for bad in ([], [0.5, 0.6], [-0.1, 1.1], [[0.5, 0.5]]):
        with pytest.raises(ValidationError):
            DiscreteDistribution(bad)
    with pytest.raises(DimensionError):
        tv_distance([1.0], [0.5, 0.5])
    with pytest.raises(ValidationError):
        tv_distance_bruteforce(np.full(21, 1 / 21), np.full(21, 1 / 21))


def test_chain_validation():
    for bad in ([[0.5, 0.5]], [[1.0, 0.1], [0.0, 1.0]], [[-0.5, 1.5], [0, 1]]):
        with pytest.raises(ValidationError):
            DiscreteChain(bad)


def test_stationary_distribution():
    P = DiscreteChain([[0.9, 0.1], [0.2, 0.8]])
    np.testing.assert_allclose(stationary_distribution(P), [2 / 3, 1 / 3], atol=1e-10)
    flip = DiscreteChain([[0, 1], [1, 0]])
    np.testing.assert_allclose(stationary_distribution(flip), [0.5, 0.5], atol=1e-12)


def test_two_state_example():
    assert two_state_mixing_time(0.1, 0.2) == 3
    assert chain_mixing_time(DiscreteChain([[0.9, 0.1], [0.2, 0.8]])).t_mix == 3


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.sampled_from([0.05, 0.1, 0.25, 0.4]))
def test_two_state_closed_form_matches_enumeration(p, q, eps):
    chain = DiscreteChain([[1 - p, p], [q, 1 - q]])
    res = chain_mixing_time(chain, epsilon=eps, t_max=100_000)
    assert res.status == MIXED
    assert two_state_mixing_time(p, q, eps) == res.t_mix


def test_two_state_errors():
    with pytest.raises(ValidationError):
        two_state_mixing_time(0.0, 0.5)


def test_periodic_chain_never_mixes():
    res = chain_mixing_time(DiscreteChain([[0, 1], [1, 0]]), t_max=200)
    assert res.status == NOT_MIXED and res.t_mix is None
    assert not res.mixed


def test_epsilon_range():
    with pytest.raises(ValidationError):
        chain_mixing_time(DiscreteChain([[1.0]]), epsilon=1.0)


def test_uniform_increments_mix_in_one_step():
    walk = cyclic_walk(5, {k: 0.2 for k in range(5)})
    rev = time_reversal_check(walk)
    assert rev.forward.t_mix == rev.reversed.t_mix == 1


def test_symmetric_walk_reversal_is_itself():
    walk = cyclic_walk(7, {1: 0.25, -1: 0.25, 0: 0.5})
    np.testing.assert_array_equal(walk.P, walk.P.T)
    assert time_reversal_check(walk).equal


def test_reversal_on_z5():
    walk = cyclic_walk(5, {1: 0.6, 2: 0.4})
    back = cyclic_walk(5, {-1: 0.6, -2: 0.4})
    rev = time_reversal_check(walk)
    assert rev.equal
    assert rev.forward.t_mix == chain_mixing_time(back).t_mix
    np.testing.assert_allclose(rev.forward.curve, chain_mixing_time(back).curve, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 9), st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_reversal_equality_on_random_cyclic_walks(n, w):
    w = _normalize(w)
    walk = cyclic_walk(n, {0: w[0], 1: w[1], 3 % n: w[2]} if 3 % n not in (0, 1) else {0: w[0], 1: w[1] + w[2]})
    rev = time_reversal_check(walk, t_max=5000)
    assert rev.equal


def test_reversal_needs_a_group_walk():
    chain = DiscreteChain([[0.9, 0.1], [0.2, 0.8]])
    assert not is_group_walk(chain)
    with pytest.raises(ValidationError):
        time_reversal_check(chain)
    with pytest.raises(ValidationError):
        cyclic_walk(1, {0: 1.0})
    with pytest.raises(ValidationError):
        cyclic_walk(4, {1: 0.5})


def _random_chain(gen, n):
    P = gen.random((n, n)) + 0.01
    return DiscreteChain(P / P.sum(axis=1, keepdims=True))


@pytest.mark.parametrize("seed", range(5))
def test_worst_start_tv_decays(seed):
    gen = np.random.default_rng(seed)
    chain = _random_chain(gen, 6)
    pi = stationary_distribution(chain)
    curve = tv_curve(chain, pi, 60)
    assert np.all(np.diff(curve[1:]) <= 1e-15)
    assert curve[-1] < 1e-8
    assert worst_case_tv(chain, pi, 7) == pytest.approx(curve[7], abs=1e-12)


@pytest.mark.parametrize("chain", [
    cyclic_walk(10, {0: 0.5, 1: 0.25, -1: 0.25}),
    cyclic_walk(5, {1: 0.6, 2: 0.4}),
    DiscreteChain([[0.9, 0.1], [0.2, 0.8]]),
    DiscreteChain([[0.5, 0.5, 0.0], [0.25, 0.5, 0.25], [0.0, 0.5, 0.5]]),
])
def test_submultiplicativity(chain):
    for level, dist, bound in submultiplicative_check(chain):
        assert dist <= bound


def test_start_restricted_curve():
    chain = DiscreteChain([[0.9, 0.1], [0.2, 0.8]])
    pi = stationary_distribution(chain)
    full = tv_curve(chain, pi, 5)
    from_one = tv_curve(chain, pi, 5, start=[0.0, 1.0])
    assert np.all(from_one <= full + 1e-15)
    res = chain_mixing_time(chain, pi0=[0.0, 1.0])
    assert res.t_mix <= 3


def test_exact_tie_at_epsilon_is_robust_to_round_off():
    # on Z_4 with steps {0, +1, -1} all above 1/4, d(1) = 1/4 exactly
    w = _normalize([0.683412704959289, 0.6493715316139977, 0.5561807636364238])
    walk = cyclic_walk(4, {0: w[0], 1: w[1], 3: w[2]})
    rev = time_reversal_check(walk)
    assert rev.forward.t_mix == rev.reversed.t_mix == 1
