import itertools

import numpy as np
import pytest
from scipy.linalg import null_space

from mdsbalance.errors import DomainError, SingularChainError, StateSpaceError
from mdsbalance.model import SystemParams
from mdsbalance.oracle import capped_generator, exact_stationary_capped, stationary_distribution


def test_light_traffic_idles():
    res = exact_stationary_capped(SystemParams(lam=0.05, L=2, k=1, n=2), 10)
    assert res.probs[0] > 0.9
    np.testing.assert_array_equal(res.states[0], [0, 0])


@pytest.mark.parametrize("n,L,k,lam,B", [(2, 2, 1, 0.5, 8), (3, 2, 1, 0.5, 6), (3, 3, 2, 0.8, 5), (4, 3, 2, 0.6, 4)])
def test_generator_rows_and_normalization(n, L, k, lam, B):
    p = SystemParams(lam=lam, L=L, k=k, n=n)
    gen = capped_generator(p, B)
    np.testing.assert_allclose(np.asarray(gen.Q.sum(axis=1)).ravel(), 0.0, atol=1e-12)
    busy = (gen.states > 0).sum(axis=1)
    np.testing.assert_allclose(gen.event_rates, n * lam + k * busy, rtol=0, atol=1e-12)
    res = exact_stationary_capped(p, B)
    assert abs(res.probs.sum() - 1.0) < 1e-12
    assert res.u_mean[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(res.u_mean) <= 1e-15)


def test_leaving_rate_counts_only_real_moves():
    # Off-diagonal outflow equals the event rate minus no-op arrivals at full queues.
    p = SystemParams(lam=0.5, L=2, k=1, n=2)
    gen = capped_generator(p, 3)
    full = np.flatnonzero((gen.states == 3).all(axis=1))[0]
    assert -gen.Q[full, full] == pytest.approx(2 * p.k)


def _jsq_pair_chain(lam, B):
    """Two queues, each arrival joins the shorter one (fair coin on ties)."""
    states = list(itertools.product(range(B + 1), repeat=2))
    index = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for (a, b), i in index.items():
        if a < b:
            targets = [((a + 1, b), 1.0)]
        elif b < a:
            targets = [((a, b + 1), 1.0)]
        else:
            targets = [((a + 1, b), 0.5), ((a, b + 1), 0.5)]
        for (x, y), w in targets:
            if max(x, y) <= B:
                Q[i, index[(x, y)]] += 2 * lam * w
        if a > 0:
            Q[i, index[(a - 1, b)]] += 1.0
        if b > 0:
            Q[i, index[(a, b - 1)]] += 1.0
        Q[i, i] = -Q[i].sum()
    pi = null_space(Q.T)[:, 0]
    pi = pi / pi.sum()
    levels = np.array([[np.mean([a >= m, b >= m]) for m in range(B + 1)] for a, b in states])
    return pi @ levels


@pytest.mark.parametrize("lam,B", [(0.3, 6), (0.8, 8)])
def test_join_shortest_pair_matches_hand_built_chain(lam, B):
    res = exact_stationary_capped(SystemParams(lam=lam, L=2, k=1, n=2), B)
    np.testing.assert_allclose(res.u_mean, _jsq_pair_chain(lam, B), atol=1e-12)


def test_state_space_limit():
    with pytest.raises(StateSpaceError):
        capped_generator(SystemParams(lam=0.5, L=2, k=1, n=5), 12)


def test_requires_population_and_cap():
    with pytest.raises(DomainError):
        capped_generator(SystemParams(lam=0.5, L=2, k=1), 4)
    with pytest.raises(DomainError):
        capped_generator(SystemParams(lam=0.5, L=2, k=1, n=2), 0)


def test_reducible_chain_is_singular():
    import scipy.sparse as sp
    Q = sp.csr_matrix(np.array([[-1.0, 1.0, 0, 0], [1.0, -1.0, 0, 0], [0, 0, -1.0, 1.0], [0, 0, 1.0, -1.0]]))
    with pytest.raises(SingularChainError):
        stationary_distribution(Q)
