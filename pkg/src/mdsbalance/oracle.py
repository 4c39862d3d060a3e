"""Exact stationary law of the capped n-server chain, for tiny n.

Builds the full rate matrix over all queue vectors in ``{0..B}^n`` from the
same routing and service rules the simulator uses and solves the balance
equations. Arrivals to a queue already at the cap are dropped for that queue
only. Used as an independent oracle for the simulator.
"""
from __future__ import annotations

import itertools
import warnings
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, SingularChainError, StateSpaceError
from .model import SystemParams

MAX_STATES = 200_000


class CappedGenerator(NamedTuple):
    states: np.ndarray
    Q: sp.csr_matrix
    event_rates: np.ndarray  # total clock rate per state, including arrivals that are no-ops


class CappedStationary(NamedTuple):
    u_mean: np.ndarray
    states: np.ndarray
    probs: np.ndarray


def _arrival_outcomes(q, subsets, k):
    """Yield (set of targets, probability) for one arrival, given a state."""
    for S in subsets:
        kth = sorted(q[s] for s in S)[k - 1]
        sure = [s for s in S if q[s] < kth]
        tied = [s for s in S if q[s] == kth]
        picks = list(itertools.combinations(tied, k - len(sure)))
        for extra in picks:
            yield sure + list(extra), 1.0 / (len(subsets) * len(picks))


def capped_generator(params: SystemParams, cap: int) -> CappedGenerator:
    n, L, k, lam = params.n, params.L, params.k, params.lam
    if n is None:
        raise DomainError("the capped chain needs params.n")
    if cap < 1:
        raise DomainError("cap must be >= 1")
    size = (cap + 1) ** n
    if size > MAX_STATES:
        raise StateSpaceError(f"(cap+1)^n = {size} states exceeds the limit {MAX_STATES}")

    base = cap + 1
    weights = base ** np.arange(n - 1, -1, -1)
    states = np.array(list(itertools.product(range(base), repeat=n)), dtype=np.int64).reshape(size, n)
    subsets = list(itertools.combinations(range(n), L))
    arrival_rate = n * lam

    rows, cols, vals = [], [], []
    event_rates = np.zeros(size)
    for idx in range(size):
        q = tuple(int(v) for v in states[idx])
        busy = sum(1 for v in q if v > 0)
        event_rates[idx] = arrival_rate + k * busy
        for targets, prob in _arrival_outcomes(q, subsets, k):
            dest = idx
            for s in targets:
                if q[s] < cap:
                    dest += int(weights[s])
            if dest != idx:
                rows.append(idx)
                cols.append(dest)
                vals.append(arrival_rate * prob)
        for s in range(n):
            if q[s] > 0:
                rows.append(idx)
                cols.append(idx - int(weights[s]))
                vals.append(float(k))

    off = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    Q = (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()
    return CappedGenerator(states, Q, event_rates)


def stationary_distribution(Q: sp.spmatrix) -> np.ndarray:
    """Solve ``p Q = 0, sum(p) = 1`` with the last balance equation replaced by normalization."""
    size = Q.shape[0]
    A = sp.vstack([Q.T.tocsr()[:-1], sp.csr_matrix(np.ones((1, size)))]).tocsc()
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            p = spla.spsolve(A, rhs)
        except spla.MatrixRankWarning as exc:
            raise SingularChainError("balance equations are singular (reducible chain?)") from exc
    if not np.all(np.isfinite(p)):
        raise SingularChainError("balance equations are singular (reducible chain?)")
    if p.min() < -1e-10:
        raise SingularChainError(f"solution has negative mass {p.min():.3g}")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def exact_stationary_capped(params: SystemParams, cap: int) -> CappedStationary:
    """Stationary ``E[u^n]`` (indices ``0..cap``) and the full state distribution."""
    gen = capped_generator(params, cap)
    probs = stationary_distribution(gen.Q)
    levels = (gen.states[:, :, None] >= np.arange(cap + 1)[None, None, :]).mean(axis=1)
    u_mean = probs @ levels
    return CappedStationary(u_mean, gen.states, probs)
