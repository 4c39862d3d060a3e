"""Brute-force reference computations, independent of the package code paths."""
from __future__ import annotations

import itertools
from math import comb

import numpy as np


def f_by_binomial_tails(x: float, L: int, k: int) -> float:
    # Expected number of the k smallest of L iid queues whose length is >= m,
    # when each is >= m independently with probability x.
    total = 0.0
    for ell in range(1, k + 1):
        for j in range(L - ell + 1, L + 1):
            total += comb(L, j) * x**j * (1 - x) ** (L - j)
    return total


def routed_share_by_enumeration(r, L: int, k: int) -> np.ndarray:
    # E[#{i <= k : i-th smallest of L iid draws from r equals j}] for each j,
    # by enumerating every ordered L-tuple of the support.
    r = np.asarray(r, dtype=float)
    support = np.flatnonzero(r > 0)
    out = np.zeros(r.size)
    for tup in itertools.product(support, repeat=L):
        prob = np.prod(r[list(tup)])
        for length in sorted(tup)[:k]:
            out[length] += prob
    return out


def random_simplex(rng: np.random.Generator, size: int) -> np.ndarray:
    r = rng.dirichlet(np.ones(size))
    return r / r.sum()
