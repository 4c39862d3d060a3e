"""Closed-form objects of the batch-sampling mean-field model.

Every function here is pure. Infinite sequences are represented by finite
numpy arrays; entries past the end of an array are taken to be exactly zero.

Conventions: an *occupancy pmf* ``r`` holds the fraction of queues with length
exactly ``j``; an *occupancy tail* ``u`` holds the fraction with length at
least ``j`` (so ``u[0] == 1``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

MAX_SPREAD = 20
DEFAULT_M = 64
DEFAULT_UNDERFLOW_EPS = 1e-300
PMF_SUM_TOL = 1e-12
TAIL_TOL = 1e-12


@dataclass(frozen=True)
class SystemParams:
    """Arrival rate per server ``lam``, spread ``L``, reconstruction count ``k``.

    ``n`` (number of servers) is only needed by the finite-n simulator.
    """

    lam: float
    L: int
    k: int
    n: int | None = None

    def __post_init__(self):
        if not (0.0 < self.lam < 1.0):
            raise DomainError(f"lambda={self.lam!r} violates 0 < lambda < 1")
        for name in ("L", "k"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise DomainError(f"{name} must be an integer, got {v!r}")
        if not (1 <= self.k < self.L):
            raise DomainError(f"(L, k)=({self.L}, {self.k}) violates 1 <= k < L")
        if self.L > MAX_SPREAD:
            raise DomainError(f"L={self.L} exceeds the supported maximum {MAX_SPREAD}")
        if self.n is not None and not (int(self.n) >= self.L):
            raise DomainError(f"n={self.n} violates L <= n")

    @property
    def L_factorial(self) -> float:
        return float(math.factorial(self.L))


@dataclass(frozen=True)
class TailBoundPair:
    upper: float
    lower: float
    m: int


# -- binomials and the polynomial f ---------------------------------------


@lru_cache(maxsize=None)
def _pascal(rows: int) -> tuple[tuple[int, ...], ...]:
    tri = [(1,)]
    for _ in range(rows):
        prev = tri[-1]
        tri.append((1,) + tuple(prev[i] + prev[i + 1] for i in range(len(prev) - 1)) + (1,))
    return tuple(tri)


def binom(a: int, b: int) -> int:
    """Exact binomial coefficient with ``binom(a, b) == 0`` for ``b > a`` or ``b < 0``."""
    if b < 0 or a < 0 or b > a:
        return 0
    return _pascal(MAX_SPREAD)[a][b] if a <= MAX_SPREAD else math.comb(a, b)


def _check_Lk(L: int, k: int) -> None:
    if not (1 <= k < L <= MAX_SPREAD):
        raise DomainError(f"(L, k)=({L}, {k}) violates 1 <= k < L <= {MAX_SPREAD}")


@lru_cache(maxsize=None)
def f_terms(L: int, k: int) -> tuple[tuple[int, int], ...]:
    """Monomials ``(coefficient, power)`` of f, in summation order."""
    _check_Lk(L, k)
    terms = []
    for i in range(1, k + 1):
        coef = binom(L, L - k + i) * binom(L - k + i - 2, i - 1) * (-1) ** (i - 1)
        terms.append((coef, L - k + i))
    return tuple(terms)


def _check_unit(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError("argument must lie in [0, 1]")
    return x


def _f(x, L, k):
    total = 0.0
    for coef, p in f_terms(L, k):
        total = total + coef * x**p
    return total


def _f_prime(x, L, k):
    total = 0.0
    for coef, p in f_terms(L, k):
        total = total + coef * p * x ** (p - 1)
    return total


def eval_f(x, L: int, k: int):
    """Expected number of the k chosen pieces that land on queues of length
    at least m, when a fraction ``x`` of queues has length at least m.

    Accepts a scalar or an array; ``f(0) = 0`` and ``f(1) = k``.
    """
    _check_Lk(L, k)
    x = _check_unit(x)
    out = _f(x, L, k)
    return float(out) if np.ndim(out) == 0 else out


def eval_f_prime(x, L: int, k: int):
    _check_Lk(L, k)
    x = _check_unit(x)
    out = _f_prime(x, L, k)
    return float(out) if np.ndim(out) == 0 else out


def eval_w(x, L: int, k: int):
    """``x f'(x) - (L-k+1) f(x)``; nonpositive on [0, 1]."""
    _check_Lk(L, k)
    x = _check_unit(x)
    out = x * _f_prime(x, L, k) - (L - k + 1) * _f(x, L, k)
    return float(out) if np.ndim(out) == 0 else out


def eval_h(x, L: int, k: int):
    """``f(x) / (k x^(L-k+1))`` on (0, 1]; equals 1 at x = 1 and is >= 1 throughout."""
    _check_Lk(L, k)
    x = _check_unit(x)
    if np.any(x == 0.0):
        raise DomainError("h is defined on (0, 1]")
    out = _f(x, L, k) / (k * x ** (L - k + 1))
    return float(out) if np.ndim(out) == 0 else out


# -- occupancy vectors ------------------------------------------------------


def as_pmf(values) -> np.ndarray:
    """Validate and return an occupancy pmf as a float array."""
    r = np.asarray(values, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise DomainError("pmf must be a non-empty 1-d sequence")
    if np.any(~np.isfinite(r)) or np.any(r < 0.0):
        raise DomainError("pmf entries must be finite and nonnegative")
    if abs(r.sum() - 1.0) > PMF_SUM_TOL:
        raise DomainError(f"pmf entries sum to {r.sum()!r}, not 1")
    return r


def as_tail(values, tol: float = TAIL_TOL) -> np.ndarray:
    """Validate and return an occupancy tail ``1 = u0 >= u1 >= ... >= 0``."""
    u = np.asarray(values, dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise DomainError("tail must be a non-empty 1-d sequence")
    if np.any(~np.isfinite(u)):
        raise DomainError("tail entries must be finite")
    if abs(u[0] - 1.0) > tol:
        raise DomainError(f"tail must start at 1, got {u[0]!r}")
    if np.any(u < -tol) or np.any(u > 1.0 + tol):
        raise DomainError("tail entries must lie in [0, 1]")
    if np.any(np.diff(u) > tol):
        raise DomainError("tail must be nonincreasing")
    return u


def iota(r) -> np.ndarray:
    """pmf -> tail: ``u_j = sum_{i >= j} r_i``."""
    r = as_pmf(r)
    return np.cumsum(r[::-1])[::-1]


def iota_inv(u) -> np.ndarray:
    """tail -> pmf: ``r_j = u_j - u_{j+1}`` with zero past the end."""
    u = as_tail(u)
    return u - np.append(u[1:], 0.0)


# -- routing rates ----------------------------------------------------------


def zeta_bar_all(r, L: int, k: int) -> np.ndarray:
    """``zeta_bar(j, r)`` for every ``j`` in ``0..len(r)-1``."""
    _check_Lk(L, k)
    r = as_pmf(r)
    below = np.concatenate(([0.0], np.cumsum(r)[:-1]))
    above = np.append(np.cumsum(r[::-1])[::-1][1:], 0.0)
    fact = math.factorial
    total = np.zeros_like(r)
    for i1 in range(k):
        inner = np.zeros_like(r)
        for i2 in range(1, L - i1 + 1):
            rest = L - i1 - i2
            inner += min(i2, k - i1) * r**i2 / fact(i2) * above**rest / fact(rest)
        total += below**i1 / fact(i1) * inner
    return total


def zeta_bar(j: int, r, L: int, k: int) -> float:
    r = as_pmf(r)
    if not (0 <= j < r.size):
        raise DomainError(f"j={j} outside 0..{r.size - 1}")
    return float(zeta_bar_all(r, L, k)[j])


def _sampled_rank_rates(u, r, L, k):
    # p[l-1, m]: chance that the l-th smallest of L sampled queues has length m.
    u_next = np.append(u[1:], 0.0)
    p = np.zeros((k, r.size))
    for ell in range(1, k + 1):
        for i1 in range(ell):
            inner = np.zeros_like(r)
            for i2 in range(ell - i1, L - i1 + 1):
                inner += binom(L - i1, i2) * r**i2 * u_next ** (L - i1 - i2)
            p[ell - 1] += binom(L, i1) * (1.0 - u) ** i1 * inner
    return p


def identity_residuals(r, L: int, k: int) -> tuple[float, float, float]:
    """Max absolute residuals of the three routing-rate identities.

    Returns ``(rank_sum, rank_tail, f_difference)``:

    * ``rank_sum``: ``L! zeta_bar(m)`` against the sum over ranks ``l <= k`` of
      the probability that the l-th smallest sampled queue has length m;
    * ``rank_tail``: for each ``l <= k``, the tail sum over ``j >= m`` of those
      rank probabilities against the binomial tail in ``u_m``;
    * ``f_difference``: ``L! zeta_bar(j)`` against ``f(u_j) - f(u_{j+1})``.
    """
    r = as_pmf(r)
    u = iota(r)
    scaled = math.factorial(L) * zeta_bar_all(r, L, k)
    p = _sampled_rank_rates(u, r, L, k)
    rank_sum = np.max(np.abs(scaled - p.sum(axis=0)))

    rank_tail = 0.0
    for ell in range(1, k + 1):
        lhs = np.cumsum(p[ell - 1][::-1])[::-1]
        rhs = np.zeros_like(u)
        for j in range(L - ell + 1, L + 1):
            rhs += binom(L, j) * u**j * (1.0 - u) ** (L - j)
        rank_tail = max(rank_tail, float(np.max(np.abs(lhs - rhs))))

    u_clip = np.clip(u, 0.0, 1.0)
    fu = _f(u_clip, L, k)
    f_diff = fu - np.append(fu[1:], 0.0)
    f_difference = np.max(np.abs(scaled - f_diff))
    return float(rank_sum), rank_tail, float(f_difference)


def drift_F(r, params: SystemParams) -> np.ndarray:
    """Mean-field drift of the occupancy pmf.

    The result has one more entry than ``r``: arrivals to the longest
    represented queues move mass to index ``len(r)``. Empty queues do not
    serve, hence the ``+k r_0`` correction at index 0.
    """
    r = as_pmf(r)
    L, k = params.L, params.k
    zb = np.append(zeta_bar_all(r, L, k), 0.0)
    zb_prev = np.concatenate(([0.0], zb[:-1]))
    r_ext = np.append(r, 0.0)
    r_next = np.append(r[1:], [0.0, 0.0])
    F = params.lam * params.L_factorial * (zb_prev - zb) + k * (r_next - r_ext)
    F[0] += k * r[0]
    return F


# -- fixed point and tail bounds --------------------------------------------


def fixed_point(params: SystemParams, M: int = DEFAULT_M,
                underflow_eps: float = DEFAULT_UNDERFLOW_EPS) -> np.ndarray:
    """Stationary tail of the mean-field ODE, indices ``0..M``.

    Entries from the first one below ``underflow_eps`` onwards are zero.
    """
    if M < 1:
        raise DomainError("M must be >= 1")
    if underflow_eps < 0:
        raise DomainError("underflow_eps must be >= 0")
    L, k = params.L, params.k
    # Relative rounding error grows about L-fold per step; iterate in extended
    # precision and round once.
    lam = np.longdouble(params.lam)
    u = np.zeros(M + 1)
    u[0] = 1.0
    x = np.longdouble(1.0)
    for m in range(M):
        x = lam * (_f(x, L, k) / k)
        if float(x) < underflow_eps or float(x) == 0.0:
            break
        u[m + 1] = float(x)
    return as_tail(u, tol=0.0)


def _geometric_exponent(ratio: float, m: int) -> float:
    # (ratio^m - 1) / (ratio - 1), or inf when ratio^m overflows.
    if m == 0:
        return 0.0
    if m * math.log(ratio) > 700.0:
        return math.inf
    return (ratio**m - 1.0) / (ratio - 1.0)


def tail_bounds(m: int, params: SystemParams) -> TailBoundPair:
    """Upper and lower super-exponential bounds on the fixed-point tail at m."""
    if m < 0:
        raise DomainError("m must be >= 0")
    L, k, lam = params.L, params.k, params.lam
    e_up = _geometric_exponent(L / k, m)
    e_low = _geometric_exponent(float(L - k + 1), m)
    upper = 0.0 if math.isinf(e_up) else lam**e_up
    lower = 0.0 if math.isinf(e_low) else lam**e_low
    return TailBoundPair(upper=upper, lower=lower, m=m)


# -- metrics ----------------------------------------------------------------


def _pad(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    size = max(a.size, b.size)
    return np.pad(a, (0, size - a.size)), np.pad(b, (0, size - b.size))


def d0_distance(mu, nu) -> float:
    a, b = _pad(as_pmf(mu), as_pmf(nu))
    return float(np.sum(np.abs(a - b) / 2.0 ** np.arange(a.size)))


def rho_distance(x, y) -> float:
    """Product metric on tails; index 0 is excluded (always 1)."""
    a, b = _pad(as_tail(x), as_tail(y))
    j = np.arange(1, a.size)
    return float(np.sum(np.abs(a[1:] - b[1:]) / 2.0**j))


def v_moment(u, j: int) -> float:
    """``sum_{i >= j} u_i``; ``v_moment(u, 1)`` is the mean queue length."""
    u = as_tail(u)
    if j < 0:
        raise DomainError("j must be >= 0")
    return float(np.sum(u[j:]))
