"""Event-driven simulation of the n-server batch-sampling queue.

Each arrival (total rate ``n*lam``) picks a uniformly random L-subset of
servers and adds one job to each of the k shortest among them. Every busy
server completes jobs at rate ``k``. Jobs are anonymous: only queue lengths
are tracked.

The event loop runs in numba. Per-level counters ``counts[i] = #{Q_j >= i}``
are kept incrementally, and their time integrals are accumulated lazily (a
level is integrated only when its counter changes or a batch closes).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DomainError, SimulationError
from .model import DEFAULT_M, SystemParams, as_tail

log = logging.getLogger(__name__)

N_BATCHES = 20

ARRIVAL = 0
SERVICE = 1
_OK, _OVERFLOW, _STALL = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    params: SystemParams
    seed: int = 0
    warmup_time: float = 1000.0
    measure_time: float = 20000.0
    cap: int = 0
    thinning: float = 0.0
    M: int = DEFAULT_M

    def __post_init__(self):
        if self.params.n is None:
            raise DomainError("simulation needs params.n")
        if self.warmup_time < 0:
            raise DomainError("warmup_time must be >= 0")
        if not self.measure_time > 0:
            raise DomainError("measure_time must be > 0")
        if self.cap < 0:
            raise DomainError("cap must be 0 (uncapped) or >= 1")
        if self.cap > self.M:
            raise DomainError(f"cap={self.cap} exceeds the tracked length M={self.M}")
        if self.thinning < 0:
            raise DomainError("thinning must be >= 0")


@dataclass
class SteadyEstimate:
    """Time-averaged occupancy tail with batch-means standard errors."""

    u_hat: np.ndarray
    stderr: np.ndarray
    total_events: int
    measure_time: float
    batch_means: np.ndarray = field(repr=False)
    arrivals: int = 0
    services: int = 0
    # Sum over events of P(service) and of its Bernoulli variance, for rate audits.
    expected_services: float = 0.0
    service_variance: float = 0.0
    trajectory: np.ndarray | None = field(default=None, repr=False)

    def rate_audit_z(self) -> float:
        """Standardized gap between observed and expected service counts."""
        if self.service_variance == 0:
            return 0.0
        return (self.services - self.expected_services) / np.sqrt(self.service_variance)


# -- jitted core ----------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _sample_targets(q, perm, order, L, rng):
    # Partial Fisher-Yates: perm[:L] becomes a uniformly random ordered L-tuple.
    # Indices are drawn as int(U * m): bias <= m / 2**53, and far cheaper than
    # Generator.integers under numba.
    n = q.size
    for i in range(L):
        j = i + int(rng.random() * (n - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    # Stable insertion sort by length; the random tuple order breaks ties uniformly.
    for i in range(L):
        s = perm[i]
        j = i
        while j > 0 and q[order[j - 1]] > q[s]:
            order[j] = order[j - 1]
            j -= 1
        order[j] = s


@numba.njit(cache=True, nogil=True)
def _bump(counts, lvl, delta, t, last, area, b):
    if b >= 0:
        area[b, lvl] += counts[lvl] * (t - last[lvl])
    last[lvl] = t
    counts[lvl] += delta


@numba.njit(cache=True, nogil=True)
def _draw_dt(n, lam, k, nbusy, rng):
    rate = n * lam + k * nbusy
    if rate <= 0.0:
        return -1.0
    return rng.standard_exponential() / rate


@numba.njit(cache=True, nogil=True)
def _apply_event(q, perm, order, busy, pos, nb, counts, lam, L, k, cap, M, rng, t, last, area, b):
    """Pick and apply one event at time t. Returns (kind, status)."""
    n = q.size
    nbusy = nb[0]
    rate = n * lam + k * nbusy
    if rng.random() * rate < k * nbusy:
        i = busy[int(rng.random() * nbusy)]
        x = q[i]
        _bump(counts, x, -1, t, last, area, b)
        q[i] = x - 1
        if x == 1:
            p = pos[i]
            tail = busy[nbusy - 1]
            busy[p] = tail
            pos[tail] = p
            pos[i] = -1
            nb[0] = nbusy - 1
        return SERVICE, _OK
    _sample_targets(q, perm, order, L, rng)
    for m in range(k):
        i = order[m]
        x = q[i]
        if cap > 0 and x >= cap:
            continue
        if x + 1 > M:
            return ARRIVAL, _OVERFLOW
        _bump(counts, x + 1, 1, t, last, area, b)
        q[i] = x + 1
        if x == 0:
            busy[nb[0]] = i
            pos[i] = nb[0]
            nb[0] += 1
    return ARRIVAL, _OK


@numba.njit(cache=True, nogil=True)
def _run(q, perm, order, busy, pos, nb, counts, lam, L, k, cap, M, rng,
         warmup, batch_len, n_batches, last, area, stats, sample_dt, snaps):
    n = q.size
    t = 0.0
    b = -1
    next_boundary = warmup
    n_snaps = snaps.shape[0]
    s = 0
    next_sample = 0.0
    while True:
        dt = _draw_dt(n, lam, k, nb[0], rng)
        if dt < 0.0:
            return _STALL
        t_next = t + dt
        while s < n_snaps and t_next >= next_sample:
            for i in range(M + 1):
                snaps[s, i] = counts[i]
            s += 1
            next_sample = s * sample_dt
        while t_next >= next_boundary:
            if b >= 0:
                for i in range(M + 1):
                    area[b, i] += counts[i] * (next_boundary - last[i])
                    last[i] = next_boundary
            else:
                for i in range(M + 1):
                    last[i] = next_boundary
            b += 1
            if b == n_batches:
                return _OK
            next_boundary = warmup + (b + 1) * batch_len
        t = t_next
        if b >= 0:
            p = k * nb[0] / (n * lam + k * nb[0])
            stats[2] += p
            stats[3] += p * (1.0 - p)
        kind, status = _apply_event(q, perm, order, busy, pos, nb, counts, lam, L, k, cap, M,
                                    rng, t, last, area, b)
        if status != _OK:
            return status
        if b >= 0:
            stats[kind] += 1.0


# -- mutable state ---------------------------------------------------------------------


class SimState:
    """Queue lengths plus the bookkeeping arrays the jitted kernel mutates."""

    def __init__(self, queues, L: int, M: int = DEFAULT_M):
        q = np.array(queues, dtype=np.int64)
        if q.ndim != 1 or q.size == 0 or np.any(q < 0):
            raise DomainError("queue lengths must be a non-empty vector of nonnegative integers")
        if q.max() > M:
            raise DomainError(f"queue length {q.max()} exceeds M={M}")
        n = q.size
        if L > n:
            raise DomainError(f"L={L} exceeds n={n}")
        self.q = q
        self.M = M
        self.perm = np.arange(n, dtype=np.int64)
        self.order = np.zeros(L, dtype=np.int64)
        self.busy = np.zeros(n, dtype=np.int64)
        self.pos = np.full(n, -1, dtype=np.int64)
        idx = np.flatnonzero(q > 0)
        self.busy[:idx.size] = idx
        self.pos[idx] = np.arange(idx.size)
        self.nb = np.array([idx.size], dtype=np.int64)
        self.counts = np.array([(q >= i).sum() for i in range(M + 2)], dtype=np.int64)
        self._last = np.zeros(M + 2)
        self._area = np.zeros((1, M + 2))

    def step(self, params: SystemParams, cap: int, rng: np.random.Generator):
        """Advance one event; returns (dt, kind)."""
        n = self.q.size
        dt = _draw_dt(n, params.lam, params.k, self.nb[0], rng)
        if dt < 0:
            raise SimulationError("no event can occur (empty system with zero arrival rate)")
        kind, status = _apply_event(self.q, self.perm, self.order, self.busy, self.pos, self.nb,
                                    self.counts, params.lam, params.L, params.k, cap, self.M,
                                    rng, 0.0, self._last, self._area, -1)
        if status == _OVERFLOW:
            raise SimulationError(f"a queue exceeded the tracked length M={self.M}")
        return dt, ("arrival" if kind == ARRIVAL else "service")


def make_rng(seed: int, replication: int = 0) -> np.random.Generator:
    """Counter-based stream for one replication."""
    return np.random.Generator(np.random.Philox(int(seed) ^ int(replication)))


# -- public operations -----------------------------------------------------------------


def route_targets(Q, params: SystemParams, rng: np.random.Generator) -> np.ndarray:
    """Indices of the k servers that receive a job, given queue lengths ``Q``."""
    q = np.asarray(Q, dtype=np.int64)
    if params.L > q.size:
        raise DomainError(f"L={params.L} exceeds n={q.size}")
    perm = np.arange(q.size, dtype=np.int64)
    order = np.zeros(params.L, dtype=np.int64)
    _sample_targets(q, perm, order, params.L, rng)
    return order[:params.k].copy()


def advance_event(Q, params: SystemParams, cap: int, rng: np.random.Generator):
    """Return ``(new Q, elapsed time, "arrival" | "service")`` after one event."""
    q = np.asarray(Q, dtype=np.int64)
    state = SimState(q, params.L, max(DEFAULT_M, int(q.max()) + 1))
    dt, kind = state.step(params, cap, rng)
    return state.q, dt, kind


def occupancy_from_queues(Q, M: int = DEFAULT_M):
    """Occupancy pmf and tail of queue lengths, lengths above M folded into M."""
    q = np.asarray(Q, dtype=np.int64)
    n = q.size
    pi = np.bincount(np.minimum(q, M), minlength=M + 1)[:M + 1] / n
    u = np.cumsum(pi[::-1])[::-1]
    return pi, u


def _summarize(area, batch_len, n, stats, config, snaps, sample_dt):
    batch_means = area / (batch_len * n)
    u_hat = batch_means.mean(axis=0)
    stderr = batch_means.std(axis=0, ddof=1) / np.sqrt(batch_means.shape[0])
    traj = None
    if snaps is not None:
        times = np.arange(snaps.shape[0]) * sample_dt
        traj = np.column_stack([times, snaps / n])
    return SteadyEstimate(
        u_hat=as_tail(u_hat, tol=1e-9), stderr=stderr,
        total_events=int(stats[0] + stats[1]), measure_time=config.measure_time,
        batch_means=batch_means, arrivals=int(stats[0]), services=int(stats[1]),
        expected_services=float(stats[2]), service_variance=float(stats[3]),
        trajectory=traj)


def _snapshot_buffer(config: SimConfig):
    if config.thinning <= 0:
        return np.zeros((0, config.M + 1), dtype=np.int64), 0.0
    total = config.warmup_time + config.measure_time
    return np.zeros((int(total / config.thinning) + 1, config.M + 1), dtype=np.int64), config.thinning


def simulate_steady(config: SimConfig, replication: int = 0, debug: bool = False) -> SteadyEstimate:
    """Time-averaged occupancy tail over ``measure_time`` after ``warmup_time``.

    Starts from the empty system. Deterministic for a given ``(seed, replication)``.
    ``debug=True`` runs the same event sequence through a Python loop with
    per-event conservation and jump audits (slow; small runs only).
    """
    if debug:
        return _simulate_debug(config, replication)
    p = config.params
    state = SimState(np.zeros(p.n, dtype=np.int64), p.L, config.M)
    rng = make_rng(config.seed, replication)
    batch_len = config.measure_time / N_BATCHES
    area = np.zeros((N_BATCHES, config.M + 1))
    last = np.zeros(config.M + 2)
    stats = np.zeros(4)
    snaps, sample_dt = _snapshot_buffer(config)
    status = _run(state.q, state.perm, state.order, state.busy, state.pos, state.nb, state.counts,
                  p.lam, p.L, p.k, config.cap, config.M, rng, config.warmup_time, batch_len,
                  N_BATCHES, last, area, stats, sample_dt, snaps)
    if status == _OVERFLOW:
        raise SimulationError(f"a queue exceeded the tracked length M={config.M}")
    if status == _STALL:
        raise SimulationError("no event can occur (empty system with zero arrival rate)")
    return _summarize(area, batch_len, p.n, stats, config,
                      snaps if config.thinning > 0 else None, sample_dt)


def _jump_vector(lengths_sorted, k, cap, size):
    delta = np.zeros(size, dtype=np.int64)
    for x in lengths_sorted[:k]:
        if cap > 0 and x >= cap:
            continue
        delta[x + 1] += 1
        delta[x] -= 1
    return delta


def _simulate_debug(config: SimConfig, replication: int) -> SteadyEstimate:
    p = config.params
    n, M = p.n, config.M
    state = SimState(np.zeros(n, dtype=np.int64), p.L, M)
    rng = make_rng(config.seed, replication)
    batch_len = config.measure_time / N_BATCHES
    end = config.warmup_time + config.measure_time
    area = np.zeros((N_BATCHES, M + 1))
    stats = np.zeros(4)
    t = 0.0
    counts_pi = np.bincount(state.q, minlength=M + 2)

    def accumulate(t0, t1, u):
        # Split [t0, t1) across batch windows.
        lo = max(t0, config.warmup_time)
        while lo < t1:
            b = int((lo - config.warmup_time) // batch_len)
            if b >= N_BATCHES:
                return
            hi = min(t1, config.warmup_time + (b + 1) * batch_len)
            area[b] += u * (hi - lo) * n
            lo = hi

    while True:
        busy = int(state.nb[0])
        pre = state.q.copy()
        dt, kind = state.step(p, config.cap, rng)
        _, u_pre = occupancy_from_queues(pre, M)
        accumulate(t, min(t + dt, end), u_pre)
        if t + dt >= end:
            break
        t += dt
        if t >= config.warmup_time:
            prob = p.k * busy / (n * p.lam + p.k * busy)
            stats[2] += prob
            stats[3] += prob * (1 - prob)
            stats[0 if kind == "arrival" else 1] += 1

        new_pi = np.bincount(state.q, minlength=M + 2)
        if new_pi.sum() != n or state.counts[0] != n:
            raise SimulationError("occupancy counters lost mass")
        if not np.array_equal(state.counts[:M + 1], np.cumsum(new_pi[::-1])[::-1][:M + 1]):
            raise SimulationError("incremental level counters disagree with queue lengths")
        if kind == "arrival":
            sample = state.perm[:p.L]
            expected = _jump_vector(np.sort(pre[sample]), p.k, config.cap, M + 2)
            if not np.array_equal(new_pi - counts_pi, expected):
                raise SimulationError("arrival jump differs from the sorted-sample jump vector")
        counts_pi = new_pi
    return _summarize(area, batch_len, n, stats, config, None, 0.0)


def simulate_replications(config: SimConfig, replications: int = 1,
                          workers: int | None = None) -> SteadyEstimate:
    """Independent replications (streams ``seed ^ r``) averaged with pooled stderr."""
    if replications < 1:
        raise DomainError("replications must be >= 1")
    if replications == 1:
        return simulate_steady(config, 0)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        runs = list(pool.map(lambda r: simulate_steady(config, r), range(replications)))
    u_hat = np.mean([r.u_hat for r in runs], axis=0)
    stderr = np.sqrt(np.sum([r.stderr**2 for r in runs], axis=0)) / replications
    return SteadyEstimate(
        u_hat=u_hat, stderr=stderr,
        total_events=sum(r.total_events for r in runs),
        measure_time=config.measure_time * replications,
        batch_means=np.concatenate([r.batch_means for r in runs]),
        arrivals=sum(r.arrivals for r in runs), services=sum(r.services for r in runs),
        expected_services=sum(r.expected_services for r in runs),
        service_variance=sum(r.service_variance for r in runs))
