"""Truncated mean-field ODE for the occupancy tail.

The infinite system is approximated by the K free coordinates ``u_1..u_K`` with
``u_0 = 1`` and a pinned boundary ``u_{K+1} = c``. With ``c = 0`` the truncated
solution increases to the full one as K grows, so it is a lower approximation.

Integration is classical fixed-step RK4. After every step the state is checked
against ``1 >= u_1 >= ... >= u_K >= c``: violations up to ``PROJECT_TOL`` are
projected away silently, up to ``ABORT_TOL`` with a warning, and beyond that
the step is declared unstable.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .errors import DomainError, IntegrationError
from .model import SystemParams, _f, as_tail, f_terms, fixed_point

log = logging.getLogger(__name__)

PROJECT_TOL = 1e-9
ABORT_TOL = 1e-6
DEFAULT_K = 12
STEADY_TRUNCATION_EPS = 1e-14


def default_dt(params: SystemParams) -> float:
    return 0.01 / params.k


def default_truncation(params: SystemParams) -> int:
    """Smallest K >= DEFAULT_K with the fixed point below 1e-14 at index K."""
    ubar = fixed_point(params)
    small = np.flatnonzero(ubar < STEADY_TRUNCATION_EPS)
    return max(DEFAULT_K, int(small[0]) if small.size else ubar.size - 1)


@dataclass(frozen=True)
class TruncatedOdeSpec:
    """Initial data ``g_1..g_K`` and boundary ``c`` for the truncated system."""

    K: int
    c: float
    params: SystemParams
    g: np.ndarray

    def __post_init__(self):
        if self.K < 1:
            raise DomainError("K must be >= 1")
        if not (0.0 <= self.c <= 1.0):
            raise DomainError("boundary c must lie in [0, 1]")
        g = np.asarray(self.g, dtype=float)
        if g.shape != (self.K,):
            raise DomainError(f"g must have length K={self.K}, got {g.shape}")
        chain = np.concatenate(([1.0], g, [self.c]))
        if np.any(~np.isfinite(g)) or np.any(np.diff(chain) > 1e-12):
            raise DomainError("initial data must satisfy 1 >= g_1 >= ... >= g_K >= c")
        object.__setattr__(self, "g", g)

    @classmethod
    def from_tail(cls, u, params: SystemParams, K: int, c: float = 0.0) -> "TruncatedOdeSpec":
        """Restrict a tail ``u_0, u_1, ...`` to indices ``1..K`` (zero-padded)."""
        u = as_tail(u)
        g = np.zeros(K)
        m = min(K, u.size - 1)
        g[:m] = u[1:m + 1]
        return cls(K=K, c=c, params=params, g=np.maximum(g, c))


@dataclass
class Trajectory:
    """Samples of the tail ``(u_0, ..., u_K)`` on a fixed time grid."""

    times: np.ndarray
    states: np.ndarray
    step: float
    boundary: float = 0.0
    band_warnings: int = field(default=0, compare=False)

    @property
    def K(self) -> int:
        return self.states.shape[1] - 1

    def __len__(self) -> int:
        return self.times.size

    @property
    def samples(self):
        return list(zip(self.times, self.states))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


class SteadyResult(NamedTuple):
    final: np.ndarray
    T_hit: float
    converged: bool
    trajectory: Trajectory | None = None


# -- right-hand side ------------------------------------------------------------


def truncated_rhs(s, params: SystemParams) -> np.ndarray:
    """Derivatives of ``s_1..s_K`` given ``s = (1, s_1, ..., s_K, c)``."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size < 3:
        raise DomainError("s must hold s_0, at least one free coordinate, and the boundary")
    if np.any(~np.isfinite(s)) or np.any(s < -ABORT_TOL) or np.any(s > 1.0 + ABORT_TOL):
        raise DomainError("s must lie in [0, 1]")
    if abs(s[0] - 1.0) > ABORT_TOL:
        raise DomainError("s_0 must equal 1")
    lam, L, k = params.lam, params.L, params.k
    fs = _f(s, L, k)
    return lam * (fs[:-2] - fs[1:-1]) - k * (s[1:-1] - s[2:])


@numba.njit(cache=True, nogil=True)
def _poly(x, coefs, powers):
    total = 0.0
    for i in range(coefs.size):
        total += coefs[i] * x ** powers[i]
    return total


@numba.njit(cache=True, nogil=True)
def _rhs_into(x, out, lam, k, c, coefs, powers):
    K = x.size
    f_prev = _poly(1.0, coefs, powers)
    for j in range(K):
        fj = _poly(x[j], coefs, powers)
        nxt = x[j + 1] if j + 1 < K else c
        out[j] = lam * (f_prev - fj) - k * (x[j] - nxt)
        f_prev = fj


@numba.njit(cache=True, nogil=True)
def _rk4_advance(x, n_steps, dt, lam, k, c, coefs, powers, project_tol, abort_tol):
    """Advance ``x`` in place; returns (steps done, band warnings, worst violation)."""
    K = x.size
    k1 = np.empty(K)
    k2 = np.empty(K)
    k3 = np.empty(K)
    k4 = np.empty(K)
    tmp = np.empty(K)
    warnings = 0
    worst = 0.0
    for step in range(n_steps):
        _rhs_into(x, k1, lam, k, c, coefs, powers)
        for j in range(K):
            tmp[j] = x[j] + 0.5 * dt * k1[j]
        _rhs_into(tmp, k2, lam, k, c, coefs, powers)
        for j in range(K):
            tmp[j] = x[j] + 0.5 * dt * k2[j]
        _rhs_into(tmp, k3, lam, k, c, coefs, powers)
        for j in range(K):
            tmp[j] = x[j] + dt * k3[j]
        _rhs_into(tmp, k4, lam, k, c, coefs, powers)
        for j in range(K):
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])

        viol = 0.0
        upper = 1.0
        for j in range(K):
            viol = max(viol, x[j] - upper, c - x[j])
            upper = x[j]
        if viol > 0.0:
            worst = max(worst, viol)
            if viol > abort_tol:
                return step + 1, warnings, worst
            if viol > project_tol:
                warnings += 1
            upper = 1.0
            for j in range(K):
                x[j] = min(max(x[j], c), upper)
                upper = x[j]
    return n_steps, warnings, worst


def _coeff_arrays(params: SystemParams):
    terms = f_terms(params.L, params.k)
    return (np.array([float(c) for c, _ in terms]), np.array([float(p) for _, p in terms]))


class _Stepper:
    def __init__(self, spec: TruncatedOdeSpec, dt: float):
        self.params = spec.params
        self.c = float(spec.c)
        self.dt = float(dt)
        self.coefs, self.powers = _coeff_arrays(spec.params)
        self.x = spec.g.copy()
        self.warnings = 0

    def advance(self, n_steps: int, t_start: float) -> None:
        p = self.params
        done, warns, worst = _rk4_advance(self.x, n_steps, self.dt, p.lam, float(p.k), self.c,
                                          self.coefs, self.powers, PROJECT_TOL, ABORT_TOL)
        if warns:
            log.warning("projected %d state(s) with ordering violation up to %.3g", warns, worst)
            self.warnings += warns
        if done < n_steps or worst > ABORT_TOL:
            raise IntegrationError(
                f"state left the admissible region by {worst:.3g} near t={t_start + done * self.dt:.6g}; "
                f"reduce dt={self.dt}")

    def tail(self) -> np.ndarray:
        return np.concatenate(([1.0], self.x))


def _n_steps(T: float, dt: float) -> int:
    if dt <= 0:
        raise DomainError("dt must be positive")
    if T < dt:
        raise DomainError("horizon T must be >= dt")
    return int(math.ceil(T / dt - 1e-9))


def integrate(spec: TruncatedOdeSpec, T: float, dt: float | None = None,
              thin: int = 1) -> Trajectory:
    """RK4 solution of the truncated system on ``[0, T]``, every ``thin``-th step kept.

    Sample times are exact multiples of ``dt`` so trajectories computed with the
    same ``(dt, T)`` share a grid. The last step is always kept.
    """
    dt = default_dt(spec.params) if dt is None else float(dt)
    n = _n_steps(T, dt)
    if thin < 1:
        raise DomainError("thin must be >= 1")
    stepper = _Stepper(spec, dt)
    times = [0.0]
    states = [stepper.tail()]
    done = 0
    while done < n:
        chunk = min(thin, n - done)
        stepper.advance(chunk, done * dt)
        done += chunk
        times.append(done * dt)
        states.append(stepper.tail())
    return Trajectory(np.array(times), np.array(states), dt, spec.c, stepper.warnings)


def run_to_steady(g, params: SystemParams, tol: float = 1e-6, max_T: float = 500.0,
                  dt: float | None = None, K: int | None = None,
                  record: bool = False, thin: int = 100) -> SteadyResult:
    """Integrate from ``g`` (boundary 0) until ``rho(u(t), ubar) < tol`` or ``t = max_T``.

    The distance is checked after every step. With ``record=True`` the
    trajectory (every ``thin``-th step plus the hitting step) is returned too.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    K = default_truncation(params) if K is None else K
    dt = default_dt(params) if dt is None else float(dt)
    n = _n_steps(max_T, dt)
    ubar = fixed_point(params, M=max(64, K + 1))
    weights = 0.5 ** np.arange(1, K + 1)
    beyond = float(np.sum(ubar[K + 1:] * 0.5 ** np.arange(K + 1, ubar.size)))

    def distance(x):
        return float(np.sum(np.abs(x - ubar[1:K + 1]) * weights)) + beyond

    spec = TruncatedOdeSpec.from_tail(g, params, K, c=0.0)
    stepper = _Stepper(spec, dt)
    times, states = [0.0], [stepper.tail()]
    step = 0
    hit = distance(stepper.x) < tol
    while not hit and step < n:
        stepper.advance(1, step * dt)
        step += 1
        hit = distance(stepper.x) < tol
        if record and (step % thin == 0 or hit or step == n):
            times.append(step * dt)
            states.append(stepper.tail())
    traj = Trajectory(np.array(times), np.array(states), dt, 0.0, stepper.warnings) if record else None
    return SteadyResult(stepper.tail(), step * dt, bool(hit), traj)


# -- numerical property checks ------------------------------------------------------


def check_ordering(traj: Trajectory) -> float:
    """Max violation of ``1 = u_0 >= u_1 >= ... >= u_K >= c`` over all samples."""
    full = np.column_stack([traj.states, np.full(len(traj), traj.boundary)])
    viol = np.max(np.diff(full, axis=1), initial=0.0)
    return max(0.0, float(viol), float(np.max(np.abs(traj.states[:, 0] - 1.0))))


def _check_same_grid(a: Trajectory, b: Trajectory) -> None:
    if a.states.shape != b.states.shape or not np.array_equal(a.times, b.times):
        raise DomainError("trajectories do not share a time grid and truncation")


def check_pair_order(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """Largest amount by which ``b`` exceeds ``a`` anywhere (``a`` dominates at t=0)."""
    _check_same_grid(traj_a, traj_b)
    return max(0.0, float(np.max(traj_b.states - traj_a.states)))


def check_truncation_order(traj_small: Trajectory, traj_big: Trajectory) -> float:
    """Largest amount by which the K-truncation exceeds a longer one on shared indices."""
    if not np.array_equal(traj_small.times, traj_big.times):
        raise DomainError("trajectories do not share a time grid")
    if traj_big.K < traj_small.K:
        raise DomainError("second trajectory must have the longer truncation")
    K = traj_small.K
    return max(0.0, float(np.max(traj_small.states - traj_big.states[:, :K + 1])))


def taylor_envelope(u0: np.ndarray, t: np.ndarray, params: SystemParams) -> np.ndarray:
    """``sum_{i<=j} u_i(0) (lam k t)^(j-i) / (j-i)!`` for every sample time and j."""
    K = u0.size - 1
    rate = params.lam * params.k * np.asarray(t, dtype=float)
    d = np.arange(K + 1)
    fact = np.array([math.factorial(i) for i in d], dtype=float)
    with np.errstate(over="ignore"):
        powers = rate[:, None] ** d[None, :] / fact[None, :]
    env = np.zeros((rate.size, K + 1))
    for j in range(K + 1):
        env[:, j] = powers[:, j::-1] @ u0[:j + 1]
    return env


def check_taylor_envelope(traj: Trajectory, params: SystemParams) -> float:
    env = taylor_envelope(traj.states[0], traj.times, params)
    return max(0.0, float(np.max(traj.states - env)))


def check_moment_bound(traj: Trajectory, params: SystemParams) -> float:
    """Violation of ``v_1(u(t)) <= exp(lam k t) (1 + v_1(u(0)))``."""
    v1 = traj.states[:, 1:].sum(axis=1)
    with np.errstate(over="ignore"):
        bound = np.exp(params.lam * params.k * traj.times) * (1.0 + v1[0])
    return max(0.0, float(np.max(v1 - bound)))


def check_v1_dissipation(traj: Trajectory) -> float:
    """Largest increase of the mean queue length between consecutive samples."""
    v1 = traj.states[:, 1:].sum(axis=1)
    return max(0.0, float(np.max(np.diff(v1), initial=0.0)))


def step_halving_gap(spec: TruncatedOdeSpec, T: float, dt: float) -> float:
    """rho-distance between final states computed with ``dt`` and ``dt / 2``."""
    a = integrate(spec, T, dt, thin=_n_steps(T, dt)).final
    b = integrate(spec, T, dt / 2, thin=_n_steps(T, dt / 2)).final
    return float(np.sum(np.abs(a[1:] - b[1:]) * 0.5 ** np.arange(1, a.size)))


def trajectory_rows(traj: Trajectory):
    """Header and rows for CSV export: ``t,u1,...,uK``."""
    header = ["t"] + [f"u{j}" for j in range(1, traj.K + 1)]
    rows = [[t, *state[1:]] for t, state in zip(traj.times, traj.states)]
    return header, rows
