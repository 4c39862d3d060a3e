import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdsbalance.errors import DomainError, IntegrationError
from mdsbalance.meanfield import (
    TruncatedOdeSpec,
    check_moment_bound,
    check_ordering,
    check_pair_order,
    check_taylor_envelope,
    check_truncation_order,
    check_v1_dissipation,
    default_truncation,
    integrate,
    run_to_steady,
    step_halving_gap,
    taylor_envelope,
    trajectory_rows,
    truncated_rhs,
)
from mdsbalance.model import SystemParams, eval_f, fixed_point, rho_distance

P = SystemParams(lam=0.7, L=3, k=2)
K = 12


def _empty(K, params=P, c=0.0):
    return TruncatedOdeSpec(K=K, c=c, params=params, g=np.full(K, c))


def _at_fixed_point(params=P, K=K):
    ubar = fixed_point(params)
    return TruncatedOdeSpec(K=K, c=ubar[K + 1], params=params, g=ubar[1:K + 1])


# -- right-hand side ---------------------------------------------------------------


@pytest.mark.parametrize("L,k,lam", [(2, 1, 0.5), (3, 2, 0.7), (5, 3, 0.9), (4, 3, 0.99)])
def test_rhs_vanishes_at_fixed_point(L, k, lam):
    p = SystemParams(lam=lam, L=L, k=k)
    ubar = fixed_point(p)
    assert np.max(np.abs(truncated_rhs(ubar[:K + 2], p))) < 1e-9


def test_rhs_empty_system():
    s = np.zeros(K + 2)
    s[0] = 1.0
    rhs = truncated_rhs(s, P)
    assert rhs[0] == pytest.approx(P.lam * P.k, abs=1e-15)
    np.testing.assert_array_equal(rhs[1:], 0.0)


def test_rhs_single_coordinate():
    s1 = 0.3
    rhs = truncated_rhs([1.0, s1, 0.0], P)
    assert rhs[0] == pytest.approx(P.lam * (P.k - eval_f(s1, 3, 2)) - P.k * s1, abs=1e-15)


def test_rhs_rejects_out_of_range():
    with pytest.raises(DomainError):
        truncated_rhs([1.0, 1.5, 0.0], P)
    with pytest.raises(DomainError):
        truncated_rhs([1.0, -0.1, 0.0], P)


# -- initial data validation -----------------------------------------------------------------


def test_spec_rejects_unordered_initial_data():
    with pytest.raises(DomainError):
        TruncatedOdeSpec(K=2, c=0.0, params=P, g=np.array([0.2, 0.5]))
    with pytest.raises(DomainError):
        TruncatedOdeSpec(K=2, c=0.3, params=P, g=np.array([0.5, 0.2]))
    with pytest.raises(DomainError):
        TruncatedOdeSpec(K=3, c=0.0, params=P, g=np.array([0.5, 0.2]))


def test_default_truncation():
    assert default_truncation(P) == 12
    assert default_truncation(SystemParams(lam=0.999, L=2, k=1)) > 12


# -- integrate --------------------------------------------------------------------


def test_fixed_point_is_stationary():
    traj = integrate(_at_fixed_point(), T=20.0, dt=0.005, thin=10)
    ubar = fixed_point(P)
    assert np.max(np.abs(traj.states - ubar[:K + 1])) < 1e-8


@pytest.mark.parametrize("L,k,lam", [(3, 2, 0.7), (2, 1, 0.5), (4, 2, 0.6)])
def test_first_coordinate_rises_to_lambda(L, k, lam):
    p = SystemParams(lam=lam, L=L, k=k)
    traj = integrate(_empty(K, p), T=100.0 / k, dt=0.005, thin=5)
    u1 = traj.states[:, 1]
    assert np.all(np.diff(u1) >= -1e-12)
    assert abs(u1[-1] - lam) < 1e-6


def test_sample_grid_and_shape():
    traj = integrate(_empty(4), T=1.0, dt=0.1, thin=3)
    np.testing.assert_allclose(traj.times, [0.0, 0.3, 0.6, 0.9, 1.0], atol=1e-15)
    assert traj.states.shape == (5, 5)
    assert np.all(traj.states[:, 0] == 1.0)
    assert len(traj.samples) == 5


def test_doubling_truncation_is_monotone():
    small = integrate(_empty(6), T=10.0, dt=0.005, thin=20)
    big = integrate(_empty(12), T=10.0, dt=0.005, thin=20)
    assert check_truncation_order(small, big) < 1e-9


def test_integrator_aborts_on_huge_step():
    with pytest.raises(IntegrationError, match="reduce dt"):
        integrate(_empty(K), T=10.0, dt=2.0)


def test_integrate_rejects_bad_horizon():
    with pytest.raises(DomainError):
        integrate(_empty(K), T=0.001, dt=0.01)
    with pytest.raises(DomainError):
        integrate(_empty(K), T=1.0, dt=-0.01)


def test_step_halving_consistency():
    g = fixed_point(P)
    spec = TruncatedOdeSpec.from_tail(np.minimum(1.0, 2 * g), P, K)
    assert step_halving_gap(spec, T=5.0, dt=0.01) < 1e-8


def test_trajectory_rows():
    traj = integrate(_empty(3), T=0.2, dt=0.1)
    header, rows = trajectory_rows(traj)
    assert header == ["t", "u1", "u2", "u3"]
    assert len(rows) == 3 and len(rows[0]) == 4


# -- run_to_steady ------------------------------------------------------------------


def test_steady_from_fixed_point_is_immediate():
    res = run_to_steady(fixed_point(P), P, tol=1e-6, K=K)
    assert res.converged and res.T_hit == 0.0


def test_steady_from_empty_system():
    res = run_to_steady(np.array([1.0]), P, tol=1e-6, max_T=200.0, K=K)
    assert res.converged
    assert 0 < res.T_hit < 200.0
    assert rho_distance(res.final, fixed_point(P)) < 1e-6


def test_steady_from_above_stays_above_and_dissipates():
    ubar = fixed_point(P)
    g = np.minimum(1.0, 2 * ubar)
    res = run_to_steady(g, P, tol=1e-6, max_T=200.0, K=K, record=True, thin=10)
    assert res.converged
    traj = res.trajectory
    assert np.all(traj.states >= ubar[:K + 1] - 1e-9)
    assert check_v1_dissipation(traj) < 1e-9
    # u_1 and u_2 fall monotonically; deeper coordinates first overshoot,
    # since f(2x) ~ 4 f(x) near 0 makes their initial drift positive.
    assert np.all(np.diff(traj.states[:, 1:3], axis=0) <= 1e-12)
    assert np.max(np.diff(traj.states[:, 3], axis=0)) > 0


def test_steady_reports_non_convergence():
    res = run_to_steady(np.array([1.0]), P, tol=1e-12, max_T=1.0, dt=0.01, K=K)
    assert not res.converged and res.T_hit == pytest.approx(1.0)


# -- property checks ----------------------------------------------------------------


def test_pair_order_identical_is_zero():
    a = integrate(_empty(K), T=5.0, dt=0.01)
    b = integrate(_empty(K), T=5.0, dt=0.01)
    assert check_pair_order(a, b) == 0.0


def test_pair_order_grid_mismatch():
    a = integrate(_empty(K), T=5.0, dt=0.01)
    b = integrate(_empty(K), T=5.0, dt=0.02)
    with pytest.raises(DomainError):
        check_pair_order(a, b)


def _random_tail(rng, K):
    return np.concatenate(([1.0], np.sort(rng.uniform(0, 1, K))[::-1]))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coupling_with_fixed_point(seed):
    ubar = fixed_point(P)[:K + 1]
    g = _random_tail(np.random.default_rng(seed), K)
    hi = TruncatedOdeSpec.from_tail(np.maximum(g, ubar), P, K)
    lo = TruncatedOdeSpec.from_tail(np.minimum(g, ubar), P, K)
    a = integrate(hi, T=10.0, dt=0.005, thin=10)
    b = integrate(lo, T=10.0, dt=0.005, thin=10)
    assert check_pair_order(a, b) < 1e-8
    assert check_ordering(a) < 1e-8 and check_ordering(b) < 1e-8


def test_boundary_ordering_preserves_order():
    ubar = fixed_point(P)
    g = ubar[1:K + 1]
    a = integrate(TruncatedOdeSpec(K=K, c=ubar[K + 1], params=P, g=g), T=10.0, dt=0.005)
    b = integrate(TruncatedOdeSpec(K=K, c=0.0, params=P, g=g), T=10.0, dt=0.005)
    assert check_pair_order(a, b) < 1e-8


def test_taylor_envelope_at_zero_and_j0():
    traj = integrate(_empty(K), T=2.0, dt=0.01)
    env = taylor_envelope(traj.states[0], traj.times, P)
    np.testing.assert_array_equal(env[0], traj.states[0])
    assert np.all(env[:, 0] >= 1.0)
    assert check_taylor_envelope(traj, P) < 1e-8


def test_taylor_first_coordinate_from_empty():
    traj = integrate(_empty(K), T=0.5, dt=0.005)
    u1 = traj.states[:, 1]
    assert np.all(u1 <= P.lam * P.k * traj.times + 1e-12)


def test_moment_bound_cases():
    traj = integrate(_at_fixed_point(), T=20.0, dt=0.01, thin=10)
    assert check_moment_bound(traj, P) == 0.0
    p = SystemParams(lam=0.5, L=3, k=2)
    g = 0.9 ** np.arange(K + 1)
    traj = integrate(TruncatedOdeSpec.from_tail(g, p, K), T=20.0, dt=0.005, thin=10)
    assert check_moment_bound(traj, p) < 1e-8
    assert check_taylor_envelope(traj, p) < 1e-8
