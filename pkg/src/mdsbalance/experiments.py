"""Experiment drivers behind the CLI subcommands.

Each driver takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult`: CSV tables keyed by file name, named pass/fail
checks, and a small JSON-able summary. Nothing is written here.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .io import params_slug
from .meanfield import (
    TruncatedOdeSpec,
    check_moment_bound,
    check_ordering,
    check_pair_order,
    check_taylor_envelope,
    check_truncation_order,
    default_dt,
    default_truncation,
    integrate,
    run_to_steady,
    trajectory_rows,
    truncated_rhs,
)
from .model import (
    SystemParams,
    eval_f,
    eval_f_prime,
    eval_w,
    fixed_point,
    identity_residuals,
    rho_distance,
    tail_bounds,
)
from .oracle import exact_stationary_capped
from .sim import SimConfig, SteadyEstimate, simulate_replications

BATTERY = ((2, 1), (3, 2), (4, 2), (5, 3), (4, 3))
BOUND_LAMBDAS = (0.5, 0.7, 0.9, 0.99)
SANDWICH_SLACK = 1e-15
CLOSED_FORM_TOL = 1e-14
IDENTITY_TOL = 1e-10
SHAPE_TOL = 1e-12
LEMMA_TOL = 1e-8
RHS_TOL = 1e-9
SIM_ABS_TOL = 0.02
ORACLE_ABS_TOL = 5e-3
SWEEP_LEVELS = 5
MAX_SUPPORT = 12


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def check(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# -- fixed point and bounds -------------------------------------------------------------


def sandwich_violation(params: SystemParams, M: int = 64) -> tuple[float, int]:
    """Largest excursion of the fixed point outside its bounds, over nonzero entries."""
    u = fixed_point(params, M=M)
    worst, rows = 0.0, 0
    for m in range(u.size):
        if u[m] == 0.0:
            break
        b = tail_bounds(m, params)
        worst = max(worst, b.lower - u[m], u[m] - b.upper)
        rows += 1
    return worst, rows


def classical_tail_gap(params: SystemParams, m_max: int = 8) -> float:
    """For k = 1: distance to ``lam^((L^m - 1)/(L - 1))`` over ``m <= m_max``."""
    u = fixed_point(params, M=max(m_max, 1))
    L, lam = params.L, params.lam
    exact = np.array([lam ** ((L**m - 1) // (L - 1)) for m in range(m_max + 1)])
    return float(np.max(np.abs(u[:m_max + 1] - exact)))


def _bound_rows(params: SystemParams, M: int):
    u = fixed_point(params, M=M)
    rows = []
    for m in range(u.size):
        if m > 0 and u[m] == 0.0:
            break
        b = tail_bounds(m, params)
        rows.append([m, u[m], b.upper, b.lower])
    return rows


def run_fixed_point(cfg: ExperimentConfig) -> ExperimentResult:
    p = SystemParams(cfg.lam, cfg.L, cfg.k)
    res = ExperimentResult()
    rows = _bound_rows(p, cfg.M)
    res.tables[f"fixed-point_{params_slug(p.lam, p.L, p.k)}.csv"] = (["m", "u_bar", "upper", "lower"], rows)
    worst, _ = sandwich_violation(p, cfg.M)
    res.check("sandwich", worst <= SANDWICH_SLACK, f"max excursion {worst:.3g}")
    if p.k == 1:
        gap = classical_tail_gap(p)
        res.check("classical-tail", gap < CLOSED_FORM_TOL, f"max gap {gap:.3g} for m <= 8")
        same = all(r[2] == r[3] for r in rows)
        res.check("bounds-coincide", same, "upper == lower bitwise" if same else "bounds differ")
    res.summary = {"levels": len(rows)}
    return res


def run_bounds(cfg: ExperimentConfig) -> ExperimentResult:
    """Sandwich of the fixed point on the fixed (L, k) x lambda battery."""
    res = ExperimentResult()
    rows, worst, mismatched = [], 0.0, 0
    for L, k in BATTERY:
        for lam in BOUND_LAMBDAS:
            p = SystemParams(lam, L, k)
            for m, u, up, lo in _bound_rows(p, cfg.M):
                rows.append([L, k, lam, m, u, up, lo])
                if u > 0:
                    worst = max(worst, lo - u, u - up)
                if k == 1 and up != lo:
                    mismatched += 1
    res.tables["bounds_battery.csv"] = (["L", "k", "lambda", "m", "u_bar", "upper", "lower"], rows)
    res.check("sandwich", worst <= SANDWICH_SLACK, f"max excursion {worst:.3g} over {len(rows)} rows")
    res.check("k1-coincide", mismatched == 0, f"{mismatched} rows with upper != lower at k=1")
    return res


# -- mean-field ODE ------------------------------------------------------------------------


def initial_conditions(params: SystemParams) -> dict:
    ubar = fixed_point(params)
    half = ubar / 2.0
    half[0] = 1.0
    return {"empty": np.array([1.0]), "double": np.minimum(1.0, 2.0 * ubar), "half": half}


def lemma_violations(params: SystemParams, K: int, dt: float, T: float,
                     pairs: int = 20, seed: int = 0) -> dict:
    """Max violation of each order/envelope property on integrator output."""
    ubar = fixed_point(params)
    starts = initial_conditions(params)
    trajs = {name: integrate(TruncatedOdeSpec.from_tail(g, params, K), T, dt, thin=10)
             for name, g in starts.items()}
    out = {
        "ordering": max(check_ordering(t) for t in trajs.values()),
        "taylor": max(check_taylor_envelope(t, params) for t in trajs.values()),
        "moment": max(check_moment_bound(t, params) for t in trajs.values()),
    }
    bigger = integrate(TruncatedOdeSpec.from_tail(starts["empty"], params, K + 1), T, dt, thin=10)
    out["truncation"] = check_truncation_order(trajs["empty"], bigger)
    rng = np.random.default_rng(seed)
    coupling = max(check_pair_order(trajs["double"], trajs["half"]),
                   check_pair_order(trajs["double"], trajs["empty"]))
    for _ in range(pairs):
        a = np.concatenate(([1.0], np.sort(rng.uniform(0, 1, K))[::-1]))
        b = np.concatenate(([1.0], np.sort(rng.uniform(0, 1, K))[::-1]))
        hi, lo = np.maximum(a, b), np.minimum(a, b)
        ta = integrate(TruncatedOdeSpec.from_tail(hi, params, K), T, dt, thin=10)
        tb = integrate(TruncatedOdeSpec.from_tail(lo, params, K), T, dt, thin=10)
        coupling = max(coupling, check_pair_order(ta, tb))
    out["coupling"] = coupling
    out["rhs_at_fixed_point"] = float(np.max(np.abs(truncated_rhs(ubar[:K + 2], params))))
    return out


def run_ode_converge(cfg: ExperimentConfig) -> ExperimentResult:
    p = SystemParams(cfg.lam, cfg.L, cfg.k)
    K = cfg.K or default_truncation(p)
    dt = cfg.dt if cfg.dt is not None else default_dt(p)
    thin = max(1, int(round(1.0 / dt)))
    slug = params_slug(p.lam, p.L, p.k)
    res = ExperimentResult()
    ubar = fixed_point(p)
    summary_rows = []
    for name, g in initial_conditions(p).items():
        run = run_to_steady(g, p, tol=cfg.tol, max_T=cfg.T, dt=dt, K=K, record=True, thin=thin)
        res.tables[f"ode-converge_{slug}_{name}.csv"] = trajectory_rows(run.trajectory)
        dist = rho_distance(run.final, ubar)
        summary_rows.append([name, int(run.converged), run.T_hit, dist])
        res.check(f"converge-{name}", run.converged, f"rho={dist:.3g} at T={run.T_hit:g}")
    res.tables[f"ode-converge_{slug}_summary.csv"] = (["start", "converged", "T_hit", "rho_final"], summary_rows)
    lemmas = lemma_violations(p, K, dt, T=min(cfg.T, 20.0), seed=cfg.seed)
    rhs = lemmas.pop("rhs_at_fixed_point")
    res.check("rhs-at-fixed-point", rhs < RHS_TOL, f"max |rhs(u_bar)| = {rhs:.3g}")
    for name, v in lemmas.items():
        res.check(f"lemma-{name}", v < LEMMA_TOL, f"max violation {v:.3g}")
    res.summary = {"K": K, "dt": dt, "lemma_violations": lemmas}
    return res


# -- simulation --------------------------------------------------------------------------


def steady_rows(est: SteadyEstimate, params: SystemParams, M: int):
    ubar = fixed_point(params, M=M)
    nz = np.flatnonzero(est.u_hat > 0)
    top = min(M, max(SWEEP_LEVELS, int(nz[-1]) + 1 if nz.size else 0))
    rows = []
    for m in range(top + 1):
        b = tail_bounds(m, params)
        rows.append([m, est.u_hat[m], est.stderr[m], ubar[m], b.upper, b.lower])
    return ["m", "u_hat", "stderr", "u_bar", "upper_bound", "lower_bound"], rows


def _simulate(cfg: ExperimentConfig, n: int, cap: int) -> SteadyEstimate:
    p = SystemParams(cfg.lam, cfg.L, cfg.k, n)
    sc = SimConfig(p, seed=cfg.seed, warmup_time=cfg.warmup, measure_time=cfg.measure_time,
                   cap=cap, M=cfg.M)
    return simulate_replications(sc, cfg.replications)


def max_deviation(est: SteadyEstimate, params: SystemParams, levels: int = SWEEP_LEVELS):
    """``max_{1<=m<=levels} |u_hat_m - u_bar_m|`` and the largest stderr over those m."""
    ubar = fixed_point(params, M=max(levels, est.u_hat.size - 1))
    m = np.arange(1, levels + 1)
    return float(np.max(np.abs(est.u_hat[m] - ubar[m]))), float(np.max(est.stderr[m]))


def run_simulate(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    est = _simulate(cfg, p.n, cfg.cap)
    res = ExperimentResult()
    res.tables[f"simulate_{params_slug(p.lam, p.L, p.k, p.n)}.csv"] = steady_rows(est, p, cfg.M)
    if cfg.cap == 0:
        ubar = fixed_point(p, M=cfg.M)
        worst = max(abs(est.u_hat[m] - ubar[m]) - max(SIM_ABS_TOL, 3 * est.stderr[m])
                    for m in range(1, SWEEP_LEVELS + 1))
        res.check("near-fixed-point", worst <= 0, f"worst margin {worst:.3g} (m <= {SWEEP_LEVELS})")
    res.summary = {"events": est.total_events, "rate_audit_z": est.rate_audit_z()}
    return res


def oracle_agreement(cfg: ExperimentConfig):
    """Exact capped stationary mean vs capped simulation, coordinatewise."""
    p = cfg.params
    exact = exact_stationary_capped(p, cfg.cap)
    est = _simulate(cfg, p.n, cfg.cap)
    m = np.arange(cfg.cap + 1)
    diff = np.abs(est.u_hat[m] - exact.u_mean)
    allowed = np.maximum(ORACLE_ABS_TOL, 3 * est.stderr[m])
    return exact, est, diff, allowed


def run_oracle_check(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    exact, est, diff, allowed = oracle_agreement(cfg)
    rows = [[m, exact.u_mean[m], est.u_hat[m], est.stderr[m], diff[m], allowed[m]]
            for m in range(cfg.cap + 1)]
    res = ExperimentResult()
    res.tables[f"oracle-check_{params_slug(p.lam, p.L, p.k, p.n)}_B{cfg.cap}.csv"] = (
        ["m", "u_exact", "u_hat", "stderr", "abs_diff", "allowed"], rows)
    bad = int(np.sum(diff > allowed))
    res.check("oracle-agreement", bad == 0, f"{bad} coordinates outside max(5e-3, 3 stderr)")
    res.summary = {"max_abs_diff": float(diff.max()), "events": est.total_events}
    return res


# -- identities and shape ------------------------------------------------------------------


def identity_maxima(pairs, draws: int, seed: int) -> dict:
    """Max residual per identity and per (L, k), over ``draws`` random simplex vectors in total."""
    rng = np.random.default_rng(seed)
    out = {pair: np.zeros(3) for pair in pairs}
    for i in range(draws):
        L, k = pairs[i % len(pairs)]
        r = rng.dirichlet(np.ones(int(rng.integers(1, MAX_SUPPORT + 1))))
        out[(L, k)] = np.maximum(out[(L, k)], identity_residuals(r / r.sum(), L, k))
    return out


def f_shape_violations(L: int, k: int, points: int = 1000) -> dict:
    x = np.linspace(0.0, 1.0, points)
    f = eval_f(x, L, k)
    fp = eval_f_prime(x, L, k)
    return {
        "endpoints": max(abs(f[0]), abs(f[-1] - k)),
        "monotone": max(0.0, float(-np.min(np.diff(f)))),
        "convex": max(0.0, float(-np.min(np.diff(f, 2)))),
        "derivative": max(0.0, float(-fp.min()), float(fp.max() - L)),
        "w_nonpositive": max(0.0, float(np.max(eval_w(x, L, k)))),
        "envelope": max(0.0, float(np.max(k * x ** (L - k + 1) - f)), float(np.max(f - k * x ** (L / k)))),
    }


def run_identity_check(cfg: ExperimentConfig) -> ExperimentResult:
    pairs = list(BATTERY)
    if (cfg.L, cfg.k) not in pairs:
        pairs.append((cfg.L, cfg.k))
    maxima = identity_maxima(pairs, cfg.draws, cfg.seed)
    res = ExperimentResult()
    rows, worst_id, worst_shape = [], 0.0, 0.0
    for L, k in pairs:
        shape = f_shape_violations(L, k)
        rows.append([L, k, *maxima[(L, k)], max(shape.values())])
        worst_id = max(worst_id, float(maxima[(L, k)].max()))
        worst_shape = max(worst_shape, max(shape.values()))
    res.tables["identity-check.csv"] = (
        ["L", "k", "rank_sum", "rank_tail", "f_difference", "f_shape"], rows)
    res.check("identities", worst_id < IDENTITY_TOL, f"max residual {worst_id:.3g} over {cfg.draws} draws")
    res.check("f-shape", worst_shape <= SHAPE_TOL, f"max violation {worst_shape:.3g}")
    res.summary = {"max_residual": worst_id}
    return res


# -- finite-n sweep ------------------------------------------------------------------------


def sweep_verdict(devs, stderrs, final_tol: float = SIM_ABS_TOL):
    """Nonincreasing deviations up to one stderr, and the last one below ``final_tol``.

    The slack between consecutive sizes is the larger of their max stderrs.
    """
    steps = [devs[i + 1] <= devs[i] + max(stderrs[i], stderrs[i + 1]) for i in range(len(devs) - 1)]
    return all(steps), devs[-1] < final_tol


def run_interchange_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult()
    ns = sorted(cfg.n_values)
    with ThreadPoolExecutor(max_workers=len(ns)) as pool:
        ests = list(pool.map(lambda n: _simulate(cfg, n, 0), ns))
    devs, ses, summary_rows = [], [], []
    for n, est in zip(ns, ests):
        p = SystemParams(cfg.lam, cfg.L, cfg.k, n)
        res.tables[f"interchange-sweep_{params_slug(p.lam, p.L, p.k, n)}.csv"] = steady_rows(est, p, cfg.M)
        dev, se = max_deviation(est, p)
        devs.append(dev)
        ses.append(se)
        summary_rows.append([n, dev, se, est.total_events])
    res.tables[f"interchange-sweep_{params_slug(cfg.lam, cfg.L, cfg.k)}_summary.csv"] = (
        ["n", "max_dev", "max_stderr", "events"], summary_rows)
    monotone, small = sweep_verdict(devs, ses)
    res.check("deviation-nonincreasing", monotone, " ".join(f"n={n}:{d:.4f}" for n, d in zip(ns, devs)))
    res.check("largest-n-close", small, f"max dev {devs[-1]:.4f} at n={ns[-1]} (< {SIM_ABS_TOL})")
    res.summary = {"max_dev": dict(zip(map(str, ns), devs))}
    return res


RUNNERS = {
    "fixed-point": run_fixed_point,
    "bounds": run_bounds,
    "ode-converge": run_ode_converge,
    "simulate": run_simulate,
    "oracle-check": run_oracle_check,
    "identity-check": run_identity_check,
    "interchange-sweep": run_interchange_sweep,
}


def run(cfg: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg)

