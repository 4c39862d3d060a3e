"""``mdsbalance`` command line: one subcommand per experiment."""
from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config
from .errors import (
    DomainError,
    IntegrationError,
    SimulationError,
    SingularChainError,
    StateSpaceError,
)
from .experiments import run
from .io import params_slug, write_outputs

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

_D = ExperimentConfig("fixed-point", 0.5, 2, 1)  # field defaults, for help text

# flag, config key, type, help
_KNOBS = (
    ("--lambda", "lambda", float, "per-server arrival rate, 0 < lambda < 1 (required)"),
    ("--L", "L", int, "servers sampled per arrival (required)"),
    ("--k", "k", int, "jobs routed per arrival, 1 <= k < L (required)"),
    ("--n", "n", int, "number of servers (simulate, oracle-check)"),
    ("--M", "M", int, f"tracked queue length / fixed-point length (default {_D.M})"),
    ("--K", "K", int, "ODE truncation (default: max(12, first m with u_bar_m < 1e-14))"),
    ("--dt", "dt", float, "RK4 step (default 0.01/k)"),
    ("--T", "T", float, f"ODE horizon cap (default {_D.T:g})"),
    ("--tol", "tol", float, f"ODE convergence tolerance in rho (default {_D.tol:g})"),
    ("--warmup", "warmup", float, f"simulation warmup time (default {_D.warmup:g})"),
    ("--measure-time", "measure_time", float, f"simulation measurement time (default {_D.measure_time:g})"),
    ("--cap", "cap", int, f"queue cap B, 0 = uncapped (default {_D.cap})"),
    ("--replications", "replications", int, f"independent replications (default {_D.replications})"),
    ("--draws", "draws", int, f"random simplex draws for identity-check (default {_D.draws})"),
    ("--n-values", "n_values", str, "comma-separated sizes for interchange-sweep (default 50,200,800)"),
)


def _global_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, metavar="PATH", help="flat YAML config; flags override it")
    p.add_argument("--out", default=S, metavar="DIR", help=f"output directory (default {_D.out})")
    p.add_argument("--seed", type=int, default=S, help=f"RNG seed (default {_D.seed})")
    p.add_argument("--check", action="store_true", default=S,
                   help="exit 3 if any acceptance gate of the experiment fails")
    p.add_argument("-v", "--verbose", action="store_true", default=S, help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdsbalance", allow_abbrev=False,
        description="Mean-field and simulation experiments for batch-sampling load balancing.")
    _global_flags(parser)
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    _global_flags(common)
    for flag, key, kind, text in _KNOBS:
        common.add_argument(flag, dest=key, type=kind, default=argparse.SUPPRESS, help=text)
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], allow_abbrev=False, help=f"run the {name} experiment")
    return parser


def _config_from_args(ns: argparse.Namespace) -> tuple[ExperimentConfig, bool]:
    opts = vars(ns).copy()
    path = opts.pop("config", None)
    check = opts.pop("check", False)
    opts.pop("verbose", None)
    return load_config(path, opts), check


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, check = _config_from_args(ns)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    start = time.perf_counter()
    try:
        result = run(cfg)
    except (DomainError, StateSpaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IntegrationError, SingularChainError, SimulationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    wall = time.perf_counter() - start

    slug = params_slug(cfg.lam, cfg.L, cfg.k, cfg.n)
    extra = {
        "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in result.checks],
        "summary": result.summary,
    }
    try:
        paths = write_outputs(result.tables, cfg.out, f"{cfg.experiment}_{slug}.manifest.json",
                              cfg.echo(), wall, extra)
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_INVALID

    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"wrote {len(paths)} files to {cfg.out}")
    if check and not result.passed:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
