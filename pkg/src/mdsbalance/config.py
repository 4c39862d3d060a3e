"""Flat experiment configuration: YAML file plus command-line overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .errors import DomainError
from .model import DEFAULT_M, SystemParams
from .oracle import MAX_STATES

EXPERIMENTS = (
    "fixed-point", "bounds", "ode-converge", "simulate",
    "oracle-check", "identity-check", "interchange-sweep",
)


class ConfigError(ValueError):
    """Unreadable or invalid configuration; the message names the key."""


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    lam: float
    L: int
    k: int
    n: int | None = None
    M: int = DEFAULT_M
    K: int | None = None          # None: truncation chosen from the fixed point
    dt: float | None = None       # None: 0.01 / k
    T: float = 500.0              # horizon cap for ode-converge
    tol: float = 1e-6
    seed: int = 0
    warmup: float = 1000.0
    measure_time: float = 20000.0
    cap: int = 0                  # 0: uncapped simulation
    replications: int = 1
    draws: int = 1000
    n_values: tuple[int, ...] = (50, 200, 800)
    out: str = "results"

    @property
    def params(self) -> SystemParams:
        return SystemParams(lam=self.lam, L=self.L, k=self.k, n=self.n)

    def echo(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["n_values"] = list(self.n_values)
        return d


# file key -> (dataclass field, type)
_KEYS = {
    "experiment": ("experiment", str),
    "lambda": ("lam", float),
    "L": ("L", int),
    "k": ("k", int),
    "n": ("n", int),
    "M": ("M", int),
    "K": ("K", int),
    "dt": ("dt", float),
    "T": ("T", float),
    "tol": ("tol", float),
    "seed": ("seed", int),
    "warmup": ("warmup", float),
    "measure_time": ("measure_time", float),
    "cap": ("cap", int),
    "replications": ("replications", int),
    "draws": ("draws", int),
    "n_values": ("n_values", tuple),
    "out": ("out", str),
}
KEYS = tuple(_KEYS)


def _coerce(key: str, value, kind):
    if value is None:
        return None
    try:
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is tuple:
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(_coerce(key, v, int) for v in items)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to scalars")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested sections are not supported")
    return data


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond, key, rule):
        if not cond:
            raise ConfigError(f"{key}: violates {rule}")

    need(cfg.experiment in EXPERIMENTS, "experiment", f"one of {', '.join(EXPERIMENTS)}")
    try:
        cfg.params
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    need(cfg.M >= 1, "M", "M >= 1")
    need(cfg.K is None or cfg.K >= 1, "K", "K >= 1")
    need(cfg.dt is None or cfg.dt > 0, "dt", "dt > 0")
    need(cfg.T > 0, "T", "T > 0")
    need(cfg.tol > 0, "tol", "tol > 0")
    need(cfg.seed >= 0, "seed", "seed >= 0")
    need(cfg.warmup >= 0, "warmup", "warmup >= 0")
    need(cfg.measure_time > 0, "measure_time", "measure_time > 0")
    need(cfg.cap >= 0, "cap", "cap >= 0")
    need(cfg.cap <= cfg.M, "cap", "cap <= M")
    need(cfg.replications >= 1, "replications", "replications >= 1")
    need(cfg.draws >= 1, "draws", "draws >= 1")
    need(len(cfg.n_values) >= 1, "n_values", "at least one population size")
    need(all(v >= cfg.L for v in cfg.n_values), "n_values", f"every n >= L={cfg.L}")
    if cfg.experiment in ("simulate", "oracle-check"):
        need(cfg.n is not None, "n", f"n is required for {cfg.experiment}")
    if cfg.experiment == "oracle-check":
        need(cfg.cap >= 1, "cap", "cap >= 1 for oracle-check")
        need((cfg.cap + 1) ** cfg.n <= MAX_STATES, "cap", f"(cap+1)^n <= {MAX_STATES}")


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge file values and overrides (overrides win), fill defaults, validate."""
    raw = read_config_file(path) if path is not None else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(raw) - set(_KEYS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key (allowed: {', '.join(KEYS)})")
    for key in ("experiment", "lambda", "L", "k"):
        if key not in raw:
            raise ConfigError(f"{key}: required")
    values = {_KEYS[k][0]: _coerce(k, v, _KEYS[k][1]) for k, v in raw.items()}
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg

