"""Run configuration: one JSON document, validated with field paths in errors."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .presets import PRESETS, preset, preset_names
from .series import FourierTaylor

__all__ = ["ConfigError", "RunConfig", "TruncationConfig", "OuterConfig", "VerifyConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path}: {msg}")


@dataclass
class TruncationConfig:
    p_degree: int = 4
    fourier_order: int = 32
    lie_order: int = 12
    tail_tol: float = 1e-16
    coeff_floor: float = 1e-40


@dataclass
class OuterConfig:
    max_iters: int = 8
    tol: float | None = None


@dataclass
class VerifyConfig:
    samples: int = 8
    horizon: float = 100.0
    dt: float = 0.5
    columns: int = 6
    symplectic: bool = False


@dataclass
class RunConfig:
    hamiltonian: str | dict
    omega: list[float]
    gamma: float
    tau: float
    rho0: float = 0.1
    sigma0: float = 0.5
    epsilon: float = 1e-3
    steps: int = 6
    alpha: float = 9.0
    alpha_override: bool = False
    check_horizon: int | None = None
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.omega)

    def series(self) -> FourierTaylor:
        """Perturbation ``h`` (the Hamiltonian without ``omega.p``)."""
        if isinstance(self.hamiltonian, str):
            return preset(self.hamiltonian, self.epsilon)[0]
        return FourierTaylor.from_json(self.hamiltonian)

    def to_json(self) -> dict:
        return asdict(self)


_TOP = {f for f in RunConfig.__dataclass_fields__}


def _num(d: dict, key: str, path: str, *, positive=False, nonneg=False, integer=False, default=None):
    if key not in d:
        return default
    v = d[key]
    p = f"{path}.{key}" if path else key
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(p, f"expected a number, got {v!r}")
    if integer and (not float(v).is_integer()):
        raise ConfigError(p, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(p, "must be finite")
    if positive and not v > 0:
        raise ConfigError(p, f"must be positive, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(p, f"must be non-negative, got {v!r}")
    return int(v) if integer else float(v)


def _section(raw: dict, key: str, cls, spec: dict):
    d = raw.get(key, {})
    if not isinstance(d, dict):
        raise ConfigError(key, "expected an object")
    unknown = sorted(set(d) - set(cls.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"{key}.{unknown[0]}", "unknown field")
    kw = {}
    for name, opts in spec.items():
        if name in d and d[name] is None and opts.get("nullable"):
            kw[name] = None
            continue
        if opts.get("bool"):
            if name in d:
                if not isinstance(d[name], bool):
                    raise ConfigError(f"{key}.{name}", "expected true or false")
                kw[name] = d[name]
            continue
        v = _num(d, name, key, **{k: v for k, v in opts.items() if k != "nullable"})
        if v is not None:
            kw[name] = v
    return cls(**kw)


def parse_config(raw: Any) -> RunConfig:
    """Validate a decoded JSON object and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("$", "configuration must be a JSON object")
    unknown = sorted(set(raw) - _TOP)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    if "hamiltonian" not in raw:
        raise ConfigError("hamiltonian", "required (a preset name or a series object)")
    ham = raw["hamiltonian"]
    defaults: dict = {}
    if isinstance(ham, str):
        if ham not in PRESETS:
            raise ConfigError("hamiltonian", f"unknown preset {ham!r}; available: {', '.join(preset_names())}")
        defaults = PRESETS[ham].defaults
        n = PRESETS[ham].n
    elif isinstance(ham, dict):
        try:
            n = FourierTaylor.from_json(ham).n
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("hamiltonian", f"invalid series: {exc}") from exc
    else:
        raise ConfigError("hamiltonian", "expected a preset name or a series object")

    omega = raw.get("omega", defaults.get("omega"))
    if omega is None:
        raise ConfigError("omega", "required for explicit Hamiltonians")
    if not isinstance(omega, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in omega):
        raise ConfigError("omega", "expected a list of numbers")
    if len(omega) != n:
        raise ConfigError("omega", f"length {len(omega)} does not match the Hamiltonian dimension {n}")
    merged = {**{k: v for k, v in defaults.items() if k != "truncation"}, **raw}

    gamma = _num(merged, "gamma", "", positive=True)
    tau = _num(merged, "tau", "", nonneg=True)
    if gamma is None:
        raise ConfigError("gamma", "required")
    if tau is None:
        raise ConfigError("tau", "required")
    if tau < n - 1:
        raise ConfigError("tau", f"must be >= n-1 = {n - 1}")
    alpha_override = merged.get("alpha_override", False)
    if not isinstance(alpha_override, bool):
        raise ConfigError("alpha_override", "expected true or false")
    alpha = _num(merged, "alpha", "", positive=True, default=9.0)
    if alpha < 9 and not alpha_override:
        raise ConfigError("alpha", f"must be >= 9 (got {alpha}); set alpha_override to run anyway")
    if alpha <= 4:
        raise ConfigError("alpha", "must exceed 4 so that the domains stay non-empty")
    trunc_raw = {**defaults.get("truncation", {}), **raw.get("truncation", {})} if isinstance(raw.get("truncation", {}), dict) else raw["truncation"]
    cfg = RunConfig(
        hamiltonian=ham,
        omega=[float(x) for x in omega],
        gamma=gamma,
        tau=tau,
        rho0=_num(merged, "rho0", "", positive=True, default=0.1),
        sigma0=_num(merged, "sigma0", "", positive=True, default=0.5),
        epsilon=_num(merged, "epsilon", "", nonneg=True, default=1e-3),
        steps=_num(merged, "steps", "", positive=True, integer=True, default=6),
        alpha=alpha,
        alpha_override=alpha_override,
        check_horizon=_num(merged, "check_horizon", "", positive=True, integer=True),
        truncation=_section(
            {"truncation": trunc_raw},
            "truncation",
            TruncationConfig,
            {
                "p_degree": {"integer": True, "positive": True},
                "fourier_order": {"integer": True, "positive": True},
                "lie_order": {"integer": True, "positive": True},
                "tail_tol": {"nonneg": True},
                "coeff_floor": {"nonneg": True},
            },
        ),
        outer=_section(raw, "outer", OuterConfig, {"max_iters": {"integer": True, "positive": True}, "tol": {"positive": True, "nullable": True}}),
        verify=_section(
            raw,
            "verify",
            VerifyConfig,
            {
                "samples": {"integer": True, "positive": True},
                "horizon": {"positive": True},
                "dt": {"positive": True},
                "columns": {"integer": True, "positive": True},
                "symplectic": {"bool": True},
            },
        ),
        seed=_num(merged, "seed", "", integer=True, nonneg=True, default=0),
    )
    if cfg.rho0 > 0.25:
        raise ConfigError("rho0", f"must be <= 1/4 for the size estimates to apply, got {cfg.rho0}")
    if cfg.verify.columns < 2:
        raise ConfigError("verify.columns", "need at least 2 extrapolation columns")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a configuration file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}", exc.msg) from exc
    return parse_config(raw)
