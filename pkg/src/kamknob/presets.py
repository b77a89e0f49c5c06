"""Built-in Hamiltonians.

Each preset returns the perturbation ``h`` (the Hamiltonian minus ``omega.p``)
together with suggested defaults for the remaining configuration fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .series import FourierTaylor

__all__ = ["Preset", "PRESETS", "preset", "preset_names", "UnknownPreset"]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class UnknownPreset(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    n: int
    defaults: dict

    def series(self, eps: float) -> FourierTaylor:
        return _BUILDERS[self.name](eps)


def _pendulum(eps: float) -> FourierTaylor:
    return FourierTaylor.monomial(1, [2], 0.5) + FourierTaylor.cos(1, [1], eps)


def _two_dof_golden(eps: float) -> FourierTaylor:
    F = FourierTaylor
    return (
        F.monomial(2, [2, 0], 0.5)
        + F.monomial(2, [0, 2], 0.5)
        + F.cos(2, [1, 0], eps)
        + F.cos(2, [1, -1], eps)
    )


def _forced_pendulum(eps: float) -> FourierTaylor:
    # p_2 is the action conjugate to the forcing phase q_2 = omega_2 t
    return FourierTaylor.monomial(2, [2, 0], 0.5) + FourierTaylor.cos(2, [1, -1], eps)


_COMMON = {
    "rho0": 0.1,
    "sigma0": 0.5,
    "steps": 6,
    "alpha": 9.0,
    "truncation": {"p_degree": 4, "fourier_order": 32, "lie_order": 12, "tail_tol": 1e-16},
}

PRESETS: dict[str, Preset] = {
    "pendulum": Preset(
        "pendulum",
        "H = omega p + p^2/2 + eps cos q",
        1,
        {**_COMMON, "omega": [1.0], "gamma": 0.5, "tau": 0.0, "epsilon": 1e-3},
    ),
    "two_dof_golden": Preset(
        "two_dof_golden",
        "H = omega.p + (p1^2 + p2^2)/2 + eps (cos q1 + cos(q1 - q2)), omega = (1, golden mean)",
        2,
        {**_COMMON, "omega": [1.0, GOLDEN], "gamma": 0.5, "tau": 1.0, "epsilon": 1e-3},
    ),
    "forced_pendulum": Preset(
        "forced_pendulum",
        "H = omega.p + p1^2/2 + eps cos(q1 - q2), q2 the forcing phase",
        2,
        {**_COMMON, "omega": [1.0, GOLDEN], "gamma": 0.5, "tau": 1.0, "epsilon": 1e-3},
    ),
}

_BUILDERS = {"pendulum": _pendulum, "two_dof_golden": _two_dof_golden, "forced_pendulum": _forced_pendulum}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def preset(name: str, eps: float | None = None) -> tuple[FourierTaylor, dict]:
    """Perturbation series and suggested defaults of a named preset."""
    if name not in PRESETS:
        raise UnknownPreset(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    p = PRESETS[name]
    eps = p.defaults["epsilon"] if eps is None else eps
    return p.series(eps), dict(p.defaults)
