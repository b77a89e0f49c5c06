"""Diophantine frequencies and the homological equation.

The homological equation ``L_chi(omega.p) + h = 0`` is diagonal in the Fourier
basis: each coefficient of ``h`` is divided by the small divisor ``i k.omega``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .series import FourierTaylor, SeriesError

__all__ = [
    "DiophantineFrequency",
    "DiophantineReport",
    "ResonanceError",
    "AverageNotRemovedError",
    "RESONANCE_GUARD",
    "check_diophantine",
    "solve_homological",
    "smallest_divisor",
    "chi_norm_factor",
]

RESONANCE_GUARD = 1e-13
AVERAGE_TOL = 1e-14


class ResonanceError(SeriesError, ZeroDivisionError):
    """A Fourier mode with ``k.omega = 0`` (to within the resonance guard)."""

    def __init__(self, k, value: float):
        self.k = tuple(int(x) for x in k)
        self.value = float(value)
        super().__init__(f"resonant mode k={self.k}: k.omega = {self.value:.3e}")


class AverageNotRemovedError(SeriesError, ValueError):
    """The right-hand side still carries a ``k = 0`` component."""


@dataclass(frozen=True)
class DiophantineFrequency:
    """Target frequency ``omega`` with Diophantine constants ``gamma`` and ``tau``."""

    omega: tuple[float, ...]
    gamma: float
    tau: float

    def __init__(self, omega, gamma: float, tau: float):
        om = tuple(float(x) for x in np.asarray(omega, dtype=float).reshape(-1))
        if not om:
            raise ValueError("omega must be non-empty")
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if tau < len(om) - 1:
            raise ValueError(f"tau must be >= n-1 = {len(om) - 1}, got {tau}")
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "gamma", float(gamma))
        object.__setattr__(self, "tau", float(tau))

    @property
    def n(self) -> int:
        return len(self.omega)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.omega)

    def bound(self, order) -> np.ndarray:
        """Diophantine lower bound ``gamma |k|^-tau``."""
        return self.gamma * np.asarray(order, dtype=float) ** (-self.tau)

    def to_json(self) -> dict:
        return {"omega": list(self.omega), "gamma": self.gamma, "tau": self.tau}


@dataclass
class DiophantineReport:
    """Outcome of :func:`check_diophantine`.

    ``min_divisor_per_order[j]`` is the smallest ``|k.omega|`` over ``|k| = j + 1``.
    ``violations`` lists every ``(k, |k.omega|)`` failing the bound.
    """

    K_check: int
    min_divisor_per_order: list[float]
    argmin_per_order: list[tuple[int, ...]]
    worst_k: tuple[int, ...]
    worst_ratio: float
    passed: bool
    violations: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "K_check": self.K_check,
            "pass": self.passed,
            "worst_k": list(self.worst_k),
            "worst_ratio": self.worst_ratio,
            "min_divisor_per_order": [
                {"order": j + 1, "min_divisor": v, "k": list(k)}
                for j, (v, k) in enumerate(zip(self.min_divisor_per_order, self.argmin_per_order))
            ],
            "violations": [{"k": list(k), "divisor": v} for k, v in self.violations],
        }


def _half_lattice(n: int, K: int) -> np.ndarray:
    """Integer vectors with ``0 < |k| <= K`` whose first nonzero entry is positive."""
    rng = range(-K, K + 1)
    pts = np.array(list(itertools.product(rng, repeat=n)), dtype=np.int64)
    pts = pts[np.abs(pts).sum(axis=1) <= K]
    nz = pts != 0
    has = nz.any(axis=1)
    first = np.argmax(nz, axis=1)
    lead = pts[np.arange(len(pts)), first]
    return pts[has & (lead > 0)]


def check_diophantine(freq: DiophantineFrequency, K_check: int) -> DiophantineReport:
    """Scan every ``0 < |k| <= K_check`` against ``|k.omega| > gamma |k|^-tau``.

    Only one of ``k`` and ``-k`` is visited since both give the same divisor.
    """
    if K_check < 1:
        raise ValueError("K_check must be >= 1")
    ks = _half_lattice(freq.n, K_check)
    div = np.abs(ks @ freq.vector)
    order = np.abs(ks).sum(axis=1)
    bound = freq.bound(order)
    mins, args = [], []
    for j in range(1, K_check + 1):
        sel = np.nonzero(order == j)[0]
        i = sel[np.argmin(div[sel])]
        mins.append(float(div[i]))
        args.append(tuple(int(x) for x in ks[i]))
    ratio = div / bound
    w = int(np.argmin(ratio))
    bad = np.nonzero(div <= bound)[0]
    bad = sorted(bad.tolist(), key=lambda i: (int(order[i]), tuple(ks[i].tolist())))
    return DiophantineReport(
        K_check=K_check,
        min_divisor_per_order=mins,
        argmin_per_order=args,
        worst_k=tuple(int(x) for x in ks[w]),
        worst_ratio=float(ratio[w]),
        passed=not bad,
        violations=[(tuple(int(x) for x in ks[i]), float(div[i])) for i in bad],
    )


def smallest_divisor(rhs: FourierTaylor, freq: DiophantineFrequency) -> float:
    """Smallest ``|k.omega|`` over the nonzero modes of ``rhs`` (inf if none)."""
    mask = rhs.k.any(axis=1)
    if not mask.any():
        return math.inf
    return float(np.abs(rhs.k[mask] @ freq.vector).min())


def solve_homological(rhs: FourierTaylor, freq: DiophantineFrequency) -> FourierTaylor:
    """Solve ``L_chi(omega.p) + rhs = 0`` for ``chi`` with zero angle average.

    Parameters
    ----------
    rhs : FourierTaylor
        Right-hand side with no ``k = 0`` part.  Averages below ``1e-14``
        relative to the largest coefficient are treated as rounding and ignored.
    freq : DiophantineFrequency

    Returns
    -------
    FourierTaylor
        ``chi`` with coefficients ``rhs_{m,k} / (i k.omega)``.

    Raises
    ------
    ResonanceError
        If some mode has ``|k.omega| < 1e-13 |k|``.
    AverageNotRemovedError
        If ``rhs`` has a significant ``k = 0`` component.
    """
    if rhs.n != freq.n:
        raise ValueError(f"series dimension {rhs.n} does not match frequency dimension {freq.n}")
    if not rhs:
        return FourierTaylor(rhs.n)
    mask = rhs.k.any(axis=1)
    if not mask.all():
        avg = float(np.abs(rhs.c[~mask]).max())
        if avg > AVERAGE_TOL * max(1.0, rhs.max_abs()):
            raise AverageNotRemovedError(f"right-hand side has a k=0 component of size {avg:.3e}")
    k = rhs.k[mask]
    kw = k @ freq.vector
    order = np.abs(k).sum(axis=1)
    bad = np.abs(kw) < RESONANCE_GUARD * order
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        kk = k[i] if k[i][np.nonzero(k[i])[0][0]] > 0 else -k[i]
        raise ResonanceError(kk, kw[i])
    c = rhs.c[mask] / (1j * kw)
    return FourierTaylor(rhs.n, rhs.m[mask], k, c, _trusted=True)


def chi_norm_factor(freq: DiophantineFrequency, delta: float, sigma: float) -> float:
    """``(1/gamma) (tau/(e delta sigma))^tau``, with the bracket read as 1 for ``tau = 0``."""
    if freq.tau == 0:
        return 1.0 / freq.gamma
    return (freq.tau / (math.e * delta * sigma)) ** freq.tau / freq.gamma
