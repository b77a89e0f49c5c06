"""Quantitative ledger of the convergence proof.

Evaluates the constants ``E``, ``K_1 ... K_11`` and ``Lambda`` for a given
configuration, the resulting smallness threshold ``eps*``, the a priori
schedule ``delta_k = alpha^-k``, ``eps_k = eps0^(k+1)`` and compares all of
it with what a run actually produced.

The constants are intentionally crude.  At desk-scale perturbations the
threshold is usually many orders of magnitude below ``eps``; the comparison
then reports an empirical rather than a certified regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .homological import DiophantineFrequency
from .series import DomainParams, FourierTaylor, weighted_norm

__all__ = [
    "ConstantsLedger",
    "ScheduleParams",
    "ScheduleInvalid",
    "compute_constants",
    "epsilon_threshold",
    "predicted_schedule",
    "detuning_condition",
    "detuning_partial_sum",
    "shrink_product",
    "size_constant",
    "compare_predicted_observed",
    "contraction_slope",
]


class ScheduleInvalid(ValueError):
    """``alpha^(tau+2) eps0 >= 1``: the detuning series diverges."""


def _diophantine_factor(tau: float, sigma: float) -> float:
    # (tau/(e sigma))^tau, read as 1 at tau = 0
    return 1.0 if tau == 0 else (tau / (math.e * sigma)) ** tau


@dataclass
class ConstantsLedger:
    """Constants of the iterative estimate.

    ``K[j-1]`` holds ``K_j``.  ``conditions`` maps each smallness condition
    to ``(lhs, rhs, holds)`` when ``eps`` and ``delta`` were supplied.
    """

    E0: float
    E: float
    K: list[float]
    Lambda: float
    n: int
    gamma: float
    tau: float
    rho: float
    sigma: float
    conditions: dict[str, tuple[float, float, bool]] = field(default_factory=dict)

    def evaluate_conditions(self, eps: float, delta: float) -> dict[str, tuple[float, float, bool]]:
        """Smallness conditions of one step at perturbation size ``eps`` and loss ``delta``."""
        e, t, rs = math.e, self.tau, self.rho * self.sigma
        K1, K8 = self.K[0], self.K[7]
        rows = {
            "chi0_small": (2 * e * K1 * eps / (delta ** (t + 2) * rs), 0.5),
            "chi1_small": (2 * e * K8 * eps / (delta ** (2 * t + 4) * rs), 1.0),
            "step_small": (self.Lambda * eps / delta ** (3 * t + 6), 1.0),
        }
        return {k: (lhs, rhs, bool(lhs <= rhs)) for k, (lhs, rhs) in rows.items()}

    def to_json(self) -> dict:
        return {
            "E0": self.E0,
            "E": self.E,
            "K": {f"K{j + 1}": v for j, v in enumerate(self.K)},
            "Lambda": self.Lambda,
            "evaluated_at": {"rho": self.rho, "sigma": self.sigma, "gamma": self.gamma, "tau": self.tau, "n": self.n},
            "conditions": {k: {"lhs": a, "rhs": b, "holds": c} for k, (a, b, c) in self.conditions.items()},
        }


def compute_constants(
    E0: float,
    n: int,
    freq: DiophantineFrequency,
    dom: DomainParams,
    eps: float | None = None,
    delta: float | None = None,
) -> ConstantsLedger:
    """Evaluate ``E = 2^(n-1) E0``, ``K_1 ... K_11`` and ``Lambda``.

    Parameters
    ----------
    E0 : float
        Size constant of the unperturbed and perturbing parts, positive.
    n : int
        Number of degrees of freedom.
    freq : DiophantineFrequency
        Supplies ``gamma`` and ``tau``.
    dom : DomainParams
        ``(rho, sigma)`` at which the constants are evaluated.
    eps, delta : float, optional
        When both are given the three smallness conditions are evaluated.
    """
    if not E0 > 0:
        raise ValueError(f"E0 must be positive, got {E0}")
    g, t = freq.gamma, freq.tau
    rho, sigma = dom.rho, dom.sigma
    e = math.e
    rs = rho * sigma
    E = 2 ** (n - 1) * E0
    K1 = _diophantine_factor(t, sigma) * E / g
    K2 = 2 * K1 * E / (e * rs)
    K3 = 8 * K1**2 * E / rs**2
    K4 = 24 * K1**2 * E / rs**2
    K5 = E + K2
    K6 = K2 / (2 * E) + K4 / 4 + K2 / 2 + K3 / 4
    K7 = E + E / e**2
    K8 = _diophantine_factor(t, sigma) * K5 / g
    K9 = 2 * K6 / e**2
    K10 = 2 * (K5 + 1) * K8 / (e * rs)
    K11 = 2 * K7 / e**2
    K = [K1, K2, K3, K4, K5, K6, K7, K8, K9, K10, K11]
    Lam = max([1.0] + K + [2 * e * K1 / rs, 2 * e * K8 / rs])
    led = ConstantsLedger(E0, E, K, Lam, n, g, t, rho, sigma)
    if eps is not None and delta is not None:
        led.conditions = led.evaluate_conditions(eps, delta)
    return led


def epsilon_threshold(ledger: ConstantsLedger, alpha: float, tau: float) -> float:
    """``eps* = min(1/(Lambda alpha^(3tau+6)), 1/(alpha^(tau+2)(K_5+1)))``."""
    if alpha < 9:
        raise ValueError(f"alpha must be >= 9, got {alpha}")
    first = 1.0 / (ledger.Lambda * alpha ** (3 * tau + 6))
    second = 1.0 / (alpha ** (tau + 2) * (ledger.K[4] + 1))
    return min(first, second)


def shrink_product(alpha: float, terms: int | None = None) -> float:
    """``prod_k (1 - 4 alpha^-k)``, to machine convergence when ``terms`` is None."""
    prod, k = 1.0, 1
    while True:
        d = alpha ** (-k)
        if terms is None and 4 * d < 1e-18:
            return prod
        if terms is not None and k > terms:
            return prod
        prod *= 1 - 4 * d
        k += 1


def detuning_condition(K5: float, x: float, k: int) -> tuple[float, float, bool]:
    """Closed form of ``sum_{j>k} K5 x^j <= x^k``: ``(lhs, rhs, holds)``."""
    if x >= 1:
        raise ScheduleInvalid(f"alpha^(tau+2) eps0 = {x:.6g} >= 1; the detuning series diverges")
    lhs = K5 * x ** (k + 1) / (1 - x)
    rhs = x**k
    return lhs, rhs, bool(lhs <= rhs)


def detuning_partial_sum(K5: float, x: float, k: int, terms: int = 30) -> float:
    """``sum_{j=k+1}^{k+terms} K5 x^j`` evaluated term by term."""
    return float(math.fsum(K5 * x**j for j in range(k + 1, k + terms + 1)))


@dataclass
class ScheduleParams:
    """A priori schedule of the iteration."""

    alpha: float
    eps0: float
    tau: float
    delta_k: list[float]
    eps_k: list[float]
    rho_k: list[float]
    sigma_k: list[float]
    rho_star: float
    sigma_star: float
    sum_delta: float
    shrink_product: float
    detuning_checks: list[tuple[float, float, bool]]

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "eps0": self.eps0,
            "tau": self.tau,
            "delta_k": self.delta_k,
            "eps_k": self.eps_k,
            "rho_k": self.rho_k,
            "sigma_k": self.sigma_k,
            "rho_star": self.rho_star,
            "sigma_star": self.sigma_star,
            "sum_delta": self.sum_delta,
            "shrink_product": self.shrink_product,
            "detuning_checks": [{"lhs": a, "rhs": b, "holds": c} for a, b, c in self.detuning_checks],
        }


def predicted_schedule(
    eps0: float,
    alpha: float,
    dom: DomainParams,
    steps: int,
    *,
    tau: float = 0.0,
    K5: float | None = None,
) -> ScheduleParams:
    """Schedule ``delta_k = alpha^-k``, ``eps_k = eps0^(k+1)`` and shrinking domains.

    With ``K5`` given, the a priori detuning condition is checked for every
    ``k = 1..steps`` through its geometric closed form.

    Raises
    ------
    ScheduleInvalid
        If ``K5`` is given and ``alpha^(tau+2) eps0 >= 1``.
    """
    if alpha < 9:
        raise ValueError(f"alpha must be >= 9, got {alpha}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    deltas = [alpha ** (-k) for k in range(1, steps + 1)]
    eps_k = [eps0 ** (k + 1) for k in range(1, steps + 1)]
    rho_k, sigma_k = [], []
    r, s = dom.rho, dom.sigma
    for d in deltas:
        r *= 1 - 4 * d
        s *= 1 - 4 * d
        rho_k.append(r)
        sigma_k.append(s)
    checks = []
    if K5 is not None:
        x = alpha ** (tau + 2) * eps0
        checks = [detuning_condition(K5, x, k) for k in range(1, steps + 1)]
    return ScheduleParams(
        alpha=alpha,
        eps0=eps0,
        tau=tau,
        delta_k=deltas,
        eps_k=eps_k,
        rho_k=rho_k,
        sigma_k=sigma_k,
        rho_star=dom.rho / 2,
        sigma_star=dom.sigma / 2,
        sum_delta=math.fsum(alpha ** (-k) for k in range(1, 400)),
        shrink_product=shrink_product(alpha),
        detuning_checks=checks,
    )


def size_constant(h: FourierTaylor, omega: Sequence[float], eps: float, dom: DomainParams) -> float:
    """``E0 = max(|H0|, |H1|)`` by the coefficient-sum bound.

    ``H0`` is ``omega.p`` plus the angle-independent part of ``h``; ``H1`` is
    the angle-dependent part divided by ``eps`` (zero when ``eps = 0``).
    """
    from .series import linear_form

    avg = h.select(~h.k.any(axis=1))
    osc = h.select(h.k.any(axis=1))
    H0 = weighted_norm(linear_form(h.n, omega) + avg, dom)
    H1 = weighted_norm(osc, dom) / abs(eps) if eps else 0.0
    return max(H0, H1)


def contraction_slope(residuals: Sequence[float], floor: float = 0.0) -> float | None:
    """Least-squares slope of ``log r_{k+1}`` against ``log r_k`` over residuals above ``floor``."""
    r = [x for x in residuals if x > floor and x > 0]
    if len(r) < 3:
        if len(r) == 2:
            return math.log(r[1]) / math.log(r[0]) if r[0] != 1 else None
        return None
    x = np.log(np.array(r[:-1]))
    y = np.log(np.array(r[1:]))
    A = np.vstack([x, np.ones_like(x)]).T
    slope, _ = np.linalg.lstsq(A, y, rcond=None)[0]
    return float(slope)


def compare_predicted_observed(schedule: ScheduleParams, result, ledger: ConstantsLedger | None = None) -> dict:
    """Put the observed run next to the a priori schedule and bounds.

    ``result`` is a :class:`~kamknob.normalizer.NormalFormResult`.  The
    detuning bound is reported with and without the factor ``E`` because the
    two normalizations of the perturbation size cannot be told apart from the
    statement alone.
    """
    init = result.initial_state
    r0 = max(init.residuals())
    observed = [r0] + [s.residual for s in result.steps]
    rows = []
    for i, s in enumerate(result.steps):
        k = s.step
        pred = schedule.eps_k[k - 1] if k - 1 < len(schedule.eps_k) else None
        row = {
            "step": k,
            "observed_residual": s.residual,
            "predicted_eps_k": pred,
            "detuning_increment_norm": s.detuning_increment_norm,
            "trunc_loss": s.trunc_loss,
        }
        if ledger is not None:
            eps_prev = schedule.eps0 ** k
            delta = schedule.delta_k[k - 1] if k - 1 < len(schedule.delta_k) else schedule.alpha ** (-k)
            conds = ledger.evaluate_conditions(eps_prev, delta)
            row["conditions"] = {name: c[2] for name, c in conds.items()}
            row["violated"] = sorted(name for name, c in conds.items() if not c[2])
            tail = np.asarray(result.tails[k - 1]) if k - 1 < len(result.tails) else np.zeros(init.n)
            det = float(np.sum(np.abs(tail))) * init.dom.rho * (1 - delta)
            hyp = eps_prev / (2 * delta ** (schedule.tau + 2))
            row["detuning_hypothesis"] = {
                "observed": det,
                "bound_eps": hyp,
                "bound_eps_E": hyp * ledger.E,
                "holds_eps": det <= hyp,
                "holds_eps_E": det <= hyp * ledger.E,
            }
        rows.append(row)
    floor = 10 * (result.total_loss + result.numerical_floor)
    slope = contraction_slope(observed, floor)
    d0 = float(np.sum(np.abs(result.detuning0))) * init.dom.rho / 2
    report = {
        "rows": rows,
        "observed_residuals": observed,
        "observed_slope": slope,
        "theoretical_slope": 2.0,
        "detuning0_norm_half_domain": d0,
    }
    if ledger is not None:
        b = 8.0 ** (-(2 * schedule.tau + 4)) / 2
        report["detuning0_bound"] = {
            "bound_E": ledger.E * b,
            "bound_unit": b,
            "holds_E": d0 <= ledger.E * b,
            "holds_unit": d0 <= b,
        }
        violated = sorted({v for row in rows for v in row.get("violated", [])})
        report["violated_conditions"] = violated
        report["hypotheses_verified"] = not violated
    return report
