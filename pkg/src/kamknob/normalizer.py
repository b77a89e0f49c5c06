"""Kolmogorov normalization with a frequency knob.

The Hamiltonian is kept in the form

    H = omega.p + dw.p + h_0 + h_1 + h_2 + ...

where ``h_l`` collects the terms of degree ``l`` in the actions and ``dw`` is
the detuning.  Each step removes ``h_0`` and the angle-dependent part of
``h_1`` to first order through two Lie transforms, ``chi0`` (angles only) and
``chi1`` (linear in the actions).  The angle average of ``h_1`` is not removed
by a coordinate change.  It is absorbed into the detuning instead, so the
linear frequency of the transformed system moves by an increment ``c`` while
the target ``omega`` stays fixed.  The detuning of the original system is then
fixed a posteriori so that the last step lands on ``omega`` exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .homological import DiophantineFrequency, check_diophantine, smallest_divisor, solve_homological
from .series import (
    DomainParams,
    Evaluator,
    FourierTaylor,
    SeriesError,
    TruncationPolicy,
    angle_average,
    derivative_p,
    derivative_q,
    grade_project,
    lie_derivative,
    lie_series_terms,
    linear_form,
    weighted_norm,
)

__all__ = [
    "HamiltonianState",
    "GeneratorPair",
    "StepDiagnostics",
    "RunParams",
    "NormalFormResult",
    "TruncationOverflow",
    "OuterDiverged",
    "OutOfDomain",
    "state_from_series",
    "normalization_step",
    "run_normalization",
    "CoordinateMap",
    "transform_point",
]

log = logging.getLogger(__name__)

EPS_MACH = float(np.finfo(float).eps)


class TruncationOverflow(SeriesError):
    """Truncation dropped more than the step was meant to remove."""


class OuterDiverged(SeriesError):
    """The detuning fixed-point iteration moved further apart twice in a row."""


class OutOfDomain(SeriesError):
    """A point left the domain on which the transformation is defined."""


@dataclass(frozen=True)
class HamiltonianState:
    """``omega.p + detuning_tail.p + sum_l parts[l]`` on the domain ``dom``."""

    freq: DiophantineFrequency
    detuning_tail: np.ndarray
    parts: tuple[FourierTaylor, ...]
    dom: DomainParams
    energy_shift: float = 0.0

    def __post_init__(self) -> None:
        tail = np.asarray(self.detuning_tail, dtype=float).reshape(-1)
        if tail.size != self.freq.n:
            raise ValueError(f"detuning has length {tail.size}, expected {self.freq.n}")
        object.__setattr__(self, "detuning_tail", tail)
        object.__setattr__(self, "parts", tuple(self.parts))
        for l, h in enumerate(self.parts):
            if h.n != self.freq.n:
                raise ValueError(f"part {l} has dimension {h.n}, expected {self.freq.n}")
            if h and not np.all(h.m.sum(axis=1) == l):
                raise ValueError(f"part {l} contains terms of another degree")

    @property
    def n(self) -> int:
        return self.freq.n

    def part(self, l: int) -> FourierTaylor:
        return self.parts[l] if 0 <= l < len(self.parts) else FourierTaylor(self.n)

    @property
    def eps_norm(self) -> float:
        """``max(||h_0||, 2 ||h_1||)`` on the state's domain."""
        return max(weighted_norm(self.part(0), self.dom), 2 * weighted_norm(self.part(1), self.dom))

    def residuals(self) -> tuple[float, float]:
        """Norms of ``h_0`` and of the angle-dependent part of ``h_1``."""
        h1 = self.part(1)
        return weighted_norm(self.part(0), self.dom), weighted_norm(h1 - angle_average(h1), self.dom)

    def perturbation(self) -> FourierTaylor:
        total = FourierTaylor(self.n)
        for h in self.parts:
            total = total + h
        return total

    def hamiltonian(self, linear: Sequence[float] | None = None) -> FourierTaylor:
        """Full Hamiltonian as one series; ``linear`` overrides ``omega + detuning_tail``."""
        lin = self.freq.vector + self.detuning_tail if linear is None else np.asarray(linear, dtype=float)
        return linear_form(self.n, lin) + self.perturbation()

    def with_tail(self, tail) -> "HamiltonianState":
        return replace(self, detuning_tail=np.asarray(tail, dtype=float))


def state_from_series(
    h: FourierTaylor, freq: DiophantineFrequency, dom: DomainParams, detuning=None
) -> HamiltonianState:
    """Split a perturbation ``h`` (everything except ``omega.p``) into degree parts."""
    if h.n != freq.n:
        raise ValueError(f"series dimension {h.n} does not match frequency dimension {freq.n}")
    deg = max(h.degree, 1)
    parts = [grade_project(h, l).without_loss() for l in range(deg + 1)]
    tail = np.zeros(freq.n) if detuning is None else detuning
    return HamiltonianState(freq, tail, parts, dom)


@dataclass(frozen=True)
class GeneratorPair:
    """The two generators of one step and the detuning increment ``c`` it produced."""

    chi0: FourierTaylor
    chi1: FourierTaylor
    detuning_increment: np.ndarray

    def to_json(self) -> dict:
        return {
            "chi0": self.chi0.to_json(),
            "chi1": self.chi1.to_json(),
            "detuning_increment": [float(x) for x in self.detuning_increment],
        }

    @classmethod
    def from_json(cls, data) -> "GeneratorPair":
        return cls(
            FourierTaylor.from_json(data["chi0"]),
            FourierTaylor.from_json(data["chi1"]),
            np.asarray(data["detuning_increment"], dtype=float),
        )


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step record.  Norms are measured on the domain reached after the step."""

    step: int
    residual_h0: float
    residual_h1: float
    h1_average: float
    detuning_increment: tuple[float, ...]
    detuning_increment_norm: float
    rho: float
    sigma: float
    trunc_loss: float
    chi0_norm: float
    chi1_norm: float
    min_divisor: float
    lie_orders: int
    lie_converged: bool
    energy_shift: float

    @property
    def residual(self) -> float:
        return max(self.residual_h0, self.residual_h1)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["detuning_increment"] = list(self.detuning_increment)
        d["residual"] = self.residual
        return d


@dataclass(frozen=True)
class RunParams:
    """Controls for :func:`run_normalization`.

    ``tol_outer`` defaults to ``1e-14 |omega|``.  The inner loop stops early
    once the residual falls below ``floor_factor`` times the accumulated
    truncation loss plus the double-precision floor ``eps |H|``.
    """

    steps: int = 6
    alpha: float = 9.0
    policy: TruncationPolicy = field(default_factory=TruncationPolicy)
    max_outer: int = 8
    tol_outer: float | None = None
    floor_factor: float = 10.0
    early_stop: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha <= 4:
            raise ValueError("alpha must exceed 4 so that the domain stays non-empty")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")

    def delta(self, k: int) -> float:
        return self.alpha ** (-k)

    def to_json(self) -> dict:
        pol = self.policy
        return {
            "steps": self.steps,
            "alpha": self.alpha,
            "truncation": {
                "p_degree": pol.p_degree,
                "fourier_order": pol.fourier_order,
                "lie_order": pol.lie_order,
                "tail_tol": pol.tail_tol,
                "coeff_floor": pol.coeff_floor,
            },
            "max_outer": self.max_outer,
            "tol_outer": self.tol_outer,
            "floor_factor": self.floor_factor,
        }


@dataclass
class NormalFormResult:
    """Output of :func:`run_normalization`."""

    omega0: np.ndarray
    detuning0: np.ndarray
    generators: list[GeneratorPair]
    steps: list[StepDiagnostics]
    final_state: HamiltonianState
    outer_iterations: int
    outer_history: list[np.ndarray]
    tails: list[np.ndarray]
    initial_state: HamiltonianState
    params: RunParams
    numerical_floor: float
    converged: bool

    @property
    def residual(self) -> float:
        return self.steps[-1].residual if self.steps else max(self.initial_state.residuals())

    @property
    def total_loss(self) -> float:
        return float(sum(s.trunc_loss for s in self.steps))

    @property
    def outer_updates(self) -> list[float]:
        hist = [np.zeros_like(self.detuning0)] + list(self.outer_history)
        return [float(np.max(np.abs(b - a))) for a, b in zip(hist, hist[1:])]

    def coordinate_map(self) -> "CoordinateMap":
        return CoordinateMap(self.generators, self.params.policy, self.initial_state.dom)


# -- the step -------------------------------------------------------------------

def _lie_sum(chi, f, pol, dom, start=0, weight: Callable[[int], float] | None = None):
    """``sum_{s>=start} w(s) L_chi^s f / s!`` with bookkeeping ``(series, orders, converged)``."""
    total = FourierTaylor(f.n)
    orders, norms = 0, []
    for s, term, norm in lie_series_terms(chi, f, pol, dom, start=start):
        orders = s
        norms.append(norm)
        if s >= start and term:
            total = total + (term * weight(s) if weight else term)
    converged = len(norms) < 2 or norms[-1] <= norms[-2] or norms[-1] == 0.0
    return total, orders, converged


def _split_constant(f: FourierTaylor) -> tuple[FourierTaylor, float]:
    const = ~(f.m.any(axis=1) | f.k.any(axis=1))
    if not const.any():
        return f, 0.0
    return f.select(~const), float(f.c[const].real.sum())


def normalization_step(
    state: HamiltonianState, policy: TruncationPolicy, delta: float = 0.0, step: int = 0
) -> tuple[HamiltonianState, GeneratorPair, StepDiagnostics]:
    """One normalization step.

    Parameters
    ----------
    state : HamiltonianState
        Current Hamiltonian.  Its ``detuning_tail`` is the linear frequency
        correction the step starts from.
    policy : TruncationPolicy
    delta : float
        Domain loss parameter; the returned state lives on ``(1 - 4 delta) dom``.
    step : int
        Step index, recorded in the diagnostics.

    Returns
    -------
    state, generators, diagnostics
        The new state carries ``detuning_tail + c`` where ``c`` is the
        detuning increment of this step.
    """
    n, freq, dom = state.n, state.freq, state.dom
    pol = policy.at(dom)
    L = max(len(state.parts) - 1, 1)
    h = [state.part(l) for l in range(L + 1)]
    tail = state.detuning_tail

    # first transform: chi0 kills the angle dependence of h0
    avg0 = angle_average(h[0])
    chi0 = solve_homological(h[0] - avg0, freq)
    _, shift = _split_constant(avg0)
    shift += state.energy_shift

    # T[l][s] = L_chi0^s h_l / s!, of degree l - s; the recursion ends at s = l
    T: list[list[FourierTaylor]] = []
    for l in range(L + 1):
        row = [h[l]]
        for s in range(1, l + 1):
            row.append(lie_derivative(chi0, row[-1], pol) / s if chi0 and row[-1] else FourierTaylor(n))
        T.append(row)
    G1 = FourierTaylor(n)
    for l in range(1, L + 1):
        G1 = G1 + T[l][l - 1]
    avgG1 = angle_average(G1)
    c = np.zeros(n)
    for mi, ki, ci in avgG1:
        c[int(np.argmax(mi))] += ci.real
    dw_new = tail + c

    # hat h_0 = L_chi0(dw.p) + sum_{s>=1} T[s][s]; <h0> is a dropped constant
    hat0 = FourierTaylor(n)
    if chi0 and np.any(tail):
        hat0 = hat0 + sum((derivative_q(chi0, j) * (-tail[j]) for j in range(n) if tail[j]), FourierTaylor(n))
    for s in range(1, L + 1):
        hat0 = hat0 + T[s][s]
    hat0, const = _split_constant(hat0)
    shift += const
    # the average's error is already part of G1's loss
    hat1 = G1 - avgG1.without_loss()
    hats = [hat0, hat1] + [sum((T[s + l][s] for s in range(L + 1 - l)), FourierTaylor(n)) for l in range(2, L + 1)]

    # second transform: chi1 kills the angle dependence of hat h_1
    chi1 = solve_homological(hat1, freq)
    orders, converged = 0, True
    new_parts = []
    for l, g in enumerate(hats):
        if l == 1:
            a, o1, c1 = _lie_sum(chi1, hat1, pol, dom, start=1, weight=lambda s: s / (s + 1))
            lin = linear_form(n, dw_new)
            b, o2, c2 = _lie_sum(chi1, lin, pol, dom, start=1) if chi1 and lin else (FourierTaylor(n), 0, True)
            # the sum starts at s = 1, so the error of hat h_1 itself is charged here
            out = a + b
            out = FourierTaylor(n, out.m, out.k, out.c, out.loss + hat1.loss, _trusted=True)
            orders, converged = max(orders, o1, o2), converged and c1 and c2
        elif chi1 and g:
            out, o, cv = _lie_sum(chi1, g, pol, dom)
            orders, converged = max(orders, o), converged and cv
        else:
            out = g
        new_parts.append(out)
    new_parts[0], const = _split_constant(new_parts[0])
    shift += const
    loss = float(sum(p.loss for p in new_parts))
    new_parts = [p.without_loss() for p in new_parts]
    while len(new_parts) > 2 and not new_parts[-1]:
        new_parts.pop()

    new_dom = dom.scaled(1 - 4 * delta) if delta else dom
    new_state = HamiltonianState(freq, dw_new, new_parts, new_dom, shift)
    r0, r1 = new_state.residuals()
    in_res = max(state.residuals())
    if in_res > 0 and loss > in_res:
        raise TruncationOverflow(
            f"step {step}: truncation loss {loss:.3e} exceeds the input residual {in_res:.3e}; "
            "raise fourier_order or p_degree"
        )
    gen = GeneratorPair(chi0, chi1, c)
    diag = StepDiagnostics(
        step=step,
        residual_h0=r0,
        residual_h1=r1,
        h1_average=weighted_norm(angle_average(new_parts[1]), new_dom),
        detuning_increment=tuple(float(x) for x in c),
        detuning_increment_norm=float(np.max(np.abs(c))) if c.size else 0.0,
        rho=new_dom.rho,
        sigma=new_dom.sigma,
        trunc_loss=loss,
        chi0_norm=weighted_norm(chi0, dom),
        chi1_norm=weighted_norm(chi1, dom),
        min_divisor=min(smallest_divisor(h[0], freq), smallest_divisor(hat1, freq)),
        lie_orders=orders,
        lie_converged=converged,
        energy_shift=shift,
    )
    return new_state, gen, diag


# -- the driver -------------------------------------------------------------------

def _pass(initial: HamiltonianState, params: RunParams, floor: float):
    state = initial
    gens, diags, tails = [], [], [initial.detuning_tail.copy()]
    cum = 0.0
    for k in range(1, params.steps + 1):
        state, gen, diag = normalization_step(state, params.policy, params.delta(k), k)
        gens.append(gen)
        diags.append(diag)
        tails.append(state.detuning_tail.copy())
        cum += diag.trunc_loss
        log.debug("step %d residual %.3e loss %.3e", k, diag.residual, diag.trunc_loss)
        if params.early_stop and diag.residual <= params.floor_factor * (cum + floor):
            break
    return state, gens, diags, tails


def run_normalization(initial: HamiltonianState, params: RunParams | None = None) -> NormalFormResult:
    """Normalize ``initial`` and determine the detuning of the original system.

    The initial detuning ``dw0`` is unknown.  A pass runs the steps from a
    guess of ``dw0``; each step adds its increment ``c_k`` so the detunings
    satisfy ``dw_k = dw_{k-1} + c_k``.  The normal form needs ``dw_N = 0``, so
    the next guess is ``dw0 = -sum_k c_k``.  Passes repeat until the guess
    moves by at most ``tol_outer``.

    Raises
    ------
    OuterDiverged
        If the update grows on two consecutive passes.
    """
    params = params or RunParams()
    freq = initial.freq
    tol = params.tol_outer if params.tol_outer is not None else 1e-14 * float(np.linalg.norm(freq.vector))
    K = params.policy.fourier_order
    rep = check_diophantine(freq, max(1, K))
    if not rep.passed:
        k, v = rep.violations[0]
        if v < 1e-13 * sum(abs(x) for x in k):
            from .homological import ResonanceError

            raise ResonanceError(k, v)
        log.warning("Diophantine bound fails at k=%s (|k.omega|=%.3e)", k, v)

    floor = EPS_MACH * weighted_norm(initial.hamiltonian(freq.vector), initial.dom)
    guess = np.asarray(initial.detuning_tail, dtype=float).copy()
    history: list[np.ndarray] = []
    updates: list[float] = []
    converged = False
    growth = 0
    for it in range(1, params.max_outer + 1):
        state, gens, diags, tails = _pass(initial.with_tail(guess), params, floor)
        total = np.sum([g.detuning_increment for g in gens], axis=0)
        new_guess = guess - (guess + total)  # = -sum c_k
        upd = float(np.max(np.abs(new_guess - guess)))
        history.append(new_guess.copy())
        log.info("outer pass %d: dw0=%s update %.3e", it, new_guess, upd)
        if updates and upd > updates[-1] and upd > tol:
            growth += 1
            if growth >= 2:
                raise OuterDiverged(f"detuning updates grew twice in a row: {updates[-1]:.3e} -> {upd:.3e}")
        else:
            growth = 0
        updates.append(upd)
        if upd <= tol:
            converged = True
            if np.array_equal(new_guess, guess):
                break
            guess = new_guess
            # final pass at the converged detuning so that the stored run is consistent
            state, gens, diags, tails = _pass(initial.with_tail(guess), params, floor)
            break
        guess = new_guess
    else:
        state, gens, diags, tails = _pass(initial.with_tail(guess), params, floor)
    return NormalFormResult(
        omega0=freq.vector + guess,
        detuning0=guess.copy(),
        generators=gens,
        steps=diags,
        final_state=state,
        outer_iterations=len(history),
        outer_history=history,
        tails=tails,
        initial_state=initial.with_tail(guess),
        params=params,
        numerical_floor=floor,
        converged=converged,
    )


# -- coordinate maps ------------------------------------------------------------------

class _Flow:
    """Time-one map of one generator as compiled coordinate series."""

    def __init__(self, chi: FourierTaylor, policy: TruncationPolicy, dom: DomainParams):
        n = chi.n
        self.n = n
        self.dp: list[FourierTaylor] = []
        self.dq: list[FourierTaylor] = []
        for j in range(n):
            # exp(L_chi) x - x = sum_r L^r(L_chi x)/(r+1)!, with L_chi p_j = -dchi/dq_j
            # and L_chi q_j = dchi/dp_j
            self.dp.append(self._sum(chi, -derivative_q(chi, j), policy, dom))
            self.dq.append(self._sum(chi, derivative_p(chi, j), policy, dom))
        self._cache: dict = {}

    @staticmethod
    def _sum(chi, first, policy, dom):
        total = FourierTaylor(chi.n)
        if not first:
            return total
        for s, term, _ in lie_series_terms(chi, first, policy, dom):
            total = total + term / (s + 1)
        return total

    def compiled(self, dtype):
        key = np.dtype(dtype).str
        if key not in self._cache:
            self._cache[key] = ([Evaluator(f, dtype) for f in self.dp], [Evaluator(f, dtype) for f in self.dq])
        return self._cache[key]

    def __call__(self, P, Q):
        evp, evq = self.compiled(P.dtype)
        Pn = P.copy()
        Qn = Q.copy()
        for j in range(self.n):
            if evp[j].m.shape[0]:
                Pn[:, j] += evp[j].value(P, Q)
            if evq[j].m.shape[0]:
                Qn[:, j] += evq[j].value(P, Q)
        return Pn, Qn


class CoordinateMap:
    """Composition of all step transformations.

    ``forward`` sends normalized coordinates to original ones; ``inverse``
    applies the negated generators in reverse order.
    """

    def __init__(self, generators: Sequence[GeneratorPair], policy: TruncationPolicy, dom: DomainParams, bound: float | None = None):
        self.generators = list(generators)
        self.policy = policy
        self.dom = dom
        self.bound = dom.rho if bound is None else bound
        self._fwd: list[tuple[_Flow, _Flow]] | None = None
        self._inv: list[tuple[_Flow, _Flow]] | None = None

    def _flows(self, sign: float):
        pol = self.policy.at(self.dom)
        return [(_Flow(g.chi0 * sign, pol, self.dom), _Flow(g.chi1 * sign, pol, self.dom)) for g in self.generators]

    def _check(self, P):
        if self.bound is not None and np.any(np.abs(P) > self.bound):
            raise OutOfDomain(f"action {float(np.max(np.abs(P))):.3e} exceeds the domain radius {self.bound:.3e}")

    def _prep(self, p, q, dtype):
        P = np.array(p, dtype=dtype)
        Q = np.array(q, dtype=dtype)
        single = P.ndim == 1
        n = self.generators[0].chi0.n if self.generators else P.shape[-1]
        return P.reshape(-1, n), Q.reshape(-1, n), single

    def forward(self, p, q, dtype=np.float64):
        """Normalized ``(p, q)`` to original coordinates."""
        P, Q, single = self._prep(p, q, dtype)
        if self._fwd is None:
            self._fwd = self._flows(1.0)
        for f0, f1 in reversed(self._fwd):
            self._check(P)
            P, Q = f1(P, Q)
            P, Q = f0(P, Q)
        self._check(P)
        return (P[0], Q[0]) if single else (P, Q)

    def inverse(self, p, q, dtype=np.float64):
        """Original ``(p, q)`` to normalized coordinates."""
        P, Q, single = self._prep(p, q, dtype)
        if self._inv is None:
            self._inv = self._flows(-1.0)
        for f0, f1 in self._inv:
            self._check(P)
            P, Q = f0(P, Q)
            P, Q = f1(P, Q)
        self._check(P)
        return (P[0], Q[0]) if single else (P, Q)


def transform_point(
    generators: Sequence[GeneratorPair],
    point,
    direction: str = "forward",
    policy: TruncationPolicy | None = None,
    dom: DomainParams | None = None,
):
    """Apply the composed transformation to one point ``(p, q)``.

    Builds a :class:`CoordinateMap` on the fly; reuse one for many points.
    """
    p, q = point
    p = np.asarray(p, dtype=float)
    if not generators:
        return np.array(p, dtype=float), np.array(q, dtype=float)
    dom = dom or DomainParams(max(1.0, float(np.max(np.abs(p))) * 2), 1.0)
    cmap = CoordinateMap(generators, policy or TruncationPolicy(), dom, bound=None)
    if direction == "forward":
        return cmap.forward(p, q)
    if direction == "inverse":
        return cmap.inverse(p, q)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
