"""Independent checks of a normalization run.

The central check integrates the original Hamiltonian, with linear frequency
``omega0 = omega + dw0``, from points on the constructed torus and compares
the orbits with the quasi-periodic motion ``q -> q + omega t`` carried through
the normalizing transformation.  Integration runs in extended precision
(``np.longdouble``) so that the integrator floor sits well below the
double-precision representation floor of the series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .normalizer import CoordinateMap, HamiltonianState, NormalFormResult
from .series import DomainParams, Evaluator, FourierTaylor, angle_average, linear_form, weighted_norm

__all__ = [
    "StepRejected",
    "Trajectory",
    "TorusReport",
    "DeformationReport",
    "normal_form_residual",
    "integrate_orbit",
    "torus_residual",
    "deformation_check",
    "symplecticity_defect",
    "round_trip_error",
    "sample_phases",
    "wrap_angle",
]

LD = np.longdouble
LD_PI = np.longdouble("3.14159265358979323846264338327950288")


class StepRejected(RuntimeError):
    """The integrator's local error estimate stayed above tolerance after subdivision."""


def normal_form_residual(state: HamiltonianState) -> dict[str, float]:
    """Weighted norms of ``h_0`` and of ``h_1 - <h_1>`` on the state's domain."""
    r0, r1 = state.residuals()
    return {"norm_h0": r0, "norm_h1_offavg": r1}


def wrap_angle(x):
    """Map angle differences into ``[-pi, pi)``."""
    x = np.asarray(x)
    pi = LD_PI if x.dtype == LD else np.pi
    return (x + pi) % (2 * pi) - pi


# -- vector fields ------------------------------------------------------------------

class _Field:
    """Hamiltonian vector field ``(-dH/dq, dH/dp)`` compiled for one dtype.

    With ``rotation`` set, the angles are taken relative to the frame turning
    at that frequency: the state holds ``theta = q - rotation t`` and the field
    needs the time.  Keeping ``theta`` bounded avoids the rounding that grows
    with the size of an unwrapped angle.
    """

    def __init__(self, H: FourierTaylor, dtype, linear=None, rotation=None):
        self.ev = Evaluator(H, dtype)
        self.dtype = np.dtype(dtype)
        self.linear = None if linear is None else np.asarray(linear, dtype=dtype)
        self.rotation = None if rotation is None else np.asarray(rotation, dtype=dtype)
        lin = self.linear if self.linear is not None else np.zeros(H.n, dtype=dtype)
        self.drift = lin if self.rotation is None else lin - self.rotation

    def __call__(self, P, Q, t=None):
        if self.rotation is not None:
            Q = Q + t * self.rotation
        gp, gq = self.ev.gradient(P, Q)
        return -gq, gp + self.drift

    def energy(self, P, Q):
        e = self.ev.value(P, Q)
        if self.linear is not None:
            e = e + P @ self.linear
        return e


def _as_field(H, dtype, rotation=None):
    if isinstance(H, HamiltonianState):
        return _Field(H.perturbation(), dtype, _exact_sum(H.freq.vector, H.detuning_tail, dtype), rotation)
    if isinstance(H, tuple) and len(H) == 2:
        series, linear = H
        return _Field(series, dtype, linear, rotation)
    return _Field(H, dtype, None, rotation)


def _exact_sum(a, b, dtype):
    return np.asarray(a, dtype=dtype) + np.asarray(b, dtype=dtype)


# -- Gragg-Bulirsch-Stoer ------------------------------------------------------------

def _gbs_tables(columns: int, dtype):
    seq = [2 * (j + 1) for j in range(columns)]
    # Neville factors 1 / ((n_j / n_{j-l})^2 - 1) as exact ratios of integers
    fac = {}
    for j in range(columns):
        for l in range(1, j + 1):
            a, b = seq[j], seq[j - l]
            fac[j, l] = dtype.type(b * b) / dtype.type(a * a - b * b)
    return seq, fac


def _midpoint(fld, P, Q, t, h, nsub):
    """Modified midpoint rule; returns the increments, not the end point."""
    dt = h / nsub
    fp, fq = fld(P, Q, t)
    zp0, zq0 = np.zeros_like(P), np.zeros_like(Q)
    zp1, zq1 = dt * fp, dt * fq
    for i in range(1, nsub):
        fp, fq = fld(P + zp1, Q + zq1, t + i * dt)
        zp0, zq0, zp1, zq1 = zp1, zq1, zp0 + 2 * dt * fp, zq0 + 2 * dt * fq
    fp, fq = fld(P + zp1, Q + zq1, t + h)
    return (zp1 + zp0 + dt * fp) / 2, (zq1 + zq0 + dt * fq) / 2


def _gbs_step(fld, P, Q, t, h, seq, fac):
    """Extrapolated increments ``(dP, dQ)`` of one macro step and the error estimate."""
    rows_p, rows_q = [], []
    err = 0.0
    for j, nsub in enumerate(seq):
        tp, tq = _midpoint(fld, P, Q, t, h, nsub)
        cur_p, cur_q = [tp], [tq]
        for l in range(1, j + 1):
            cur_p.append(cur_p[l - 1] + (cur_p[l - 1] - rows_p[l - 1]) * fac[j, l])
            cur_q.append(cur_q[l - 1] + (cur_q[l - 1] - rows_q[l - 1]) * fac[j, l])
        if j == len(seq) - 1 and j > 0:
            err = float(max(np.max(np.abs(cur_p[j] - cur_p[j - 1])), np.max(np.abs(cur_q[j] - cur_q[j - 1]))))
        rows_p, rows_q = cur_p, cur_q
    return rows_p[-1], rows_q[-1], err


class _Compensated:
    """State accumulated with Kahan summation of the step increments."""

    def __init__(self, x):
        self.x = x.copy()
        self.c = np.zeros_like(x)

    def add(self, dx):
        y = dx - self.c
        t = self.x + y
        self.c = (t - self.x) - y
        self.x = t


# -- symplectic composition ------------------------------------------------------------

def _triple_jump(order: int) -> list[float]:
    """Leapfrog sub-step weights of a symmetric composition method of even ``order``."""
    w = [1.0]
    for q in range(2, order, 2):
        x1 = 1.0 / (2.0 - 2.0 ** (1.0 / (q + 1)))
        x0 = 1.0 - 2.0 * x1
        w = [a * x for x in (x1, x0, x1) for a in w]
    return w


class _Separable:
    def __init__(self, H: FourierTaylor, dtype, linear=None):
        mixed = H.m.any(axis=1) & H.k.any(axis=1)
        if mixed.any():
            raise ValueError("symplectic integration needs a separable Hamiltonian T(p) + V(q)")
        self.T = Evaluator(H.select(~H.k.any(axis=1)), dtype)
        self.V = Evaluator(H.select(H.k.any(axis=1)), dtype)
        self.linear = None if linear is None else np.asarray(linear, dtype=dtype)

    def kick(self, P, Q, h):
        _, gq = self.V.gradient(P, Q)
        return P - h * gq

    def drift(self, P, Q, h):
        gp, _ = self.T.gradient(P, Q)
        if self.linear is not None:
            gp = gp + self.linear
        return Q + h * gp


# -- trajectories -------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Sampled orbit(s).  ``P`` and ``Q`` have shape ``(times, orbits, n)``."""

    t: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    energy: np.ndarray
    energy_drift: float
    max_error_estimate: float
    theta: np.ndarray | None = None

    def to_csv_rows(self, orbit: int = 0):
        for i, t in enumerate(self.t):
            yield [float(t)] + [float(x) for x in self.P[i, orbit]] + [float(x) for x in self.Q[i, orbit]]


def integrate_orbit(
    H,
    x0,
    T: float,
    dt: float,
    *,
    columns: int = 6,
    dtype=LD,
    symplectic: bool = False,
    symplectic_order: int = 8,
    err_tol: float | None = None,
    max_halvings: int = 4,
    energy_scale: float | None = None,
    rotation=None,
) -> Trajectory:
    """Integrate ``p' = -dH/dq``, ``q' = dH/dp`` with fixed macro steps.

    Parameters
    ----------
    H : FourierTaylor, HamiltonianState or (FourierTaylor, linear)
        Hamiltonian.  A state contributes its linear part ``(omega + tail).p``,
        summed in ``dtype``; a tuple adds ``linear.p`` to the series.
    x0 : (p, q)
        Initial point, or batches of shape ``(orbits, n)``.
    T, dt : float
        Horizon and macro step.  ``T / dt`` is rounded up to whole steps.
    columns : int
        Extrapolation columns of the Gragg-Bulirsch-Stoer step; the order is
        ``2 * columns``.
    symplectic : bool
        Use a composition of leapfrog steps instead (separable ``H`` only).
    err_tol : float, optional
        Local error tolerance.  A step whose estimate exceeds it is split in
        two, up to ``max_halvings`` times, before :class:`StepRejected`.
    energy_scale : float, optional
        Denominator floor of the relative energy drift.
    rotation : array_like, optional
        Integrate the angles relative to the frame turning at this frequency
        (extrapolated midpoint only).  ``Trajectory.theta`` then holds
        ``q - rotation t`` as integrated, free of the rounding of large angles.

    Returns
    -------
    Trajectory
        Samples at every macro step.
    """
    if not dt > 0 or not T >= 0:
        raise ValueError("need dt > 0 and T >= 0")
    dtype = np.dtype(dtype)
    p0, q0 = x0
    P = np.array(p0, dtype=dtype)
    Q = np.array(q0, dtype=dtype)
    single = P.ndim == 1
    n = P.shape[-1]
    P = P.reshape(-1, n)
    Q = Q.reshape(-1, n)
    nsteps = max(1, int(math.ceil(T / dt - 1e-12))) if T > 0 else 0
    h = dtype.type(T) / nsteps if nsteps else dtype.type(0)

    if symplectic and rotation is not None:
        raise ValueError("the rotating frame is only available for the extrapolated midpoint method")
    if symplectic:
        series, linear = _split_input(H)
        sep = _Separable(series, dtype, linear)
        fld = _Field(series, dtype, linear)
        weights = [dtype.type(w) for w in _triple_jump(symplectic_order)]
    else:
        fld = _as_field(H, dtype, rotation)
        seq, fac = _gbs_tables(columns, dtype)

    times = [dtype.type(0)]
    Ps, Qs = [P.copy()], [Q.copy()]
    max_err = 0.0
    accP, accQ = _Compensated(P), _Compensated(Q)
    for i in range(nsteps):
        if symplectic:
            for w in weights:
                P = sep.kick(P, Q, h * w / 2)
                Q = sep.drift(P, Q, h * w)
                P = sep.kick(P, Q, h * w / 2)
        else:
            dP, dQ, e = _advance(fld, P, Q, h * i, h, seq, fac, err_tol, max_halvings)
            accP.add(dP)
            accQ.add(dQ)
            P, Q = accP.x, accQ.x
            max_err = max(max_err, e)
        times.append(h * (i + 1))
        Ps.append(P.copy())
        Qs.append(Q.copy())
    Pa = np.stack(Ps)
    Qa = np.stack(Qs)
    theta = None
    if rotation is not None:
        theta = Qa
        tt = np.array(times, dtype=dtype)
        Qa = theta + tt[:, None, None] * np.asarray(rotation, dtype=dtype)[None, None, :]
    E = np.stack([fld.energy(Pa[i], Qa[i]) for i in range(Pa.shape[0])])
    scale = float(np.max(np.abs(E[0]))) if E.size else 0.0
    if energy_scale is not None:
        scale = max(scale, energy_scale)
    drift = float(np.max(np.abs(E - E[0]))) / scale if scale > 0 else float(np.max(np.abs(E - E[0]), initial=0.0))
    if single:
        Pa, Qa, E = Pa[:, :1], Qa[:, :1], E[:, :1]
        theta = None if theta is None else theta[:, :1]
    return Trajectory(np.array(times), Pa, Qa, E, drift, max_err, theta)


def _split_input(H):
    if isinstance(H, HamiltonianState):
        return H.perturbation(), H.freq.vector + H.detuning_tail
    if isinstance(H, tuple):
        return H
    return H, None


def _advance(fld, P, Q, t, h, seq, fac, err_tol, max_halvings):
    """Increments over ``[t, t + h]``, splitting the step while the error estimate is too large."""
    dP, dQ, e = _gbs_step(fld, P, Q, t, h, seq, fac)
    if err_tol is None or e <= err_tol:
        return dP, dQ, e
    if max_halvings <= 0:
        raise StepRejected(f"local error estimate {e:.3e} above tolerance {err_tol:.3e}")
    half = h / 2
    dP1, dQ1, e1 = _advance(fld, P, Q, t, half, seq, fac, err_tol, max_halvings - 1)
    dP2, dQ2, e2 = _advance(fld, P + dP1, Q + dQ1, t + half, half, seq, fac, err_tol, max_halvings - 1)
    return dP1 + dP2, dQ1 + dQ2, max(e1, e2)


# -- torus certificate ---------------------------------------------------------------------

def sample_phases(n: int, samples: int) -> np.ndarray:
    """Deterministic initial angles spread over the torus, shape ``(samples, n)``."""
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    i = np.arange(samples)[:, None] + 0.5
    shifts = np.array([golden ** j for j in range(n)])[None, :]
    return 2 * np.pi * ((i / samples * shifts) % 1.0)


@dataclass
class TorusReport:
    """Outcome of :func:`torus_residual`."""

    sample_phases: list[list[float]]
    horizon: float
    max_deviation: float
    energy_drift: float
    residual_floor: float
    floor_parts: dict[str, float]
    deviation_by_sample: list[float]
    integrator: dict
    factor: float = 100.0

    @property
    def bound(self) -> float:
        return self.factor * self.residual_floor * self.horizon

    @property
    def integrator_ok(self) -> bool:
        return self.energy_drift <= 1e-10

    @property
    def passed(self) -> bool:
        return self.integrator_ok and self.max_deviation <= max(self.bound, 1e-10 if self.residual_floor == 0 else 0.0)

    def to_json(self) -> dict:
        return {
            "sample_phases": self.sample_phases,
            "horizon": self.horizon,
            "max_deviation": self.max_deviation,
            "deviation_by_sample": self.deviation_by_sample,
            "energy_drift": self.energy_drift,
            "residual_floor": self.residual_floor,
            "floor_parts": self.floor_parts,
            "bound": self.bound,
            "factor": self.factor,
            "integrator_ok": self.integrator_ok,
            "pass": self.passed,
            "integrator": self.integrator,
        }


def residual_floor(result: NormalFormResult) -> dict[str, float]:
    """Expected deviation rate: what the normal form leaves undone, per unit time."""
    st = result.final_state
    parts = {
        "norm_h0": weighted_norm(st.part(0), st.dom),
        "norm_h1": weighted_norm(st.part(1), st.dom),
        "final_detuning": float(np.max(np.abs(st.detuning_tail))) * st.dom.rho,
        "truncation_loss": result.total_loss,
        "numerical_floor": result.numerical_floor,
    }
    parts["total"] = float(sum(parts.values()))
    return parts


def torus_residual(
    original: HamiltonianState,
    result: NormalFormResult,
    samples: int = 8,
    T: float = 100.0,
    dt: float = 0.5,
    *,
    columns: int = 6,
    symplectic: bool = False,
    cmap: CoordinateMap | None = None,
) -> TorusReport:
    """Integrate the original system from the torus and measure the drift off it.

    The linear frequency of the integrated system is ``omega + dw0`` summed in
    extended precision; ``original``'s own detuning is ignored.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    n = original.n
    cmap = cmap or result.coordinate_map()
    q0 = sample_phases(n, samples)
    omega = np.asarray(original.freq.vector, dtype=LD)
    linear = omega + np.asarray(result.detuning0, dtype=LD)
    P0n = np.zeros((samples, n), dtype=LD)
    Q0n = q0.astype(LD)
    P0, Q0 = cmap.forward(P0n, Q0n, dtype=LD)
    series = original.perturbation()
    energy_scale = weighted_norm(original.hamiltonian(result.omega0), result.final_state.dom)
    rot = None if symplectic else omega
    traj = integrate_orbit(
        (series, linear),
        (P0, Q0),
        T,
        dt,
        columns=columns,
        symplectic=symplectic,
        energy_scale=energy_scale,
        rotation=rot,
    )
    nt = traj.t.size
    tt = np.asarray(traj.t, dtype=LD)
    Qin = (Q0n[None, :, :] + tt[:, None, None] * omega[None, None, :]).reshape(-1, n)
    Pref, Qref = cmap.forward(np.zeros_like(Qin), Qin, dtype=LD)
    Pref = Pref.reshape(nt, samples, n)
    # compare angles through the map's displacement so no large angle enters the difference
    shift = (Qref - Qin).reshape(nt, samples, n)
    if rot is None:
        dq = traj.Q - (Qin.reshape(nt, samples, n) + shift)
    else:
        dq = traj.theta - (Q0n[None, :, :] + shift)
    dev = np.maximum(np.abs(traj.P - Pref).max(axis=2), np.abs(wrap_angle(dq)).max(axis=2))
    by_sample = [float(x) for x in dev.max(axis=0)]
    floor = residual_floor(result)
    return TorusReport(
        sample_phases=[[float(x) for x in row] for row in q0],
        horizon=float(T),
        max_deviation=float(max(by_sample)),
        energy_drift=traj.energy_drift,
        residual_floor=floor["total"],
        floor_parts=floor,
        deviation_by_sample=by_sample,
        integrator={
            "method": "leapfrog composition" if symplectic else "extrapolated midpoint",
            "order": 8 if symplectic else 2 * columns,
            "dt": float(T) / max(1, nt - 1),
            "precision_bits": int(np.finfo(LD).nmant + 1),
            "max_local_error": traj.max_error_estimate,
        },
    )


# -- deformation and canonicity ---------------------------------------------------------------

@dataclass
class DeformationReport:
    """Largest displacement of the composed map over a grid of the final domain."""

    max_dp: float
    max_dq: float
    max_dp_rel: float
    max_dq_rel: float
    per_step_pattern: list[float]
    bound_p: float
    bound_q: float
    certified_regime: bool
    points: int

    @property
    def within_bound(self) -> bool:
        return self.max_dp <= self.bound_p and self.max_dq <= self.bound_q

    @property
    def passed(self) -> bool | None:
        return self.within_bound if self.certified_regime else None

    def to_json(self) -> dict:
        return {
            "max_dp": self.max_dp,
            "max_dq": self.max_dq,
            "max_dp_over_rho": self.max_dp_rel,
            "max_dq_over_sigma": self.max_dq_rel,
            "delta_pattern": self.per_step_pattern,
            "bound_p": self.bound_p,
            "bound_q": self.bound_q,
            "within_bound": self.within_bound,
            "certified_regime": self.certified_regime,
            "pass": self.passed,
            "points": self.points,
        }


def deformation_check(
    result: NormalFormResult,
    dom: DomainParams,
    delta_schedule: Sequence[float],
    tau: float | None = None,
    grid: int = 7,
    certified: bool = False,
    cmap: CoordinateMap | None = None,
) -> DeformationReport:
    """Displacement ``|x' - x|`` of the composed map on a grid of real points.

    The grid covers ``|p_j| <= rho`` and a full turn of each angle.  The bound
    pattern is ``delta_k^(tau+3)`` per step; the totals ``rho sum delta^(tau+3)``
    and ``sigma sum delta^(tau+3)`` bound the action and angle displacements.
    """
    n = result.initial_state.n
    tau = result.initial_state.freq.tau if tau is None else tau
    cmap = cmap or result.coordinate_map()
    gp = np.linspace(-dom.rho, dom.rho, 3)
    gq = np.linspace(0, 2 * np.pi, grid, endpoint=False)
    axes = [gp] * n + [gq] * n
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2 * n)
    if mesh.shape[0] > 4096:
        mesh = mesh[np.linspace(0, mesh.shape[0] - 1, 4096).astype(int)]
    P, Q = mesh[:, :n], mesh[:, n:]
    if result.generators:
        P2, Q2 = cmap.forward(P, Q)
        dp = float(np.max(np.abs(P2 - P)))
        dq = float(np.max(np.abs(wrap_angle(Q2 - Q))))
    else:
        dp = dq = 0.0
    pattern = [float(d ** (tau + 3)) for d in delta_schedule]
    total = float(sum(pattern))
    return DeformationReport(
        max_dp=dp,
        max_dq=dq,
        max_dp_rel=dp / dom.rho,
        max_dq_rel=dq / dom.sigma,
        per_step_pattern=pattern,
        bound_p=dom.rho * total,
        bound_q=dom.sigma * total,
        certified_regime=certified,
        points=int(P.shape[0]),
    )


def symplecticity_defect(cmap: CoordinateMap, points_p: np.ndarray, points_q: np.ndarray, h: float = 1e-5) -> float:
    """``max ||J^T Omega J - Omega||_inf`` with ``J`` from central differences."""
    P = np.atleast_2d(np.asarray(points_p, dtype=float))
    Q = np.atleast_2d(np.asarray(points_q, dtype=float))
    n = P.shape[1]
    Om = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    worst = 0.0
    for x_p, x_q in zip(P, Q):
        x = np.concatenate([x_q, x_p])  # ordering (q, p)
        J = np.empty((2 * n, 2 * n))
        plus, minus = [], []
        for i in range(2 * n):
            e = np.zeros(2 * n)
            e[i] = h
            plus.append(x + e)
            minus.append(x - e)
        pts = np.array(plus + minus)
        Pf, Qf = cmap.forward(pts[:, n:], pts[:, :n])
        out = np.concatenate([Qf, Pf], axis=1)
        J = ((out[: 2 * n] - out[2 * n :]) / (2 * h)).T
        worst = max(worst, float(np.max(np.abs(J.T @ Om @ J - Om))))
    return worst


def round_trip_error(cmap: CoordinateMap, points_p: np.ndarray, points_q: np.ndarray) -> float:
    """``max |inverse(forward(x)) - x|`` over the given points."""
    P = np.atleast_2d(np.asarray(points_p, dtype=float))
    Q = np.atleast_2d(np.asarray(points_q, dtype=float))
    Pf, Qf = cmap.forward(P, Q)
    Pb, Qb = cmap.inverse(Pf, Qf)
    return float(max(np.max(np.abs(Pb - P)), np.max(np.abs(wrap_angle(Qb - Q)))))
