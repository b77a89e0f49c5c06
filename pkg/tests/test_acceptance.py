"""Acceptance criteria, each run at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import golden_type, random_series
from kamknob.cli import execute, main
from kamknob.config import parse_config
from kamknob.estimates import (
    compute_constants,
    contraction_slope,
    epsilon_threshold,
    predicted_schedule,
    shrink_product,
)
from kamknob.homological import DiophantineFrequency, solve_homological
from kamknob.normalizer import RunParams, run_normalization, state_from_series
from kamknob.presets import preset
from kamknob.series import (
    DomainParams,
    TruncationPolicy,
    derivative_p,
    derivative_q,
    lie_derivative,
    linear_form,
    poisson_bracket,
    weighted_norm,
)
from kamknob.verification import round_trip_error, symplecticity_defect, torus_residual

DOM = DomainParams(0.1, 0.5)
# prod_k (1 - 4 * 9^-k), evaluated with mpmath at 30 digits
PRODUCT_ORACLE = 0.52486272111466925
POLICY = TruncationPolicy(p_degree=4, fourier_order=32, lie_order=12, tail_tol=1e-16)


def _normalize(name, eps, steps):
    h, d = preset(name, eps)
    freq = DiophantineFrequency(d["omega"], d["gamma"], d["tau"])
    state = state_from_series(h, freq, DOM)
    return state, run_normalization(state, RunParams(steps=steps, alpha=9.0, policy=POLICY))


@pytest.fixture(scope="module")
def pendulum_run():
    t0 = time.perf_counter()
    state, res = _normalize("pendulum", 1e-3, 5)
    return state, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def golden_run():
    t0 = time.perf_counter()
    state, res = _normalize("two_dof_golden", 1e-3, 6)
    tor = torus_residual(state, res, samples=8, T=100.0)
    return state, res, tor, time.perf_counter() - t0


def test_criterion_1_identity(criterion):
    cfg = parse_config({"hamiltonian": "pendulum", "epsilon": 0.0})
    t0 = time.perf_counter()
    out = execute(cfg, verify=True)
    elapsed = time.perf_counter() - t0
    res = out.result
    zero_gens = all(not g.chi0 and not g.chi1 and not np.any(g.detuning_increment) for g in res.generators)
    tor = out.report["verification"]["torus"]
    ok = (
        np.all(res.detuning0 == 0)
        and zero_gens
        and res.residual <= 1e-14
        and tor["max_deviation"] <= 1e-10
        and tor["horizon"] == 100
        and elapsed < 1.0
    )
    criterion(
        1,
        "identity case (eps = 0)",
        ok,
        f"dw0={res.detuning0.tolist()} residual={res.residual:.1e} dev={tor['max_deviation']:.1e} t={elapsed:.2f}s",
    )
    assert np.all(res.detuning0 == 0)
    assert zero_gens
    assert res.residual <= 1e-14
    assert tor["max_deviation"] <= 1e-10
    assert elapsed < 1.0


def test_criterion_2_quadratic_contraction(pendulum_run, criterion):
    _, res, elapsed = pendulum_run
    r = [max(res.initial_state.residuals())] + [s.residual for s in res.steps]
    slope = contraction_slope(r, floor=res.numerical_floor)
    drops = [a / b if b > 0 else math.inf for a, b in zip(r[:3], r[1:4])]
    ok = slope is not None and slope >= 1.8 and len(drops) == 3 and min(drops) >= 1e2 and elapsed < 60
    criterion(2, "quadratic contraction (pendulum, eps = 1e-3, N = 5)", ok, f"slope={slope:.3f} min drop={min(drops):.1e} t={elapsed:.2f}s")
    assert slope >= 1.8
    assert len(drops) == 3 and min(drops) >= 1e2
    assert elapsed < 60


def test_criterion_3_detuning_fixed_point(golden_run, criterion):
    _, res, tor, elapsed = golden_run
    upd = res.outer_updates
    shrinks = [a / b if b > 0 else math.inf for a, b in zip(upd, upd[1:])]
    dw = float(np.max(np.abs(res.detuning0)))
    ok = (
        res.converged
        and res.outer_iterations <= 5
        and all(s >= 10 for s in shrinks)
        and 0 < dw <= 1e-4
        and tor.max_deviation <= 100 * tor.residual_floor * 100.0
        and elapsed < 300
    )
    criterion(
        3,
        "detuning fixed point (two-DOF golden)",
        ok,
        f"passes={res.outer_iterations} min shrink={min(shrinks):.1e} |dw0|={dw:.2e} dev={tor.max_deviation:.1e} bound={tor.bound:.1e} t={elapsed:.1f}s",
    )
    assert res.converged and res.outer_iterations <= 5
    assert all(s >= 10 for s in shrinks)
    assert 0 < dw <= 1e-4
    assert tor.max_deviation <= 100 * tor.residual_floor * 100.0
    assert elapsed < 300


def test_criterion_4_homological_exactness(criterion):
    rng = np.random.default_rng(20240601)
    dom = DomainParams(0.5, 0.5)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        n = 1 + i % 3
        freq = DiophantineFrequency(golden_type(n), 0.1, max(n - 1, 0))
        K = int(rng.integers(1, 17))
        rhs = random_series(rng, n, int(rng.integers(1, 8)), 3, max(1, K // n), zero_average=True)
        chi = solve_homological(rhs, freq)
        lhs = lie_derivative(chi, linear_form(n, freq.omega)) + rhs
        worst = max(worst, weighted_norm(lhs, dom) / weighted_norm(rhs, dom))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 30
    criterion(4, "homological exactness (1000 random right-hand sides)", ok, f"worst ratio={worst:.1e} t={elapsed:.1f}s")
    assert worst <= 1e-12
    assert elapsed < 30


def _lemma_trials(rng, count):
    """Yield random ``(f, g, d, d', rho, sigma)`` draws for the norm inequalities."""
    for i in range(count):
        n = 1 + i % 3
        f = random_series(rng, n, int(rng.integers(1, 6)), 3, 4)
        g = random_series(rng, n, int(rng.integers(1, 6)), 3, 4)
        d = float(rng.uniform(1e-3, 0.5))
        dp = float(rng.uniform(1e-3, 0.5))
        rho = float(rng.uniform(0.05, 1.0))
        sigma = float(rng.uniform(0.05, 1.0))
        yield n, f, g, d, dp, DomainParams(rho, sigma)


def test_criterion_5_lemma_inequalities(criterion):
    rng = np.random.default_rng(7)
    rtol = 1 + 1e-12
    t0 = time.perf_counter()
    bad = {"derivative": 0, "poisson": 0, "lie": 0}
    for n, f, g, d, dp, dom in _lemma_trials(rng, 1000):
        nf = weighted_norm(f, dom)
        inner = dom.scaled(1 - d)
        for j in range(n):
            if weighted_norm(derivative_p(f, j), inner) > nf / (d * dom.rho) * rtol:
                bad["derivative"] += 1
            if weighted_norm(derivative_q(f, j), inner) > nf / (math.e * d * dom.sigma) * rtol:
                bad["derivative"] += 1
    for n, f, g, d, dp, dom in _lemma_trials(rng, 1000):
        lhs = weighted_norm(poisson_bracket(f, g), dom.scaled(1 - dp - d))
        rhs = 2 / (math.e * d * (d + dp) * dom.rho * dom.sigma) * weighted_norm(f, dom) * weighted_norm(g, dom.scaled(1 - dp))
        if lhs > rhs * rtol:
            bad["poisson"] += 1
    for n, X, g, d, dp, dom in _lemma_trials(rng, 1000):
        mid = dom.scaled(1 - dp)
        nx, ng = weighted_norm(X, mid), weighted_norm(g, mid)
        out = dom.scaled(1 - d - dp)
        term = g
        for j in range(1, 5):
            term = lie_derivative(X, term) / j
            bound = math.exp(-2) * (2 * math.e / (dom.rho * dom.sigma)) ** j / d ** (2 * j) * nx**j * ng
            if weighted_norm(term, out) > bound * rtol:
                bad["lie"] += 1
    elapsed = time.perf_counter() - t0
    ok = not any(bad.values()) and elapsed < 60
    criterion(5, "norm inequalities on random series", ok, f"violations={bad} t={elapsed:.1f}s")
    assert not any(bad.values()), bad
    assert elapsed < 60


def test_criterion_6_schedule_identities(criterion):
    sched = predicted_schedule(1e-3, 9.0, DOM, 80)
    total = math.fsum(sched.delta_k)
    prod = shrink_product(9.0)
    # independent arithmetic for the threshold: exact rationals on the same ledger
    freq = DiophantineFrequency([1.0, golden_type(2)[1]], 0.5, 1.0)
    ledger = compute_constants(1.0, 2, freq, DomainParams(0.05, 0.25))
    alpha, tau = 9, 1
    lam, k5 = Fraction(ledger.Lambda), Fraction(ledger.K[4])
    first = 1 / (lam * Fraction(alpha) ** (3 * tau + 6))
    second = 1 / (Fraction(alpha) ** (tau + 2) * (k5 + 1))
    expect = float(min(first, second))
    got = epsilon_threshold(ledger, alpha, tau)
    ok = (
        abs(total - 0.125) <= 1e-15
        and prod >= 0.5
        and abs(prod - PRODUCT_ORACLE) <= 1e-15
        and got == expect
    )
    criterion(6, "schedule identities and threshold", ok, f"sum={total!r} prod={prod:.6f} eps*={got:.6e}")
    assert abs(total - 0.125) <= 1e-15
    assert prod >= 0.5 and abs(prod - PRODUCT_ORACLE) <= 1e-15
    assert got == expect


def test_criterion_7_canonicity(golden_run, criterion):
    _, res, _, _ = golden_run
    cmap = res.coordinate_map()
    rng = np.random.default_rng(3)
    P = rng.uniform(-0.02, 0.02, size=(20, 2))
    Q = rng.uniform(0, 2 * np.pi, size=(20, 2))
    sym = symplecticity_defect(cmap, P, Q)
    rt = round_trip_error(cmap, P, Q)
    ok = sym <= 1e-6 and rt <= 1e-10
    criterion(7, "canonicity of the composed transformation", ok, f"symplecticity={sym:.1e} round trip={rt:.1e}")
    assert sym <= 1e-6
    assert rt <= 1e-10


def test_criterion_8_determinism(tmp_path, criterion):
    cfg = tmp_path / "pendulum.json"
    cfg.write_text('{"hamiltonian": "pendulum", "epsilon": 1e-3, "steps": 5}')
    codes = [main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--no-verify"]) for d in ("a", "b")]
    a = (tmp_path / "a" / "residuals.csv").read_bytes()
    b = (tmp_path / "b" / "residuals.csv").read_bytes()
    ok = a == b and all(c in (0, 2) for c in codes)
    criterion(8, "byte-identical residuals.csv on repeat", ok, f"{len(a)} bytes, exit codes {codes}")
    assert a == b
    assert all(c in (0, 2) for c in codes)
