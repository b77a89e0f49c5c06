import itertools
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import GOLDEN, golden_type, random_series, series_strategy
from kamknob.homological import (
    AverageNotRemovedError,
    DiophantineFrequency,
    ResonanceError,
    check_diophantine,
    chi_norm_factor,
    smallest_divisor,
    solve_homological,
)
from kamknob.series import DomainParams, FourierTaylor, angle_average, lie_derivative, linear_form, weighted_norm

F = FourierTaylor


def residual(chi, rhs, omega):
    return lie_derivative(chi, linear_form(rhs.n, omega)) + rhs


def test_tau_must_cover_dimension():
    with pytest.raises(ValueError):
        DiophantineFrequency([1.0, GOLDEN], 0.5, 0.5)
    with pytest.raises(ValueError):
        DiophantineFrequency([1.0], -1.0, 0.0)


def test_resonant_vector_names_k():
    rep = check_diophantine(DiophantineFrequency([1.0, 0.5], 0.5, 1.0), 8)
    assert not rep.passed
    ks = dict(rep.violations)
    assert ks[(1, -2)] == 0.0
    assert rep.worst_k == (1, -2)


def test_golden_minimum_matches_exhaustive_scan():
    # independent high-precision scan over the full lattice |k| <= 20
    mp.mp.dps = 40
    g = (mp.sqrt(5) - 1) / 2
    best, arg = None, None
    for k1, k2 in itertools.product(range(-20, 21), repeat=2):
        if (k1, k2) == (0, 0) or abs(k1) + abs(k2) > 20:
            continue
        v = abs(k1 + k2 * g)
        if best is None or v < best:
            best, arg = v, (k1, k2)
    rep = check_diophantine(DiophantineFrequency([1.0, GOLDEN], 0.5, 1.0), 20)
    found = min(rep.min_divisor_per_order)
    assert found == pytest.approx(float(best), abs=1e-15)
    assert float(best) == pytest.approx(0.0557280900008412144, rel=1e-15)
    # attained at the Fibonacci pair (5, -8)
    assert {abs(arg[0]), abs(arg[1])} == {5, 8}
    order13 = rep.argmin_per_order[12]
    assert sorted(map(abs, order13)) == [5, 8]
    assert rep.passed


def test_pendulum_frequency_passes():
    assert check_diophantine(DiophantineFrequency([1.0], 0.5, 0.0), 32).passed


def test_cos_rhs():
    eps = 1e-3
    chi = solve_homological(F.cos(1, [1], eps), DiophantineFrequency([1.0], 0.5, 0.0))
    assert chi == F.sin(1, [1], eps)


def test_action_dependent_rhs():
    chi = solve_homological(F.cos(1, [1], m=[1]), DiophantineFrequency([1.0], 0.5, 0.0))
    assert chi == F.sin(1, [1], m=[1])


def test_resonance_error():
    freq = DiophantineFrequency([1.0, 0.5], 0.5, 1.0)
    with pytest.raises(ResonanceError) as info:
        solve_homological(F.cos(2, [1, -2]), freq)
    assert tuple(info.value.k) == (1, -2)


def test_average_must_be_removed():
    freq = DiophantineFrequency([1.0], 0.5, 0.0)
    with pytest.raises(AverageNotRemovedError):
        solve_homological(F.cos(1, [1]) + F.constant(1, 0.1), freq)
    # rounding-level averages are tolerated
    solve_homological(F.cos(1, [1]) + F.constant(1, 1e-17), freq)


def test_smallest_divisor():
    freq = DiophantineFrequency([1.0, GOLDEN], 0.5, 1.0)
    rhs = F.cos(2, [1, 0]) + F.cos(2, [1, -1])
    assert smallest_divisor(rhs, freq) == pytest.approx(1 - GOLDEN)
    assert smallest_divisor(F.constant(2, 1.0), freq) == math.inf


@given(st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_solution_is_exact(n, seed):
    rng = np.random.default_rng(seed)
    rhs = random_series(rng, n, 6, 3, 5, zero_average=True)
    freq = DiophantineFrequency(golden_type(n), 0.1, n - 1)
    chi = solve_homological(rhs, freq)
    dom = DomainParams(0.5, 0.5)
    assert weighted_norm(residual(chi, rhs, freq.omega), dom) <= 1e-13 * weighted_norm(rhs, dom)
    assert not angle_average(chi)
    assert chi.is_hermitian(1e-15)


@given(series_strategy(n=2, zero_average=True, max_k=8), st.floats(0.05, 0.5), st.floats(0.1, 1.0))
def test_generator_norm_bound(rhs, delta, sigma):
    tau = 1.0
    # the sharpest gamma this vector satisfies on the modes present
    kw = np.abs(rhs.k @ np.array([1.0, GOLDEN]))
    order = np.abs(rhs.k).sum(axis=1)
    gamma = float((kw * order**tau).min())
    freq = DiophantineFrequency([1.0, GOLDEN], gamma, tau)
    chi = solve_homological(rhs, freq)
    dom = DomainParams(0.2, sigma)
    lhs = weighted_norm(chi, dom.scaled(1 - delta))
    assert lhs <= chi_norm_factor(freq, delta, sigma) * weighted_norm(rhs, dom) * (1 + 1e-12)


def test_chi_norm_factor_tau_zero():
    assert chi_norm_factor(DiophantineFrequency([1.0], 0.5, 0.0), 0.1, 0.3) == 2.0
