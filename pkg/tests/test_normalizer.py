import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN, random_series
from kamknob.homological import DiophantineFrequency, ResonanceError
from kamknob.normalizer import (
    CoordinateMap,
    GeneratorPair,
    OutOfDomain,
    RunParams,
    TruncationOverflow,
    normalization_step,
    run_normalization,
    state_from_series,
    transform_point,
)
from kamknob.presets import preset
from kamknob.series import DomainParams, FourierTaylor, TruncationPolicy, angle_average, weighted_norm

F = FourierTaylor
DOM = DomainParams(0.1, 0.5)
POL = TruncationPolicy()
PEND = DiophantineFrequency([1.0], 0.5, 0.0)


def pendulum_state(eps):
    return state_from_series(preset("pendulum", eps)[0], PEND, DOM)


@pytest.fixture(scope="module")
def golden():
    h, d = preset("two_dof_golden", 1e-3)
    state = state_from_series(h, DiophantineFrequency(d["omega"], d["gamma"], d["tau"]), DOM)
    return state, run_normalization(state, RunParams(policy=POL))


def test_state_split_by_degree():
    s = pendulum_state(1e-3)
    assert s.part(0) == F.cos(1, [1], 1e-3)
    assert s.part(1) == F.zero(1)
    assert s.part(2) == F.monomial(1, [2], 0.5)
    assert s.residuals()[0] == pytest.approx(1e-3 * np.exp(0.5))


def test_pendulum_single_step():
    eps = 1e-3
    new, gen, diag = normalization_step(pendulum_state(eps), POL, delta=1 / 9, step=1)
    assert gen.chi0 == F.sin(1, [1], eps)
    assert np.all(gen.detuning_increment == 0)
    # with L_chi f = {f, chi}: hat h_1 = {p^2/2, chi0} = -eps p cos q
    assert gen.chi1 == F.sin(1, [1], -eps, m=[1])
    assert diag.residual_h0 <= 2 * eps**2
    assert new.dom.rho == pytest.approx(0.1 * (1 - 4 / 9))


def test_step_with_only_linear_perturbation():
    a = 0.01
    h = F.cos(1, [1], a, m=[1]) + F.monomial(1, [2], 0.5)
    new, gen, diag = normalization_step(state_from_series(h, PEND, DOM), POL)
    assert not gen.chi0
    assert np.all(gen.detuning_increment == 0)
    assert gen.chi1 == F.sin(1, [1], a, m=[1])


def test_detuning_increment_is_average_of_linear_part():
    h = F.monomial(1, [1], 0.02) + F.cos(1, [1], 1e-3) + F.monomial(1, [2], 0.5)
    _, gen, _ = normalization_step(state_from_series(h, PEND, DOM), POL)
    # <h1> = 0.02 p plus the average of {p^2/2, chi0}, which vanishes
    assert gen.detuning_increment[0] == pytest.approx(0.02, abs=1e-15)


def test_pendulum_run_and_second_order_detuning():
    eps = 1e-3
    res = run_normalization(pendulum_state(eps), RunParams(steps=5, policy=POL))
    r = [s.residual for s in res.steps]
    assert all(b < a * 1e-2 for a, b in zip(r, r[1:]))
    # second-order averaging: the torus of frequency 1 sits on omega0 = 1 + eps^2/2 + O(eps^4)
    assert res.detuning0[0] == pytest.approx(eps**2 / 2, rel=1e-5)
    assert res.omega0[0] == 1.0 + res.detuning0[0]
    assert res.converged


def test_identity_case():
    res = run_normalization(pendulum_state(0.0), RunParams(policy=POL))
    assert res.residual == 0.0
    assert np.all(res.detuning0 == 0.0)
    assert all(not g.chi0 and not g.chi1 for g in res.generators)


def test_golden_detuning_frozen(golden):
    _, res = golden
    # reference values from the converged run
    assert res.detuning0 == pytest.approx([1.8442377232e-05, -1.7942376486e-05], rel=1e-8)
    assert res.outer_iterations <= 5
    assert res.residual < 1e-15


def test_tail_bookkeeping(golden):
    _, res = golden
    for k, gen in enumerate(res.generators, start=1):
        assert np.array_equal(res.tails[k], res.tails[k - 1] + gen.detuning_increment)
    assert np.array_equal(res.tails[0], res.detuning0)
    assert np.max(np.abs(res.tails[-1])) < 1e-15


def test_final_state_is_normal_form(golden):
    _, res = golden
    fin = res.final_state
    r0, r1 = fin.residuals()
    assert r0 < 1e-15 and r1 < 1e-15
    assert np.max(np.abs(res.detuning0)) > 0


def test_deterministic(golden):
    state, res = golden
    again = run_normalization(state, RunParams(policy=POL))
    assert np.array_equal(again.detuning0, res.detuning0)
    assert [s.to_json() for s in again.steps] == [s.to_json() for s in res.steps]


def test_resonant_frequency_rejected():
    h = F.cos(2, [1, -2], 1e-3) + F.monomial(2, [2, 0], 0.5)
    state = state_from_series(h, DiophantineFrequency([1.0, 0.5], 0.5, 1.0), DOM)
    with pytest.raises(ResonanceError):
        run_normalization(state, RunParams(steps=2, policy=POL))


def test_truncation_overflow():
    h = F.cos(1, [1], 1e-10) + F.cos(1, [1], 10.0, m=[2])
    state = state_from_series(h, PEND, DOM)
    with pytest.raises(TruncationOverflow):
        normalization_step(state, TruncationPolicy(fourier_order=1), 1 / 9, 1)


def test_generator_json_round_trip(golden):
    _, res = golden
    gen = res.generators[1]
    back = GeneratorPair.from_json(json.loads(json.dumps(gen.to_json())))
    assert back.chi0 == gen.chi0 and back.chi1 == gen.chi1
    assert np.array_equal(back.detuning_increment, gen.detuning_increment)


# -- coordinate maps -------------------------------------------------------------


def test_angle_generator_moves_actions_by_eps():
    eps = 1e-3
    gens = [GeneratorPair(F.sin(1, [1], eps), F.zero(1), np.zeros(1))]
    cmap = CoordinateMap(gens, POL, DOM)
    q = np.linspace(0, 2 * np.pi, 64, endpoint=False)[:, None]
    p = np.zeros_like(q)
    P, Q = cmap.forward(p, q)
    assert np.allclose(P[:, 0], -eps * np.cos(q[:, 0]), atol=1e-18)
    assert np.array_equal(Q, q)
    assert np.max(np.abs(P - p)) == pytest.approx(eps, rel=1e-15)


def test_round_trip(golden):
    _, res = golden
    cmap = res.coordinate_map()
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.02, 0.02, (10, 2))
    q = rng.uniform(0, 2 * np.pi, (10, 2))
    P, Q = cmap.forward(p, q)
    p2, q2 = cmap.inverse(P, Q)
    assert np.max(np.abs(p2 - p)) < 1e-14 and np.max(np.abs(q2 - q)) < 1e-14


def test_transform_point_matches_map(golden):
    _, res = golden
    pt = (np.array([0.01, -0.01]), np.array([0.3, 1.2]))
    fwd = transform_point(res.generators, pt, "forward", POL, DOM)
    P, Q = res.coordinate_map().forward(pt[0], pt[1])
    assert np.allclose(fwd[0], P, atol=1e-16) and np.allclose(fwd[1], Q, atol=1e-16)
    back = transform_point(res.generators, fwd, "inverse", POL, DOM)
    assert np.allclose(back[0], pt[0], atol=1e-15)


def test_out_of_domain(golden):
    _, res = golden
    with pytest.raises(OutOfDomain):
        res.coordinate_map().forward(np.array([1.0, 0.0]), np.zeros(2))


# -- properties -----------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.floats(1e-5, 1e-3))
@settings(max_examples=25)
def test_step_squares_the_perturbation(seed, eps):
    rng = np.random.default_rng(seed)
    pert = random_series(rng, 1, 3, 1, 3, zero_average=True, scale=eps)
    h = pert + F.monomial(1, [2], 0.5)
    state = state_from_series(h, PEND, DOM)
    before = max(state.residuals())
    new, _, diag = normalization_step(state, POL, delta=1 / 9, step=1)
    # quadratic gain: the new residual is a bounded multiple of the old one squared
    assert diag.residual <= 1e4 * before**2
    assert weighted_norm(angle_average(new.part(0)), new.dom) == 0.0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15)
def test_two_dof_step_detuning_matches_average(seed):
    rng = np.random.default_rng(seed)
    eps = 1e-4
    pert = random_series(rng, 2, 3, 1, 2, zero_average=True, scale=eps)
    lin = F.monomial(2, [1, 0], 3e-5) + F.monomial(2, [0, 1], -2e-5)
    h = pert + lin + F.monomial(2, [2, 0], 0.5) + F.monomial(2, [0, 2], 0.5)
    state = state_from_series(h, DiophantineFrequency([1.0, GOLDEN], 0.1, 1.0), DOM)
    new, gen, _ = normalization_step(state, POL)
    # the new state carries tail + c and its linear part is purely oscillating to first order
    assert np.array_equal(new.detuning_tail, state.detuning_tail + gen.detuning_increment)
    assert gen.detuning_increment == pytest.approx([3e-5, -2e-5], abs=50 * eps**2)
