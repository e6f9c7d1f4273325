import cmath
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from floquet_dtn.errors import DegenerateMultiplier, VectorModeRequested
from floquet_dtn.floquet_modes import (
    CaseCRule,
    CaseTag,
    Direction,
    build_mode,
    build_modes,
    classify,
    eval_mode,
    exponents,
    log_derivative,
    multipliers,
)
from floquet_dtn.hill_core import monodromy
from floquet_dtn.profiles import RefractiveProfile

TWO_PI = 2 * math.pi
ONE = RefractiveProfile.constant(1.0)
MATHIEU = RefractiveProfile.cosine(1.0, 0.3)
DOWN, UP = Direction.DOWNWARD, Direction.UPWARD


@pytest.mark.parametrize(
    "eta, want",
    [(0.0, (1j, -1j)), (2.5, (2.0, 0.5)), (-2.5, (-2.0, -0.5))],
)
def test_multipliers(eta, want):
    got = multipliers(eta)
    assert got[0] == pytest.approx(want[0], abs=1e-15)
    assert got[1] == pytest.approx(want[1], abs=1e-15)


def test_exponents():
    assert exponents(1j, -1j)[0] == pytest.approx(0.25j, abs=1e-15)
    ln2 = float(mpmath.log(2) / (2 * mpmath.pi))
    assert exponents(2, 0.5)[0] == pytest.approx(ln2, abs=1e-15)
    mu = exponents(-2, -0.5)
    assert mu[0] == pytest.approx(ln2 + 0.5j, abs=1e-15)
    assert mu[1] == pytest.approx(-ln2 + 0.5j, abs=1e-15)
    with pytest.raises(DegenerateMultiplier):
        exponents(0, 1)


@given(st.floats(-1e6, 1e6).filter(lambda e: abs(abs(e) - 2) > 1e-9))
def test_exponent_branch(eta):
    for mu in exponents(*multipliers(eta)):
        assert -0.5 < mu.imag <= 0.5


def test_classify_closed_forms():
    assert classify(monodromy(ONE, 1.0, 1.0)).case is CaseTag.D_II
    assert classify(monodromy(ONE, 0.5, 0.0)).case is CaseTag.E_I
    m = classify(monodromy(ONE, 1.0, 2.0))
    assert m.case is CaseTag.A
    assert m.eta == pytest.approx(2 * math.cosh(TWO_PI * math.sqrt(3)), rel=1e-12)
    assert m.mu1.real == pytest.approx(math.sqrt(3), rel=1e-12)


def test_classify_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        classify(monodromy(ONE, 1.0, 0.3), eps_eta=1e-3)


def test_integer_beta_gives_identity_monodromy():
    # beta_0 = 1 at k = 1, theta = 0: W = I, a two-dimensional solution space
    m = build_mode(ONE, 1.0, 0.0, TWO_PI, 0)
    assert m.case is CaseTag.D_I
    with pytest.raises(VectorModeRequested):
        eval_mode(m, DOWN, 0.0)


def test_homogeneous_propagating_modes():
    k = 0.8
    m = build_mode(ONE, k, 0.0, TWO_PI, 0)
    assert m.case is CaseTag.C
    assert m.theta_n == pytest.approx(0.2, abs=1e-12)
    ev = eval_mode(m, DOWN, -4 * math.pi)
    assert ev.u == pytest.approx(cmath.exp(4j * math.pi * k), abs=1e-10)
    assert ev.du == pytest.approx(-1j * k * ev.u, abs=1e-10)
    ev = eval_mode(m, UP, 2.3)
    assert ev.u == pytest.approx(cmath.exp(2.3j * k), abs=1e-10)
    assert log_derivative(m, DOWN, 0.4) == pytest.approx(-1j * k, abs=1e-12)


def test_homogeneous_evanescent_modes():
    m = build_mode(ONE, 1.0, 0.0, TWO_PI, 2)
    r3 = math.sqrt(3)
    assert m.case is CaseTag.A
    assert log_derivative(m, DOWN, 0.0) == pytest.approx(r3, rel=1e-12)
    assert log_derivative(m, UP, 0.0) == pytest.approx(-r3, rel=1e-12)
    assert eval_mode(m, DOWN, -1.5).u == pytest.approx(math.exp(-1.5 * r3), rel=1e-10)
    assert eval_mode(m, UP, 1.5).u == pytest.approx(math.exp(-1.5 * r3), rel=1e-10)


def test_small_mathieu_perturbation_is_growing_at_normal_incidence():
    q = RefractiveProfile.cosine(1.0, 0.1)
    m = build_mode(q, 1.0, 0.0, TWO_PI, 0)
    ref = oracles.oracle_eta(q, 1.0, 0.0, steps=4000)
    assert ref > 2.0
    assert m.case is CaseTag.A
    assert m.eta == pytest.approx(ref, abs=1e-9)
    attracting, repelling = oracles.real_floquet_log_derivatives(oracles.scattering_c(q, 1.0, 0.0), 0.0)
    assert log_derivative(m, DOWN, 0.0) == pytest.approx(attracting, rel=1e-8)
    assert log_derivative(m, UP, 0.0) == pytest.approx(repelling, rel=1e-8)


def test_mathieu_evanescent_log_derivative_against_riccati():
    m = build_mode(MATHIEU, 1.0, 0.0, TWO_PI, 3)
    attracting, repelling = oracles.real_floquet_log_derivatives(oracles.scattering_c(MATHIEU, 1.0, 3.0), 0.0)
    assert log_derivative(m, DOWN, 0.0) == pytest.approx(attracting, rel=1e-10)
    assert log_derivative(m, UP, 0.0) == pytest.approx(repelling, rel=1e-10)


def test_mathieu_propagating_log_derivative_against_riccati():
    k, theta, x0 = 0.8, 0.3, 0.37
    m = build_mode(MATHIEU, k, theta, TWO_PI, 0)
    assert m.case is CaseTag.C
    cfun = oracles.scattering_c(MATHIEU, k, k * math.sin(theta))
    down = oracles.complex_floquet_log_derivative(cfun, x0, -1)
    assert log_derivative(m, DOWN, x0) == pytest.approx(down, rel=1e-9)
    assert log_derivative(m, UP, x0) == pytest.approx(down.conjugate(), rel=1e-9)


def test_backward_evaluation_against_direct_integration():
    m = build_mode(MATHIEU, 1.0, 0.2, TWO_PI, 2)
    assert m.case is CaseTag.A
    c = m.vector(DOWN)
    Y = oracles.rk4_fundamental(oracles.scattering_c(MATHIEU, 1.0, m.alpha_n), 0.0, -1.0, 4000)[0]
    want = Y @ c
    ev = eval_mode(m, DOWN, -1.0)
    assert ev.u == pytest.approx(want[0], rel=1e-9)
    assert ev.du == pytest.approx(want[1], rel=1e-9)


def test_flux_rule_and_exponent_rule():
    k, theta = 0.8, 0.3
    flux = build_mode(MATHIEU, k, theta, TWO_PI, 0)
    expo = build_mode(MATHIEU, k, theta, TWO_PI, 0, case_c_rule=CaseCRule.EXPONENT)
    assert flux.flux(DOWN) < 0 < flux.flux(UP)
    assert expo.multiplier(DOWN) == pytest.approx(cmath.exp(-2j * math.pi * expo.theta_n), abs=1e-12)


def test_near_degenerate_mode_warns():
    # |eta - 2| ~ (2 pi 5e-5)^2 ~ 1e-7 sits between eps_eta and the warning threshold
    m = build_mode(ONE, 1.0 + 5e-5, 0.0, TWO_PI, 0)
    assert m.near_degenerate
    assert any("nearly degenerate" in w for w in m.warnings)


def test_threads_do_not_change_modes():
    a = build_modes(MATHIEU, 0.9, 0.2, TWO_PI, (-6, 6))
    b = build_modes(MATHIEU, 0.9, 0.2, TWO_PI, (-6, 6), threads=4)
    for x, y in zip(a, b):
        assert x.eta == y.eta and x.case is y.case
        assert np.array_equal(x.vector(DOWN), y.vector(DOWN))


@pytest.mark.parametrize("bad", [dict(k=0.0), dict(theta=math.pi / 2), dict(p=-1.0)])
def test_build_modes_preconditions(bad):
    args = dict(k=1.0, theta=0.1, p=TWO_PI)
    args.update(bad)
    with pytest.raises(ValueError):
        build_modes(MATHIEU, args["k"], args["theta"], args["p"], (0, 1))


# -- properties -------------------------------------------------------------------

@pytest.fixture(scope="module")
def mathieu_modes():
    return build_modes(MATHIEU, 0.9, 0.25, TWO_PI, (-8, 8))


def test_eigenvector_residual(mathieu_modes):
    for m in mathieu_modes:
        W = m.monodromy.W * math.exp(m.monodromy.log_scale)
        for direction in (DOWN, UP):
            v = m.vector(direction)
            lam = m.multiplier(direction)
            if not np.isfinite(lam) or m.monodromy.log_scale:
                continue
            res = np.linalg.norm(W @ v - lam * v)
            assert res <= 1e-8 * np.linalg.norm(W) * np.linalg.norm(v), m.n


def test_floquet_relation_random_heights(mathieu_modes):
    rng = np.random.default_rng(7)
    for m in mathieu_modes:
        if abs(m.n) > 3:
            continue
        for direction in (DOWN, UP):
            x = rng.uniform(-6.0, 6.0, 100)
            u0, _ = m.evaluate(direction, x)
            u1, _ = m.evaluate(direction, x + TWO_PI)
            lam = m.multiplier(direction)
            assert np.all(np.abs(u1 - lam * u0) <= 1e-8 * np.abs(u1) + 1e-14), (m.n, direction)


def test_growth_bound_and_monotone_exponents():
    k, theta = 0.9, 0.25
    q = MATHIEU
    modes = build_modes(q, k, theta, TWO_PI, (-40, 40))
    by_n = {m.n: m for m in modes}
    for m in modes:
        if m.alpha_n ** 2 > k * k * q.q_max:
            assert m.case is CaseTag.A
    threshold = (k * k * (q.q_max - q.q_min) - 2 * k * math.sin(theta) - 1) / 2
    start = max(1, math.floor(threshold) + 1)
    for n in range(start, 40):
        assert by_n[n].mu1.real < by_n[n + 1].mu1.real
        assert by_n[-n].mu1.real < by_n[-n - 1].mu1.real
    for n in (40, -40):
        ratio = by_n[n].log_abs_lambda1 / (TWO_PI * abs(n))
        assert abs(ratio - 1.0) <= 0.01


def test_upward_tail_decay_constant_bounded():
    d = 0.6
    xs = d + np.linspace(0.0, 3 * TWO_PI, 120)
    consts = []
    for m in build_modes(MATHIEU, 0.9, 0.25, TWO_PI, (2, 20)):
        u, _ = m.evaluate(UP, xs)
        ratio = np.abs(u / u[0]) * np.exp(m.mu1.real * (xs - d))
        consts.append(ratio.max())
    consts = np.array(consts)
    assert np.all(consts < 3.0)
    assert consts[-1] <= consts[0] * 1.01
