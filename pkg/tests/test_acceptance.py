"""Acceptance criteria 1-14, one marked group per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
PASS/FAIL per criterion.
"""

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import oracles
from floquet_dtn.band_spectra import band_edges, check_interlacing, smallk_fit
from floquet_dtn.cell_solver import (
    CellMedium,
    build_mesh,
    l2_error,
    solve_cell,
    solve_laterally_invariant,
)
from floquet_dtn.cli_io import execute, parse_config
from floquet_dtn.dtn_ops import (
    boundedness_report,
    classical_dtn,
    downward_dtn,
    smallest_split_index,
    split,
    substrate_dtn,
    upward_dtn,
)
from floquet_dtn.errors import AssumptionAViolated
from floquet_dtn.floquet_modes import CaseTag, Direction, build_modes, classify
from floquet_dtn.hill_core import monodromy
from floquet_dtn.profiles import RefractiveProfile

TWO_PI = 2 * math.pi
ROOT = Path(__file__).resolve().parents[1]
criterion = pytest.mark.criterion


def battery():
    return {
        "constant": RefractiveProfile.constant(1.3),
        "cosine": RefractiveProfile.cosine(1.0, 0.3),
        "piecewise": RefractiveProfile.piecewise([2.0, 4.0], [1.0, 1.6, 1.2]),
        "tabulated": RefractiveProfile.tabulated(1.2 + 0.25 * np.sin(np.linspace(0, TWO_PI, 32, endpoint=False))),
    }


def random_profile(rng):
    kind = rng.integers(4)
    if kind == 0:
        return RefractiveProfile.constant(rng.uniform(0.5, 2.0))
    if kind == 1:
        mean = rng.uniform(0.8, 2.0)
        return RefractiveProfile.cosine(mean, rng.uniform(-0.6, 0.6) * mean)
    if kind == 2:
        m = int(rng.integers(1, 4))
        bps = np.sort(rng.uniform(0.3, TWO_PI - 0.3, m))
        bps = bps[np.concatenate([[True], np.diff(bps) > 0.1])]
        return RefractiveProfile.piecewise(bps, rng.uniform(0.5, 2.0, len(bps) + 1))
    return RefractiveProfile.tabulated(rng.uniform(0.5, 2.0, int(rng.integers(4, 40))))


# exact sin values keep grazing orders exactly at beta = 0
EXACT_SIN = {0.0: 0.0, math.pi / 6: 0.5, -math.pi / 6: -0.5, math.pi / 3: math.sqrt(3) / 2, -math.pi / 3: -math.sqrt(3) / 2}
HOMOGENEOUS_K = (0.25, 0.5, 1.0, 2.0)


def exact_beta(k, theta, n):
    a = k * EXACT_SIN[theta] + n
    disc = k * k - a * a
    return complex(math.sqrt(disc)) if disc >= 0 else 1j * math.sqrt(-disc)


def expected_tag(beta):
    if beta.imag > 0:
        return CaseTag.A
    if beta.real == 0:
        return CaseTag.D_II
    twice = Fraction(2 * beta.real).limit_denominator(1000)
    if twice.denominator == 1 and abs(float(twice) - 2 * beta.real) < 1e-12:
        # beta half-integer: W = +-I
        return CaseTag.D_I if twice.numerator % 2 == 0 else CaseTag.E_I
    return CaseTag.C


@pytest.fixture(scope="module")
def homogeneous_modes():
    out = []
    for k in HOMOGENEOUS_K:
        for theta in EXACT_SIN:
            for m in build_modes(RefractiveProfile.constant(1.0), k, theta, TWO_PI, (-8, 8)):
                out.append((k, theta, m))
    return out


# -- 1 --------------------------------------------------------------------------

@criterion(1, "Wronskian/Liouville |det W - 1| <= 1e-9 over 50 random profiles and (k, alpha)")
def test_criterion_01_liouville():
    rng = np.random.default_rng(20261015)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        q = random_profile(rng)
        k = rng.uniform(0.1, 3.0)
        # oscillatory regime, where W has modest norm and det W - 1 is an absolute measure
        alpha = rng.uniform(-1.0, 1.0) * k * math.sqrt(q.q_min)
        worst = max(worst, monodromy(q, k, alpha).det_residual)
    elapsed = time.perf_counter() - start
    assert worst <= 1e-9
    assert elapsed <= 10.0


# -- 2 --------------------------------------------------------------------------

@criterion(2, "homogeneous closed forms: eta, case tags and DtN coefficients")
def test_criterion_02_homogeneous_eta_and_tags(homogeneous_modes):
    for k, theta, m in homogeneous_modes:
        beta = exact_beta(k, theta, m.n)
        exact = 2 * math.cos(TWO_PI * beta.real) if beta.imag == 0 else 2 * math.cosh(TWO_PI * beta.imag)
        assert abs(m.eta - exact) <= 1e-8 * max(1.0, abs(exact)), (k, theta, m.n)
        assert m.case is expected_tag(beta), (k, theta, m.n, m.case)


@criterion(2, "homogeneous closed forms: eta, case tags and DtN coefficients")
def test_criterion_02_homogeneous_dtn_coefficients(homogeneous_modes):
    checked = 0
    for k, theta, m in homogeneous_modes:
        if m.case.is_vector:
            continue
        beta = exact_beta(k, theta, m.n)
        want = 1j * beta  # i beta for propagating orders, -|beta| for evanescent ones
        down = -m.log_derivative(Direction.DOWNWARD, 0.37)
        up = m.log_derivative(Direction.UPWARD, 0.81)
        scale = max(1.0, abs(beta))
        assert abs(down - want) <= 1e-8 * scale, (k, theta, m.n)
        assert abs(up - want) <= 1e-8 * scale, (k, theta, m.n)
        checked += 1
    assert checked > 300


@criterion(2, "homogeneous closed forms: eta, case tags and DtN coefficients")
def test_criterion_02_operator_matches_rayleigh():
    # k = 0.8, theta = 0.3 avoids W = +-I for every order
    for builder, height in ((downward_dtn, 0.2), (upward_dtn, 1.1)):
        op = builder(RefractiveProfile.constant(1.0), 0.8, 0.3, TWO_PI, height, 8)
        ref = classical_dtn(0.8, 0.3, TWO_PI, 8).coeffs
        assert np.all(np.abs(op.coeffs - ref) <= 1e-8 * np.maximum(1.0, np.abs(ref)))


# -- 3 --------------------------------------------------------------------------

def check_exponent_laws(m):
    assert abs(m.lambda1 * m.lambda2 - 1) <= 1e-8
    total = m.mu1 + m.mu2
    assert min(abs(total), abs(total - 1j)) <= 1e-8
    for lam, mu in ((m.lambda1, m.mu1), (m.lambda2, m.mu2)):
        assert abs(np.exp(TWO_PI * mu) - lam) <= 1e-8 * abs(lam)


@criterion(3, "exponent laws lambda1 lambda2 = 1 and mu1 + mu2 in {0, i}")
def test_criterion_03_homogeneous(homogeneous_modes):
    for _, _, m in homogeneous_modes:
        check_exponent_laws(m)


@criterion(3, "exponent laws lambda1 lambda2 = 1 and mu1 + mu2 in {0, i}")
def test_criterion_03_mathieu_configurations():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = RefractiveProfile.cosine(1.0, rng.uniform(0.05, 0.5))
        k = rng.uniform(0.2, 2.0)
        theta = rng.uniform(-1.2, 1.2)
        for m in build_modes(q, k, theta, TWO_PI, (-8, 8)):
            check_exponent_laws(m)


# -- 4 --------------------------------------------------------------------------

@criterion(4, "comparison envelope cosh(2 pi beta+) <= w1(2 pi) <= cosh(2 pi beta-)")
def test_criterion_04_comparison_envelope():
    q = RefractiveProfile.cosine(1.0, 0.3)
    checked = 0
    for k in (0.5, 1.0, 1.7):
        for theta in (0.0, 0.3, -0.9):
            for m in build_modes(q, k, theta, TWO_PI, (-20, 20)):
                a2 = m.alpha_n ** 2
                if a2 <= k * k * q.q_max:
                    continue
                W, L = m.monodromy.W, m.monodromy.log_scale
                log_w1 = math.log(W[0, 0]) + L
                lo = TWO_PI * math.sqrt(a2 - k * k * q.q_max)
                hi = TWO_PI * math.sqrt(a2 - k * k * q.q_min)
                log_cosh = lambda x: x + math.log1p(math.exp(-2 * x)) - math.log(2)
                assert log_cosh(lo) <= log_w1 + 1e-10 and log_w1 <= log_cosh(hi) + 1e-10, (k, theta, m.n)
                checked += 1
    assert checked > 300


# -- 5 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def battery_maps():
    out = {}
    for name, q in battery().items():
        out[name] = (
            downward_dtn(q, 0.8, 0.3, TWO_PI, 0.37, 60),
            upward_dtn(q, 0.8, 0.3, TWO_PI, 0.37, 60),
        )
    return out


@criterion(5, "DtN boundedness <= 3 and large-n ratio within 1 +- 0.05")
def test_criterion_05_boundedness(battery_maps):
    for name, ops in battery_maps.items():
        for op in ops:
            rep = boundedness_report(op, fit_range=(40, 60))
            assert rep.max_value <= 3.0, name
            assert abs(rep.large_n_limit - 1.0) <= 0.05, (name, rep.large_n_limit)


# -- 6 --------------------------------------------------------------------------

@criterion(6, "sign split: negative tail beyond N_split and exact split-then-sum")
def test_criterion_06_sign_split(battery_maps):
    for name, (down, _) in battery_maps.items():
        n_split = smallest_split_index(down)
        tail, head = split(down, n_split)
        outside = np.abs(down.indices) > n_split
        assert np.all(down.coeffs.real[outside] < 0), name
        assert np.array_equal((tail + head).coeffs, down.coeffs)


@criterion(6, "sign split: negative tail beyond N_split and exact split-then-sum")
def test_criterion_06_split_inside_solver():
    q = RefractiveProfile.cosine(1.0, 0.3)
    k, theta = 0.8, 0.3
    mesh = build_mesh(TWO_PI, 0.0, 1.0, 32, 32)
    medium = CellMedium.layered([0.5], [1.5, 1.0])
    top = classical_dtn(k, theta, TWO_PI, 8, height=1.0)
    bottom = downward_dtn(q, k, theta, TWO_PI, 0.0, 8)
    tail, head = split(bottom, smallest_split_index(bottom))
    u1 = solve_cell(mesh, medium, k, theta, top, bottom, estimate_condition=False).field_hat
    u2 = solve_cell(mesh, medium, k, theta, top, tail + head, estimate_condition=False).field_hat
    assert np.max(np.abs(u1 - u2)) <= 1e-12 * np.max(np.abs(u1))


# -- 7 --------------------------------------------------------------------------

def uniform_solution(n):
    k, theta = 1.0, 0.0
    one = RefractiveProfile.constant(1.0)
    mesh = build_mesh(TWO_PI, 0.0, 1.0, n, n)
    top = classical_dtn(k, theta, TWO_PI, height=1.0)
    bottom = substrate_dtn(one, k, theta, TWO_PI, 0.0, top.N)
    sol = solve_cell(mesh, CellMedium.uniform(1.0), k, theta, top, bottom, estimate_condition=False)
    exact = lambda x1, x2: np.exp(-1j * k * x2)
    return l2_error(mesh, sol.field_hat, exact, 0.0)


@criterion(7, "uniform medium: L2 error <= 2e-3 on 64x64, refinement factor >= 3.5")
def test_criterion_07_uniform_medium():
    start = time.perf_counter()
    e64 = uniform_solution(64)
    elapsed = time.perf_counter() - start
    e128 = uniform_solution(128)
    assert e64 <= 2e-3
    assert e64 / e128 >= 3.5
    assert elapsed <= 30.0


# -- 8 --------------------------------------------------------------------------

@criterion(8, "Fresnel two-layer: e0 = 0.04 +- 5e-3, energy residual <= 5e-3")
@pytest.mark.parametrize("method", ["rayleigh", "floquet"])
def test_criterion_08_fresnel(method):
    c, k = 1.5, 0.9
    sub = RefractiveProfile.constant(c * c)
    mesh = build_mesh(TWO_PI, 0.0, 1.0, 128, 128)
    top = classical_dtn(k, 0.0, TWO_PI, height=1.0)
    bottom = substrate_dtn(sub, k, 0.0, TWO_PI, 0.0, top.N, method=method)
    sol = solve_cell(mesh, CellMedium.uniform(c * c), k, 0.0, top, bottom, estimate_condition=False)
    assert abs(sol.efficiencies[0] - oracles.fresnel_reflectance(c)) <= 5e-3
    assert abs(sol.efficiencies[0] - 0.04) <= 5e-3
    assert sol.energy_residual <= 5e-3


# -- 9 --------------------------------------------------------------------------

@criterion(9, "lateral invariance: FEM trace coefficients vs 1D mode problems to 1e-3")
def test_criterion_09_lateral_invariance():
    q = RefractiveProfile.cosine(1.0, 0.3)
    k, theta = 0.8, 0.3
    mesh = build_mesh(TWO_PI, 0.0, 1.0, 128, 128)
    top = classical_dtn(k, theta, TWO_PI, height=1.0)
    bottom = downward_dtn(q, k, theta, TWO_PI, 0.0, top.N)
    medium = CellMedium.uniform(1.0)
    sol = solve_cell(mesh, medium, k, theta, top, bottom, estimate_condition=False)
    ref = solve_laterally_invariant(medium, q, k, theta, TWO_PI, 0.0, 1.0, top.N, dtn_top=top, dtn_bottom=bottom)
    beta = top.coeffs / 1j
    prop = (beta.imag == 0) & (beta.real > 0)
    assert np.count_nonzero(prop) >= 2
    for fem, oracle in ((sol.top_coeffs, ref.top), (sol.bottom_coeffs, ref.bottom)):
        nonzero = prop & (np.abs(oracle) > 1e-12)
        zero = prop & ~nonzero
        # orders the incident wave cannot excite stay at zero relative to the excited ones
        assert np.all(np.abs(fem[nonzero] - oracle[nonzero]) <= 1e-3 * np.abs(oracle[nonzero]))
        assert np.all(np.abs(fem[zero]) <= 1e-3 * np.max(np.abs(oracle[prop])))


# -- 10 -------------------------------------------------------------------------

MATHIEU = RefractiveProfile.cosine(1.0, 0.3)


@criterion(10, "energy balance: real media residual <= 5e-3, lossy deficit = absorption to 5e-3")
@pytest.mark.parametrize("case", ["layered", "uniform", "homogeneous_substrate"])
def test_criterion_10_real_media(case):
    k, theta = 0.8, 0.3
    mesh = build_mesh(TWO_PI, 0.0, 1.0, 128, 128)
    q = RefractiveProfile.constant(1.44) if case == "homogeneous_substrate" else MATHIEU
    medium = CellMedium.uniform(1.0) if case == "uniform" else CellMedium.layered([0.5], [1.5, 1.0])
    top = classical_dtn(k, theta, TWO_PI, height=1.0)
    bottom = substrate_dtn(q, k, theta, TWO_PI, 0.0, top.N)
    sol = solve_cell(mesh, medium, k, theta, top, bottom, estimate_condition=False)
    assert sol.energy_residual <= 5e-3


@criterion(10, "energy balance: real media residual <= 5e-3, lossy deficit = absorption to 5e-3")
def test_criterion_10_lossy_cell():
    k, theta = 0.8, 0.3
    mesh = build_mesh(TWO_PI, 0.0, 1.0, 128, 128)
    medium = CellMedium.layered([0.5], [1.5 + 0.2j, 1.0])
    top = classical_dtn(k, theta, TWO_PI, height=1.0)
    bottom = substrate_dtn(MATHIEU, k, theta, TWO_PI, 0.0, top.N)
    sol = solve_cell(mesh, medium, k, theta, top, bottom, estimate_condition=False)
    deficit = 1.0 - sol.reflected - sol.transmitted
    assert sol.absorbed > 0
    assert abs(deficit - sol.absorbed) <= 5e-3 * sol.absorbed


# -- 11 -------------------------------------------------------------------------

@criterion(11, "band edges: constant closed form to 1e-7, Mathieu interlacing vs dense oracle")
def test_criterion_11_constant_bands():
    edges = band_edges(1.0, 0.0, 4.5)
    assert np.allclose(edges.lambda_edges, [0, 1, 1, 4, 4], rtol=0, atol=1e-7)
    assert np.allclose(edges.mu_edges, [0.25, 0.25, 2.25, 2.25], rtol=0, atol=1e-7)
    assert not check_interlacing(edges.lambda_edges, edges.mu_edges)


@criterion(11, "band edges: constant closed form to 1e-7, Mathieu interlacing vs dense oracle")
def test_criterion_11_mathieu_bands():
    shift = lambda x: 0.2 * np.cos(x)
    one = lambda x: np.ones_like(np.asarray(x, dtype=float))
    edges = band_edges(1.0, shift, 4.5, lambda_min=-1.0)
    lam, mu = edges.lambda_edges[:5], edges.mu_edges[:4]
    assert len(lam) == 5 and len(mu) == 4
    assert not check_interlacing(lam, mu)
    ref_lam, ref_mu = oracles.oracle_band_edges(one, shift, -1.0, 4.5, density=640)
    assert len(ref_lam) >= 5 and len(ref_mu) >= 4
    assert not check_interlacing(ref_lam[:5], ref_mu[:4])
    assert np.allclose(lam, ref_lam[:5], rtol=0, atol=1e-6)
    assert np.allclose(mu, ref_mu[:4], rtol=0, atol=1e-6)


# -- 12 -------------------------------------------------------------------------

@criterion(12, "small-k asymptotics: theta0 slope 1, v'/v slope 2, mu margin positive")
def test_criterion_12_theta0_slope():
    fit = smallk_fit(MATHIEU, 0.0, "theta0")
    assert abs(fit.slope - 1.0) <= 0.1


@criterion(12, "small-k asymptotics: theta0 slope 1, v'/v slope 2, mu margin positive")
def test_criterion_12_vlogderiv_slope():
    fit = smallk_fit(MATHIEU, 0.0, "vlogderiv", n=1)
    assert abs(fit.slope - 2.0) <= 0.2


@criterion(12, "small-k asymptotics: theta0 slope 1, v'/v slope 2, mu margin positive")
@pytest.mark.parametrize("name", list(battery()))
def test_criterion_12_mu_margin(name):
    q = battery()[name]
    for n in (1, 2, 3):
        fit = smallk_fit(q, 0.0, "mu_margin", n=n, k_samples=(0.1, 0.05, 0.01))
        assert fit.all_positive, (name, n, fit.values)


# -- 13 -------------------------------------------------------------------------

@criterion(13, "degenerate handling: E_i tag and AssumptionAViolated for q = 1, k = 1/2")
def test_criterion_13_degenerate():
    one = RefractiveProfile.constant(1.0)
    assert classify(monodromy(one, 0.5, 0.0)).case is CaseTag.E_I
    with pytest.raises(AssumptionAViolated) as info:
        downward_dtn(one, 0.5, 0.0, TWO_PI, 0.0, 4)
    assert 0 in info.value.indices


# -- 14 -------------------------------------------------------------------------

@criterion(14, "determinism: solve summaries identical across thread caps")
def test_criterion_14_determinism(tmp_path):
    cfg = parse_config(ROOT / "configs" / "mathieu.yaml")
    outputs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        execute("solve", cfg, out, threads=threads)
        data = json.loads((out / "summary.json").read_text())
        data.pop("timing")
        outputs.append(json.dumps(data, sort_keys=True, indent=2).encode())
    assert outputs[0] == outputs[1]
