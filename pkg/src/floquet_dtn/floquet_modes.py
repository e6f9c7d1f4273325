"""Floquet multipliers, case classification and upward/downward modes.

A Floquet solution is written as ``xi = c1*w1 + c2*w2`` where (c1, c2) is an
eigenvector of the monodromy matrix.  Downward modes are evaluated from the
forward fundamental solutions on [0, 2*pi) and upward modes from the backward
ones on (-2*pi, 0]; in both cases the selected mode is the dominant solution
of the integration direction, so no cancellation occurs even when the two
multipliers differ by hundreds of orders of magnitude.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DegenerateMultiplier, NearZeroDenominator, VectorModeRequested
from .hill_core import (
    DEFAULT_TOL,
    CoefficientFunction,
    FundamentalPair,
    MonodromyResult,
    integrate_hill,
    monodromy_from_pair,
)
from .profiles import TWO_PI, RefractiveProfile

DEFAULT_EPS_ETA = 1e-9
NEAR_DEGENERATE = 1e-5
DEFAULT_TOL_ZERO = 1e-10
REFINE_GAP = 1e-2
MIN_TOL = 1e-13


class CaseTag(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D_I = "D_i"
    D_II = "D_ii"
    E_I = "E_i"
    E_II = "E_ii"

    @property
    def is_vector(self) -> bool:
        return self in (CaseTag.D_I, CaseTag.E_I)


class Direction(str, Enum):
    UPWARD = "upward"
    DOWNWARD = "downward"


class CaseCRule(str, Enum):
    """How the downward branch is picked when |eta| < 2.

    ``FLUX``: the branch whose energy flux Im(conj(u) u') is negative.
    ``EXPONENT``: the branch with multiplier exp(-2*pi*i*theta), theta in (0, 1/2).
    """

    FLUX = "flux"
    EXPONENT = "exponent"


def multipliers(eta: float) -> tuple[complex, complex]:
    """Roots of lam^2 - eta*lam + 1 = 0 with |lam1| >= |lam2|.

    For |eta| < 2 the root in the upper half plane is returned first.
    """
    eta = float(eta)
    if abs(eta) > 2.0:
        lam1 = 0.5 * (eta + math.copysign(math.sqrt(eta * eta - 4.0), eta))
        return complex(lam1), complex(1.0 / lam1)
    if abs(eta) == 2.0:
        return complex(eta / 2.0), complex(eta / 2.0)
    im = math.sqrt(1.0 - 0.25 * eta * eta)
    return complex(0.5 * eta, im), complex(0.5 * eta, -im)


def _normalize_exponent(mu: complex) -> complex:
    im = mu.imag
    im = im - math.floor(im + 0.5)
    if im <= -0.5 + 1e-15:
        im += 1.0
    return complex(mu.real, im)


def exponents(lambda1: complex, lambda2: complex) -> tuple[complex, complex]:
    """mu_j = log(lam_j) / (2*pi) with Im mu_j in (-1/2, 1/2]."""
    out = []
    for lam in (lambda1, lambda2):
        if lam == 0:
            raise DegenerateMultiplier("characteristic multiplier is zero")
        out.append(_normalize_exponent(np.log(complex(lam)) / TWO_PI))
    return out[0], out[1]


def _log_abs_lambda1(eta_stored: float, log_scale: float) -> float:
    """log|lam1| for |eta| > 2, with eta = eta_stored * exp(log_scale)."""
    log_abs_eta = math.log(abs(eta_stored)) + log_scale
    if log_abs_eta > 30.0:
        return log_abs_eta
    eta = abs(eta_stored) * math.exp(log_scale)
    return math.log(0.5 * (eta + math.sqrt(eta * eta - 4.0)))


def _eigvec(W: np.ndarray, lam_scaled: complex) -> Optional[np.ndarray]:
    """Eigenvector of 2x2 W for eigenvalue lam_scaled, normalized."""
    va = np.array([W[0, 1], lam_scaled - W[0, 0]], dtype=complex)
    vb = np.array([lam_scaled - W[1, 1], W[1, 0]], dtype=complex)
    v = va if np.linalg.norm(va) >= np.linalg.norm(vb) else vb
    big = np.max(np.abs(v))
    if big == 0.0 or big <= 1e-13 * max(1.0, np.max(np.abs(W))):
        return None
    return _normalize_vector(v)


def _normalize_vector(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    v = v / v[np.argmax(np.abs(v))]
    if abs(v[0]) > 1e-12 * abs(v[1]):
        v = v / v[0]
    return v


@dataclass(frozen=True)
class ModeEvaluation:
    u: complex
    du: complex
    x2: float
    direction: Direction


@dataclass(frozen=True)
class FloquetMode:
    """Classified Floquet data of one Fourier mode.

    ``lambda1``/``lambda2`` and ``mu1``/``mu2`` follow the ordering
    |lam1| >= |lam2| (upper-half-plane root first when |eta| < 2).  For very
    large |eta| the multipliers may overflow to inf/0 while ``log_abs_lambda1``
    stays finite.  ``down_index`` says which multiplier (1 or 2) the downward
    mode uses; the upward mode uses the other one (or the same one in the
    rank-one degenerate cases).
    """

    n: int
    alpha_n: float
    k: float
    eta: float
    case: CaseTag
    lambda1: complex
    lambda2: complex
    mu1: complex
    mu2: complex
    eigvec1: Optional[np.ndarray]
    eigvec2: Optional[np.ndarray]
    theta_n: Optional[float]
    log_abs_lambda1: float
    eta_tolerance: float
    monodromy: MonodromyResult = field(repr=False)
    down_index: int = 1
    tol: float = DEFAULT_TOL
    warnings: tuple[str, ...] = ()

    @property
    def forward(self) -> FundamentalPair:
        return self.monodromy.pair

    @cached_property
    def backward(self) -> FundamentalPair:
        """Fundamental solutions integrated from 0 down to -2*pi."""
        return integrate_hill(self.forward.coef, self.tol, x_end=-TWO_PI)

    @property
    def up_index(self) -> int:
        if self.case in (CaseTag.D_II, CaseTag.E_II):
            return self.down_index
        return 3 - self.down_index

    def _log_multiplier(self, index: int) -> complex:
        mu = self.mu1 if index == 1 else self.mu2
        return TWO_PI * mu

    def multiplier(self, direction: Direction) -> complex:
        index = self.down_index if Direction(direction) is Direction.DOWNWARD else self.up_index
        return self.lambda1 if index == 1 else self.lambda2

    def exponent(self, direction: Direction) -> complex:
        index = self.down_index if Direction(direction) is Direction.DOWNWARD else self.up_index
        return self.mu1 if index == 1 else self.mu2

    @cached_property
    def _up_vector(self) -> np.ndarray:
        if self.case in (CaseTag.A, CaseTag.B):
            # recessive forward = dominant backward: take it from the backward monodromy
            back = monodromy_from_pair(self.backward)
            lam = complex(math.copysign(1.0, self.eta) * math.exp(self.log_abs_lambda1 - back.log_scale))
            vec = _eigvec(back.W, lam)
            if vec is not None:
                return vec
        return self.eigvec1 if self.up_index == 1 else self.eigvec2

    def vector(self, direction: Direction) -> np.ndarray:
        if self.case.is_vector:
            raise VectorModeRequested(
                f"mode n={self.n} has a two-dimensional solution space ({self.case.value})"
            )
        if Direction(direction) is Direction.UPWARD:
            return self._up_vector
        return self.eigvec1 if self.down_index == 1 else self.eigvec2

    def flux(self, direction: Direction) -> float:
        """Im(conj(u) u') of the normalized mode (constant in x2)."""
        c = self.vector(direction)
        return float(np.imag(np.conj(c[0]) * c[1]))

    def _table(self, direction: Direction):
        if Direction(direction) is Direction.UPWARD:
            return self.backward, -1
        return self.forward, 1

    def _reduce(self, direction: Direction, x2: np.ndarray):
        if Direction(direction) is Direction.UPWARD:
            shifts = np.ceil(x2 / TWO_PI)
            xr = np.minimum(x2 - TWO_PI * shifts, 0.0)
        else:
            shifts = np.floor(x2 / TWO_PI)
            xr = np.maximum(x2 - TWO_PI * shifts, 0.0)
        return shifts, xr

    def _xi(self, direction: Direction, xr: np.ndarray):
        pair, _ = self._table(direction)
        c = self.vector(direction)
        mats, logs = pair.evaluate(xr)
        xi = mats[0, :, 0, 0] * c[0] + mats[0, :, 0, 1] * c[1]
        dxi = mats[0, :, 1, 0] * c[0] + mats[0, :, 1, 1] * c[1]
        return xi, dxi, logs[0]

    def evaluate(self, direction: Direction, x2):
        """(u, du) of the selected mode at heights x2 (array)."""
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        direction = Direction(direction)
        c_index = self.down_index if direction is Direction.DOWNWARD else self.up_index
        shifts, xr = self._reduce(direction, x2)
        xi, dxi, logs = self._xi(direction, xr)
        factor = np.exp(shifts * self._log_multiplier(c_index) + logs)
        return factor * xi, factor * dxi

    def log_derivative(self, direction: Direction, x2, tol_zero: float = DEFAULT_TOL_ZERO):
        x2_arr = np.atleast_1d(np.asarray(x2, dtype=float))
        _, xr = self._reduce(Direction(direction), x2_arr)
        xi, dxi, _ = self._xi(direction, xr)
        omega = max(1.0, math.sqrt(self.alpha_n ** 2 + self.k ** 2))
        scale = np.sqrt(np.abs(xi) ** 2 + (np.abs(dxi) / omega) ** 2)
        bad = np.abs(xi) <= tol_zero * scale
        if np.any(bad):
            raise NearZeroDenominator(self.n, float(x2_arr[np.argmax(bad)]))
        out = dxi / xi
        return complex(out[0]) if np.ndim(x2) == 0 else out

    @property
    def near_degenerate(self) -> bool:
        if not np.isfinite(self.eta):
            return False
        gap = min(abs(self.eta - 2.0), abs(self.eta + 2.0))
        return self.eta_tolerance < gap < NEAR_DEGENERATE


def classify(
    m: MonodromyResult,
    eps_eta: float = DEFAULT_EPS_ETA,
    *,
    n: int = 0,
    case_c_rule: CaseCRule = CaseCRule.FLUX,
    tol: float = DEFAULT_TOL,
) -> FloquetMode:
    """Classify a mode from its monodromy matrix and build its eigenvectors."""
    if not (0.0 < eps_eta <= 1e-4):
        raise ValueError("eps_eta must lie in (0, 1e-4]")
    W, L = m.W, m.log_scale
    eta = m.eta_value
    warnings = []
    theta = None
    down_index = 1
    vec1 = vec2 = None
    if L == 0.0 and abs(eta - 2.0) <= eps_eta or L == 0.0 and abs(eta + 2.0) <= eps_eta:
        sign = 1.0 if eta > 0 else -1.0
        off = max(abs(W[0, 1]), abs(W[1, 0]))
        if sign > 0:
            case = CaseTag.D_I if off <= eps_eta else CaseTag.D_II
        else:
            case = CaseTag.E_I if off <= eps_eta else CaseTag.E_II
        lam1 = lam2 = complex(sign)
        mu1 = mu2 = complex(0.0, 0.0 if sign > 0 else 0.5)
        log_abs = 0.0
        if not case.is_vector:
            vec1 = vec2 = _eigvec(W, complex(sign))
            if case is CaseTag.E_II:
                warnings.append(
                    f"mode n={n} is E_ii: a single bounded mode serves both directions"
                )
            else:
                warnings.append(
                    f"mode n={n} is D_ii: a single bounded mode serves both directions"
                )
    elif L > 0.0 or abs(eta) > 2.0:
        case = CaseTag.A if m.eta > 0 else CaseTag.B
        sign = 1.0 if case is CaseTag.A else -1.0
        log_abs = _log_abs_lambda1(m.eta, L)
        lam1 = complex(sign * math.exp(log_abs) if log_abs < 709.0 else sign * math.inf)
        lam2 = complex(sign * math.exp(-log_abs))
        half = 0.5 if case is CaseTag.B else 0.0
        mu1 = complex(log_abs / TWO_PI, half)
        mu2 = complex(-log_abs / TWO_PI, half)
        vec1 = _eigvec(W, complex(sign * math.exp(log_abs - L)))
        vec2 = _eigvec(W, complex(sign * math.exp(-log_abs - L)))
    else:
        case = CaseTag.C
        lam1, lam2 = multipliers(eta)
        mu1, mu2 = exponents(lam1, lam2)
        theta = mu1.imag
        log_abs = 0.0
        vec1 = _eigvec(W, lam1)
        vec2 = _eigvec(W, lam2)
        if case_c_rule is CaseCRule.EXPONENT:
            down_index = 2
        else:
            flux1 = float(np.imag(np.conj(vec1[0]) * vec1[1]))
            down_index = 1 if flux1 < 0 else 2
    gap = min(abs(eta - 2.0), abs(eta + 2.0)) if np.isfinite(eta) else math.inf
    if eps_eta < gap < NEAR_DEGENERATE:
        warnings.append(f"mode n={n} is nearly degenerate: |eta -+ 2| = {gap:.3e}")
    return FloquetMode(
        n=n,
        alpha_n=m.alpha,
        k=m.k,
        eta=eta,
        case=case,
        lambda1=lam1,
        lambda2=lam2,
        mu1=mu1,
        mu2=mu2,
        eigvec1=vec1,
        eigvec2=vec2,
        theta_n=theta,
        log_abs_lambda1=log_abs,
        eta_tolerance=eps_eta,
        monodromy=m,
        down_index=down_index,
        tol=tol,
        warnings=tuple(warnings),
    )


def alpha_n(k: float, theta: float, p: float, n) -> np.ndarray:
    return k * math.sin(theta) + (TWO_PI / p) * np.asarray(n)


def build_mode(
    q: RefractiveProfile,
    k: float,
    theta: float,
    p: float,
    n: int,
    *,
    tol: float = DEFAULT_TOL,
    eps_eta: float = DEFAULT_EPS_ETA,
    case_c_rule: CaseCRule = CaseCRule.FLUX,
) -> FloquetMode:
    a = float(alpha_n(k, theta, p, n))
    coef = CoefficientFunction.scattering(q, k, a)
    pair = integrate_hill(coef, tol)
    m = monodromy_from_pair(pair, k, a)
    # eigenvectors lose about 1/|lambda1 - lambda2| digits near eta = +-2, so
    # tighten the integration there
    gap = abs(abs(m.eta_value) - 2.0) if m.log_scale == 0.0 else np.inf
    if not pair.exact and eps_eta < gap < REFINE_GAP and tol > MIN_TOL:
        tol = max(MIN_TOL, tol * gap / REFINE_GAP)
        pair = integrate_hill(coef, tol)
        m = monodromy_from_pair(pair, k, a)
    return classify(m, eps_eta, n=n, case_c_rule=case_c_rule, tol=tol)


def _indices(n_range) -> list[int]:
    if isinstance(n_range, tuple) and len(n_range) == 2:
        return list(range(int(n_range[0]), int(n_range[1]) + 1))
    return [int(n) for n in n_range]


def build_modes(
    q: RefractiveProfile,
    k: float,
    theta: float,
    p: float,
    n_range,
    *,
    tol: float = DEFAULT_TOL,
    eps_eta: float = DEFAULT_EPS_ETA,
    case_c_rule: CaseCRule = CaseCRule.FLUX,
    threads: int = 1,
) -> list[FloquetMode]:
    """One classified mode per Fourier index in ``n_range`` (inclusive pair or iterable)."""
    if not k > 0:
        raise ValueError("k must be positive")
    if not p > 0:
        raise ValueError("p must be positive")
    if not -math.pi / 2 < theta < math.pi / 2:
        raise ValueError("theta must lie in (-pi/2, pi/2)")
    ns = _indices(n_range)

    def one(n):
        return build_mode(q, k, theta, p, n, tol=tol, eps_eta=eps_eta, case_c_rule=case_c_rule)

    if threads <= 1 or len(ns) < 2:
        return [one(n) for n in ns]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, ns))


def eval_mode(mode: FloquetMode, direction: Direction, x2: float) -> ModeEvaluation:
    """Value and x2-derivative of u_n^+ (upward) or u_n^- (downward) at x2."""
    u, du = mode.evaluate(direction, x2)
    return ModeEvaluation(complex(u[0]), complex(du[0]), float(x2), Direction(direction))


def log_derivative(mode: FloquetMode, direction: Direction, x2: float, tol_zero: float = DEFAULT_TOL_ZERO) -> complex:
    """u'/u of the selected mode; Floquet prefactors cancel."""
    return mode.log_derivative(direction, x2, tol_zero)
