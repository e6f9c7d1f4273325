"""Band edges of y'' + (lam*s - qshift) y = 0 and small-k asymptotic diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import HypothesisViolated, ObservableUndefined, WeightNotPositive
from .floquet_modes import CaseTag, Direction, build_mode
from .hill_core import _as_function, _weight_floor, eta_of_lambda
from .profiles import TWO_PI, RefractiveProfile

BAND_TOL = 1e-12
TANGENCY_TOL = 1e-7
NEAR_EDGE = 0.1
DEGENERATE_ZERO = 1e-12


@dataclass(frozen=True)
class BandEdges:
    """Periodic (eta = 2) and semi-periodic (eta = -2) eigenvalues in a scan window.

    Double roots appear twice in the edge arrays; ``*_multiplicity`` lists the
    multiplicity of each distinct root in order.
    """

    lambda_edges: np.ndarray
    mu_edges: np.ndarray
    lambda_multiplicity: tuple[int, ...]
    mu_multiplicity: tuple[int, ...]
    scan_range: tuple[float, float]
    samples: np.ndarray
    eta: np.ndarray

    def to_dict(self) -> dict:
        return {
            "lambda_edges": self.lambda_edges.tolist(),
            "mu_edges": self.mu_edges.tolist(),
            "lambda_multiplicity": list(self.lambda_multiplicity),
            "mu_multiplicity": list(self.mu_multiplicity),
            "scan_range": list(self.scan_range),
        }

    def interlacing(self, tol: float = 1e-9) -> list[str]:
        """Violations of lam0 < mu0 <= mu1 < lam1 <= lam2 < mu2 <= mu3 < ... (empty when it holds)."""
        return check_interlacing(self.lambda_edges, self.mu_edges, tol)


def merged_sequence(lambda_edges, mu_edges) -> list[tuple[str, float]]:
    """Edges in the canonical order lam0, mu0, mu1, lam1, lam2, mu2, mu3, lam3, ..."""
    lam, mu = list(lambda_edges), list(mu_edges)
    out = [("lambda", lam[0])] if lam else []
    i, j = 1, 0
    while i < len(lam) or j < len(mu):
        out.extend(("mu", v) for v in mu[j:j + 2])
        out.extend(("lambda", v) for v in lam[i:i + 2])
        i += 2
        j += 2
    return out


def check_interlacing(lambda_edges, mu_edges, tol: float = 1e-9) -> list[str]:
    """Strict inequality between edges of different kind, weak (up to tol) between equal kinds."""
    seq = merged_sequence(lambda_edges, mu_edges)
    problems = []
    for (ka, va), (kb, vb) in zip(seq, seq[1:]):
        if ka != kb and not vb > va:
            problems.append(f"{ka}={va:.12g} should be < {kb}={vb:.12g}")
        elif ka == kb and vb < va - tol:
            problems.append(f"{ka}={va:.12g} should be <= {kb}={vb:.12g}")
    return problems


def _default_lambda_min(s, qshift) -> float:
    x = np.linspace(0.0, TWO_PI, 2049)
    ratio = _as_function(qshift)(x) / _as_function(s)(x)
    return math.floor(float(np.min(ratio))) - 1.0


def _scan_grid(s, qshift, lo, hi, density, tol):
    n = max(8, int(math.ceil((hi - lo) * density)))
    lam = np.linspace(lo, hi, n + 1)
    eta = eta_of_lambda(s, qshift, lam, tol)
    near = np.minimum(np.abs(eta - 2.0), np.abs(eta + 2.0)) < NEAR_EDGE
    flag = near[:-1] | near[1:]
    if np.any(flag):
        a = lam[:-1][flag]
        h = np.diff(lam)[flag]
        extra = (a[:, None] + h[:, None] * np.array([0.25, 0.5, 0.75])[None, :]).ravel()
        lam = np.sort(np.concatenate([lam, extra]))
    eta, deta = eta_of_lambda(s, qshift, lam, tol, with_derivative=True)
    return lam, eta, deta


def band_edges(
    s,
    qshift,
    lambda_max: float,
    grid_density: float = 64.0,
    tol_root: float = 1e-12,
    *,
    lambda_min: float | None = None,
    tol: float = BAND_TOL,
    tangency_tol: float = TANGENCY_TOL,
) -> BandEdges:
    """Roots of eta(lam) = +-2 on [lambda_min, lambda_max].

    Local extrema of eta (roots of deta/dlam) split the scan into monotone
    pieces. An extremum within ``tangency_tol`` of +-2 counts as a double
    root; every other sign change of eta -+ 2 is a simple root refined by
    Brent's method.
    """
    if _weight_floor(s) <= 0.0:
        raise WeightNotPositive("weight s must be positive on [0, 2*pi]")
    lo = _default_lambda_min(s, qshift) if lambda_min is None else float(lambda_min)
    hi = float(lambda_max)
    if not hi > lo:
        raise ValueError("lambda_max must exceed lambda_min")
    lam, eta, deta = _scan_grid(s, qshift, lo, hi, grid_density, tol)

    eta_at = lambda x: float(eta_of_lambda(s, qshift, x, tol))
    deta_at = lambda x: float(eta_of_lambda(s, qshift, x, tol, with_derivative=True)[1])

    knots_x = list(lam)
    knots_v = list(eta)
    extrema = []
    for i in np.nonzero(np.sign(deta[:-1]) * np.sign(deta[1:]) < 0)[0]:
        xe = brentq(deta_at, lam[i], lam[i + 1], xtol=tol_root, rtol=4 * np.finfo(float).eps)
        extrema.append((xe, eta_at(xe)))
    for xe, ve in extrema:
        knots_x.append(xe)
        knots_v.append(ve)
    order = np.argsort(knots_x)
    kx = np.asarray(knots_x)[order]
    kv = np.asarray(knots_v)[order]

    found = {}
    for target in (2.0, -2.0):
        roots = []
        g = kv - target
        for xe, ve in extrema:
            if abs(ve - target) <= tangency_tol:
                roots.append((xe, 2))
                g[kx == xe] = 0.0
        for i in range(len(kx) - 1):
            ga, gb = g[i], g[i + 1]
            if ga * gb < 0:
                r = brentq(lambda x: eta_at(x) - target, kx[i], kx[i + 1], xtol=tol_root,
                           rtol=4 * np.finfo(float).eps)
                roots.append((r, 1))
            elif ga == 0.0 and gb != 0.0 and not any(kx[i] == xe for xe, _ in extrema):
                roots.append((kx[i], 1))
        roots.sort()
        found[target] = roots

    def expand(roots):
        edges = [x for x, m in roots for _ in range(m)]
        return np.asarray(edges, dtype=float), tuple(m for _, m in roots)

    lam_e, lam_m = expand(found[2.0])
    mu_e, mu_m = expand(found[-2.0])
    return BandEdges(lam_e, mu_e, lam_m, mu_m, (lo, hi), lam, eta)


def range_check(s, qshift, edges: BandEdges, tol: float = BAND_TOL) -> list[str]:
    """Spot-check eta > 2 below lam0 and inside periodic gaps, eta < -2 inside semi-periodic gaps."""
    problems = []
    lam, mu = edges.lambda_edges, edges.mu_edges
    probes = []
    if len(lam):
        probes.append((lam[0] - 0.5, 2.0, "below lambda_0"))
    for m in range(1, len(lam) - 1, 2):
        if lam[m + 1] > lam[m]:
            probes.append((0.5 * (lam[m] + lam[m + 1]), 2.0, f"(lambda_{m}, lambda_{m + 1})"))
    for m in range(0, len(mu) - 1, 2):
        if mu[m + 1] > mu[m]:
            probes.append((0.5 * (mu[m] + mu[m + 1]), -2.0, f"(mu_{m}, mu_{m + 1})"))
    for x, sign, label in probes:
        e = float(eta_of_lambda(s, qshift, x, tol))
        if (sign > 0 and not e > 2.0) or (sign < 0 and not e < -2.0):
            problems.append(f"eta={e:.12g} at {label}, midpoint {x:.12g}")
    return problems


@dataclass(frozen=True)
class PeriodicCheck:
    eta_at_zero: float
    eta_small: float
    deta_at_zero: float
    lambda_small: float
    passed: bool


def first_periodic_eigenvalue_check(
    q: RefractiveProfile, theta: float, lambda_small: float = 0.01, tol: float = BAND_TOL
) -> PeriodicCheck:
    """eta(0) = 2 and |eta(lambda_small)| < 2 for weight q - sin^2(theta), no shift."""
    shift = math.sin(theta) ** 2
    if q.q_min <= shift:
        raise HypothesisViolated(f"need min q > sin^2(theta) = {shift:g}, got {q.q_min:g}")
    weight = q.shifted(-shift)
    eta0, d0 = eta_of_lambda(weight, 0.0, 0.0, tol, with_derivative=True)
    eta_s = float(eta_of_lambda(weight, 0.0, lambda_small, tol))
    passed = abs(eta0 - 2.0) <= 1e-9 and -2.0 < eta_s < 2.0 and d0 < 0
    return PeriodicCheck(float(eta0), eta_s, float(d0), lambda_small, bool(passed))


OBSERVABLES = ("theta0", "vlogderiv", "mu_margin")


@dataclass(frozen=True)
class AsymptoticFit:
    observable: str
    n: int
    k_samples: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    degenerate_zero: bool
    all_positive: bool

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "n": self.n,
            "k_samples": self.k_samples.tolist(),
            "values": self.values.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "degenerate_zero": self.degenerate_zero,
            "all_positive": self.all_positive,
        }


def _loglog_fit(k, v):
    x, y = np.log(k), np.log(v)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, icpt])
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(slope), float(icpt), float(r2)


def _observable(q, k, theta, p, n, observable, b):
    mode = build_mode(q, k, theta, p, n)
    if observable == "theta0":
        if mode.case is not CaseTag.C:
            raise ObservableUndefined(f"theta_0 needs case C, mode n={n} at k={k} is case {mode.case.value}")
        return math.acos(max(-1.0, min(1.0, mode.eta / 2.0))) / TWO_PI
    if mode.case not in (CaseTag.A, CaseTag.B):
        raise ObservableUndefined(f"mode n={n} at k={k} is case {mode.case.value}; need a real exponent")
    mu1 = mode.mu1.real
    if observable == "mu_margin":
        return mu1 - (abs(n) - math.log(2.0) / TWO_PI)
    # u = exp(mu1 x) v with u the growing mode, so v'/v = u'/u - mu1
    r = mode.log_derivative(Direction.DOWNWARD, b)
    return abs(complex(r).real - mu1) if abs(complex(r).imag) < 1e-12 else abs(complex(r) - mu1)


def smallk_fit(
    q: RefractiveProfile,
    theta: float,
    observable: str,
    n: int = 0,
    k_samples: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    *,
    b: float = 1.0,
    p: float = TWO_PI,
) -> AsymptoticFit:
    """Evaluate an observable at decreasing k and fit its log-log slope.

    Observables: ``theta0`` (arccos(eta_0/2)/(2 pi), n = 0, case C),
    ``vlogderiv`` (|v'/v| at ``b`` for the periodic factor v of the growing
    mode u = exp(mu_1 x) v), ``mu_margin`` (mu_1 - |n| + ln 2/(2 pi)). The fit
    uses the four smallest k. Values at or below 1e-12 are reported as a
    degenerate zero and no slope is fitted.
    """
    if observable not in OBSERVABLES:
        raise ValueError(f"unknown observable {observable!r}; choose from {OBSERVABLES}")
    ks = np.asarray(k_samples, dtype=float)
    if ks.size < 2 or np.any(np.diff(ks) >= 0):
        raise ValueError("k_samples must be strictly decreasing")
    if np.any(ks <= 0) or np.any(ks > 0.5):
        raise ValueError("k_samples must lie in (0, 0.5]")
    if observable == "theta0" and n != 0:
        raise ValueError("theta0 is defined for n = 0")
    vals = np.array([_observable(q, float(k), theta, p, n, observable, b) for k in ks])
    if not np.all(np.isfinite(vals)):
        raise ObservableUndefined("observable is not finite at every sample")
    all_pos = bool(np.all(vals > 0))
    degenerate = bool(np.all(np.abs(vals) <= DEGENERATE_ZERO))
    slope = icpt = r2 = float("nan")
    if observable != "mu_margin" and not degenerate:
        sel = np.argsort(ks)[:4]
        sel = sel[np.abs(vals[sel]) > DEGENERATE_ZERO]
        if sel.size >= 2:
            slope, icpt, r2 = _loglog_fit(ks[sel], np.abs(vals[sel]))
    return AsymptoticFit(observable, int(n), ks, vals, slope, icpt, r2, degenerate, all_pos)
