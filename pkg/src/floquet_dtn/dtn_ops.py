"""Dirichlet-to-Neumann operators as diagonal Fourier symbols.

Traces are stored as coefficient arrays over n = -N..N of
f(x1) = sum_n f_n exp(i alpha_n x1), alpha_n = k sin(theta) + 2*pi*n/p.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import AssumptionAViolated, IndexMismatch, NearZeroDenominator, SplitIndexTooSmall
from .floquet_modes import (
    DEFAULT_EPS_ETA,
    DEFAULT_TOL_ZERO,
    CaseCRule,
    Direction,
    FloquetMode,
    build_mode,
)
from .hill_core import DEFAULT_TOL
from .profiles import TWO_PI, RefractiveProfile

SCHEMA_VERSION = 1
ASYMPTOTIC_FROM = 200
EPS_PROBE = 1e-6


class DtNKind(str, Enum):
    CLASSICAL_UP = "classical_up"
    CLASSICAL_DOWN = "classical_down"
    GENERALIZED_UP = "generalized_up"
    GENERALIZED_DOWN = "generalized_down"


def default_truncation(k: float, p: float) -> int:
    return 2 * math.ceil(k * p / TWO_PI) + 16


def alphas(k: float, theta: float, p: float, N: int) -> np.ndarray:
    return k * math.sin(theta) + (TWO_PI / p) * np.arange(-N, N + 1)


def rayleigh_betas(k: float, theta: float, p: float, N: int, q_value: float = 1.0) -> np.ndarray:
    """beta_n = sqrt(k^2 q - alpha_n^2), taken as i*sqrt(alpha_n^2 - k^2 q) when negative."""
    disc = k * k * q_value - alphas(k, theta, p, N) ** 2
    return np.where(disc >= 0, np.sqrt(np.abs(disc)) + 0j, 1j * np.sqrt(np.abs(disc)))


@dataclass(frozen=True)
class FourierTrace:
    alpha_hat: float
    p: float
    coeffs: np.ndarray

    @property
    def N(self) -> int:
        return (len(self.coeffs) - 1) // 2

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.N, self.N + 1)

    @property
    def alphas(self) -> np.ndarray:
        return self.alpha_hat + (TWO_PI / self.p) * self.indices

    def norm(self, order: float = 0.5) -> float:
        """Weighted norm sqrt(p * sum (1 + alpha_n^2)^order |f_n|^2)."""
        w = (1.0 + self.alphas ** 2) ** order
        return float(np.sqrt(self.p * np.sum(w * np.abs(self.coeffs) ** 2)))


@dataclass(frozen=True)
class DtNOperator:
    """Truncated diagonal DtN symbol over n = -N..N."""

    kind: DtNKind
    coeffs: np.ndarray
    height: float
    N: int
    k: float
    theta: float
    p: float
    zero_flags: tuple[int, ...] = ()
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.N, self.N + 1)

    @property
    def alpha_hat(self) -> float:
        return self.k * math.sin(self.theta)

    @property
    def alphas(self) -> np.ndarray:
        return alphas(self.k, self.theta, self.p, self.N)

    def coeff(self, n: int) -> complex:
        return complex(self.coeffs[n + self.N])

    def __add__(self, other: DtNOperator) -> DtNOperator:
        _check_compatible(self, other)
        return DtNOperator(
            self.kind, self.coeffs + other.coeffs, self.height, self.N,
            self.k, self.theta, self.p, tuple(sorted(set(self.zero_flags) | set(other.zero_flags))),
        )

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "kind": self.kind.value,
            "height": float(self.height),
            "N": int(self.N),
            "k": float(self.k),
            "theta": float(self.theta),
            "p": float(self.p),
            "coeffs": [[float(c.real), float(c.imag)] for c in self.coeffs],
            "zero_flags": [int(n) for n in self.zero_flags],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> DtNOperator:
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported DtN schema {data.get('schema')!r}")
        coeffs = np.array([complex(re, im) for re, im in data["coeffs"]])
        return cls(
            kind=DtNKind(data["kind"]),
            coeffs=coeffs,
            height=float(data["height"]),
            N=int(data["N"]),
            k=float(data["k"]),
            theta=float(data["theta"]),
            p=float(data["p"]),
            zero_flags=tuple(int(n) for n in data["zero_flags"]),
        )


def _check_compatible(a: DtNOperator, b: DtNOperator) -> None:
    if a.N != b.N or not np.isclose(a.alpha_hat, b.alpha_hat) or not np.isclose(a.p, b.p):
        raise IndexMismatch("operators have different index ranges or quasi-periodicity")


def classical_dtn(
    k: float,
    theta: float,
    p: float,
    N: Optional[int] = None,
    *,
    height: float = 0.0,
    q_value: float = 1.0,
    direction: Direction = Direction.UPWARD,
) -> DtNOperator:
    """Rayleigh DtN symbol i*beta_n of a homogeneous half-space with index q_value.

    The upward map at the cover and the downward map -d/dx2 of a homogeneous
    substrate share the same symbol.
    """
    if not k > 0:
        raise ValueError("k must be positive")
    if not -math.pi / 2 < theta < math.pi / 2:
        raise ValueError("theta must lie in (-pi/2, pi/2)")
    if N is None:
        N = default_truncation(k, p)
    coeffs = 1j * rayleigh_betas(k, theta, p, N, q_value)
    kind = DtNKind.CLASSICAL_UP if Direction(direction) is Direction.UPWARD else DtNKind.CLASSICAL_DOWN
    return DtNOperator(kind, coeffs, float(height), int(N), float(k), float(theta), float(p))


def _asymptotic_coeff(q: RefractiveProfile, k: float, a: float, x2: float, direction: Direction) -> complex:
    # two-term WKB solution of the Riccati equation r' + r^2 + k^2 q - a^2 = 0
    omega = math.sqrt(a * a - k * k * float(q(x2)))
    corr = k * k * float(q.derivative(x2)) / (4.0 * omega * omega)
    if direction is Direction.DOWNWARD:
        return complex(-omega - corr)
    return complex(-omega + corr)


def _generalized(
    q: RefractiveProfile,
    k: float,
    theta: float,
    p: float,
    height: float,
    N: Optional[int],
    direction: Direction,
    *,
    tol: float,
    eps_eta: float,
    tol_zero: float,
    allow_limit_fallback: bool,
    threads: int,
    case_c_rule: CaseCRule,
    asymptotic_from: int,
    modes: Optional[Sequence[FloquetMode]],
) -> DtNOperator:
    if not k > 0:
        raise ValueError("k must be positive")
    if N is None:
        N = default_truncation(k, p)
    ns = list(range(-N, N + 1))
    exact_ns = [n for n in ns if abs(n) <= asymptotic_from]
    if modes is None:
        def one(n):
            return build_mode(q, k, theta, p, n, tol=tol, eps_eta=eps_eta, case_c_rule=case_c_rule)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                modes = list(pool.map(one, exact_ns))
        else:
            modes = [one(n) for n in exact_ns]
    by_n = {m.n: m for m in modes}
    bad = [n for n in exact_ns if by_n[n].case.is_vector]
    if bad:
        raise AssumptionAViolated(bad)

    def coefficient(n):
        if n not in by_n:
            a = k * math.sin(theta) + TWO_PI * n / p
            return _asymptotic_coeff(q, k, a, height, direction), None
        mode = by_n[n]
        try:
            r = mode.log_derivative(direction, height, tol_zero)
            flagged = False
        except NearZeroDenominator:
            if not allow_limit_fallback:
                raise
            shift = EPS_PROBE if direction is Direction.DOWNWARD else -EPS_PROBE
            r = mode.log_derivative(direction, height + shift, tol_zero * 1e-6)
            flagged = True
        c = -r if direction is Direction.DOWNWARD else r
        return complex(c), flagged

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(coefficient, ns))
    else:
        results = [coefficient(n) for n in ns]
    coeffs = np.array([c for c, _ in results])
    zero_flags = tuple(n for n, (_, f) in zip(ns, results) if f)
    diagnostics = {
        "cases": {m.n: m.case.value for m in modes},
        "flux": {m.n: m.flux(direction) for m in modes},
        "warnings": [w for m in modes for w in m.warnings],
        "asymptotic_indices": [n for n in ns if n not in by_n],
    }
    kind = DtNKind.GENERALIZED_DOWN if direction is Direction.DOWNWARD else DtNKind.GENERALIZED_UP
    return DtNOperator(kind, coeffs, float(height), int(N), float(k), float(theta), float(p), zero_flags, diagnostics)


def downward_dtn(
    q: RefractiveProfile,
    k: float,
    theta: float,
    p: float,
    b: float,
    N: Optional[int] = None,
    *,
    tol: float = DEFAULT_TOL,
    eps_eta: float = DEFAULT_EPS_ETA,
    tol_zero: float = DEFAULT_TOL_ZERO,
    allow_limit_fallback: bool = False,
    threads: int = 1,
    case_c_rule: CaseCRule = CaseCRule.FLUX,
    asymptotic_from: int = ASYMPTOTIC_FROM,
    modes: Optional[Sequence[FloquetMode]] = None,
) -> DtNOperator:
    """Generalized downward map with symbol -u_n^-'(b)/u_n^-(b)."""
    return _generalized(
        q, k, theta, p, b, N, Direction.DOWNWARD, tol=tol, eps_eta=eps_eta, tol_zero=tol_zero,
        allow_limit_fallback=allow_limit_fallback, threads=threads, case_c_rule=case_c_rule,
        asymptotic_from=asymptotic_from, modes=modes,
    )


def upward_dtn(
    q: RefractiveProfile,
    k: float,
    theta: float,
    p: float,
    d: float,
    N: Optional[int] = None,
    *,
    tol: float = DEFAULT_TOL,
    eps_eta: float = DEFAULT_EPS_ETA,
    tol_zero: float = DEFAULT_TOL_ZERO,
    allow_limit_fallback: bool = False,
    threads: int = 1,
    case_c_rule: CaseCRule = CaseCRule.FLUX,
    asymptotic_from: int = ASYMPTOTIC_FROM,
    modes: Optional[Sequence[FloquetMode]] = None,
) -> DtNOperator:
    """Generalized upward map with symbol u_n^+'(d)/u_n^+(d)."""
    return _generalized(
        q, k, theta, p, d, N, Direction.UPWARD, tol=tol, eps_eta=eps_eta, tol_zero=tol_zero,
        allow_limit_fallback=allow_limit_fallback, threads=threads, case_c_rule=case_c_rule,
        asymptotic_from=asymptotic_from, modes=modes,
    )


def apply(op: DtNOperator, f: FourierTrace) -> FourierTrace:
    if f.N != op.N or not np.isclose(f.alpha_hat, op.alpha_hat) or not np.isclose(f.p, op.p):
        raise IndexMismatch(
            f"trace has N={f.N}, alpha_hat={f.alpha_hat}; operator has N={op.N}, alpha_hat={op.alpha_hat}"
        )
    return FourierTrace(f.alpha_hat, f.p, op.coeffs * f.coeffs)


def smallest_split_index(op: DtNOperator) -> int:
    """Smallest N_split with Re(coeff_n) < 0 for every |n| > N_split."""
    bad = np.abs(op.indices[op.coeffs.real >= 0])
    return int(bad.max()) if bad.size else 0


def split(op: DtNOperator, N_split: int) -> tuple[DtNOperator, DtNOperator]:
    """Tail part (|n| > N_split, coercive) and head part (|n| <= N_split)."""
    if not 0 <= N_split <= op.N:
        raise ValueError("N_split must lie in [0, N]")
    tail = np.abs(op.indices) > N_split
    if np.any(op.coeffs.real[tail] >= 0):
        raise SplitIndexTooSmall(smallest_split_index(op))
    head_c = np.where(tail, 0, op.coeffs)
    tail_c = np.where(tail, op.coeffs, 0)
    mk = lambda c: DtNOperator(op.kind, c, op.height, op.N, op.k, op.theta, op.p, op.zero_flags)
    return mk(tail_c), mk(head_c)


@dataclass(frozen=True)
class BoundednessReport:
    max_value: float
    indices: np.ndarray
    profile: np.ndarray
    ratios: np.ndarray
    large_n_limit: float
    fit_range: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "max_value": self.max_value,
            "large_n_limit": self.large_n_limit,
            "fit_range": list(self.fit_range),
            "profile": [[int(n), float(v)] for n, v in zip(self.indices, self.profile)],
        }


def boundedness_report(op: DtNOperator, fit_range: Optional[tuple[int, int]] = None) -> BoundednessReport:
    """(1 + alpha_n^2)^(-1/2) |coeff_n| per n, its maximum and the large-n limit of |coeff_n|/|alpha_n|.

    The limit is the intercept of a least-squares fit ratio ~ a + b/alpha^2
    over ``fit_range`` (default: the upper third of the index range).
    """
    al = op.alphas
    prof = np.abs(op.coeffs) / np.sqrt(1.0 + al ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.abs(op.coeffs) / np.abs(al)
    if fit_range is None:
        fit_range = (max(1, (2 * op.N) // 3), op.N)
    sel = (np.abs(op.indices) >= fit_range[0]) & (np.abs(op.indices) <= fit_range[1]) & (np.abs(al) > 0)
    if np.count_nonzero(sel) >= 2:
        design = np.column_stack([np.ones(np.count_nonzero(sel)), 1.0 / al[sel] ** 2])
        sol, *_ = np.linalg.lstsq(design, ratios[sel], rcond=None)
        limit = float(sol[0])
    elif np.any(sel):
        limit = float(ratios[sel][0])
    else:
        limit = float("nan")
    return BoundednessReport(float(prof.max()), op.indices, prof, ratios, limit, tuple(fit_range))


def substrate_dtn(
    q: RefractiveProfile,
    k: float,
    theta: float,
    p: float,
    b: float,
    N: Optional[int] = None,
    *,
    method: str = "auto",
    **kwargs,
) -> DtNOperator:
    """Downward map for the substrate below x2 = b.

    ``method`` is "floquet" (mode construction), "rayleigh" (homogeneous
    half-space, constant profiles only) or "auto", which picks "rayleigh"
    for constant profiles. Constant profiles hit W = +-I whenever some beta_n
    is a half-integer, so the mode route is not always available there.
    """
    if method not in ("auto", "floquet", "rayleigh"):
        raise ValueError(f"unknown bottom map method {method!r}")
    constant = q.kind.value == "constant"
    if method == "rayleigh" or (method == "auto" and constant):
        if not constant:
            raise ValueError("the rayleigh bottom map needs a constant substrate")
        return classical_dtn(k, theta, p, N, height=b, q_value=q.values[0], direction=Direction.DOWNWARD)
    return downward_dtn(q, k, theta, p, b, N, **kwargs)
