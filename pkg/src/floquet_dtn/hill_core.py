"""Fundamental solutions and monodromy of Hill equations u'' + c(x) u = 0.

The system is linear, so one Runge-Kutta step from x to x + h is a 2x2
propagator matrix.  All step propagators are built at once with the
Dormand-Prince 5(4) pair, steps whose embedded error estimate exceeds the
tolerance are subdivided, and the fundamental matrix at every node is the
prefix product of the propagators.  Prefix products are kept as a normalized
matrix times ``exp(log_scale)`` so that exponentially growing modes never
overflow.  Piecewise-constant coefficients use exact cos/cosh transfer
matrices instead of Runge-Kutta steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteCoefficient, StepUnderflow, WeightNotPositive
from .profiles import TWO_PI, RefractiveProfile

DEFAULT_TOL = 1e-11
RESCALE_LIMIT = 1e100
_LOG_RESCALE = np.log(RESCALE_LIMIT)
_MIN_STEP = 1e-13
_MAX_EXACT_GROWTH = 30.0

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_HAT = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_B_ERR = _B - _B_HAT


@dataclass(frozen=True)
class CoefficientFunction:
    """Periodic coefficient c(x) of a Hill equation.

    ``func`` maps an array of x values to c(x); batched coefficients return
    shape ``(batch, len(x))``.  ``pieces`` lists ``(start, end, value)`` over
    [0, 2*pi) when c is piecewise constant, which enables exact transfer
    matrices.  ``weight`` optionally gives dc/dlambda for the spectral form.
    """

    func: Callable[[np.ndarray], np.ndarray]
    breakpoints: tuple[float, ...] = ()
    pieces: Optional[tuple[tuple[float, float, object], ...]] = None
    batch: int = 1
    weight: Optional[Callable[[np.ndarray], np.ndarray]] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def scattering(cls, q: RefractiveProfile, k: float, alpha: float) -> CoefficientFunction:
        """c(x) = k^2 q(x) - alpha^2."""
        k2, a2 = k * k, alpha * alpha
        pieces = None
        if q.is_piecewise_constant:
            pieces = tuple((s, e, k2 * v - a2) for s, e, v in q.pieces())
        return cls(
            func=lambda x: k2 * q(x) - a2,
            breakpoints=tuple(q.kinks()),
            pieces=pieces,
            meta={"k": k, "alpha": alpha},
        )

    @classmethod
    def spectral(cls, s, qshift, lam) -> CoefficientFunction:
        """c(x) = lam*s(x) - qshift(x); ``lam`` may be an array (batched)."""
        lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
        sfun = _as_function(s)
        qfun = _as_function(qshift)
        bps = set()
        for g in (s, qshift):
            if isinstance(g, RefractiveProfile):
                bps.update(g.kinks().tolist())

        def func(x):
            return lam_arr[:, None] * sfun(x)[None, :] - qfun(x)[None, :]

        def weight(x):
            return np.broadcast_to(sfun(x)[None, :], (lam_arr.size, np.size(x)))

        return cls(
            func=func,
            breakpoints=tuple(sorted(bps)),
            batch=lam_arr.size,
            weight=weight,
            meta={"lambda": lam_arr},
        )

    @classmethod
    def constant(cls, value: float) -> CoefficientFunction:
        value = float(value)
        return cls(
            func=lambda x: np.full(np.shape(x), value),
            pieces=((0.0, TWO_PI, value),),
            meta={"value": value},
        )

    def values(self, x: np.ndarray) -> np.ndarray:
        """Evaluate as an array of shape (batch, len(x)), checking finiteness."""
        c = np.asarray(self.func(np.asarray(x, dtype=float)))
        c = np.broadcast_to(c, (self.batch, np.size(x))) if c.ndim < 2 else c
        if not np.all(np.isfinite(c)):
            raise NonFiniteCoefficient("coefficient c(x) is not finite")
        return c


def _as_function(g) -> Callable[[np.ndarray], np.ndarray]:
    if g is None:
        return lambda x: np.zeros(np.shape(x))
    if callable(g):
        return lambda x: np.broadcast_to(np.asarray(g(x), dtype=float), np.shape(x))
    value = float(g)
    return lambda x: np.full(np.shape(x), value)


# ----------------------------------------------------------------------------
# step propagators


def _system_matrices(coef: CoefficientFunction, x: np.ndarray, derivative: bool) -> np.ndarray:
    """First-order system matrices, shape (batch, len(x), m, m)."""
    c = coef.values(x)
    b, s = c.shape
    if not derivative:
        a = np.zeros((b, s, 2, 2))
        a[..., 0, 1] = 1.0
        a[..., 1, 0] = -c
        return a
    w = coef.weight(x)
    a = np.zeros((b, s, 4, 4))
    a[..., 0, 1] = 1.0
    a[..., 1, 0] = -c
    a[..., 2, 3] = 1.0
    a[..., 3, 0] = -w
    a[..., 3, 2] = -c
    return a


def _rk_propagators(coef, x0, h, derivative=False):
    """Dormand-Prince propagators and error matrices for steps (x0, x0 + h)."""
    if not derivative:
        return _rk_propagators_2x2(coef, x0, h)
    m = 4
    eye = np.eye(m)
    ks = []
    for i in range(7):
        y = np.broadcast_to(eye, (coef.batch, x0.size, m, m)).copy()
        for j, aij in enumerate(_A[i]):
            if aij != 0.0:
                y += (aij * h)[None, :, None, None] * ks[j]
        ks.append(_system_matrices(coef, x0 + _C[i] * h, derivative) @ y)
    hh = h[None, :, None, None]
    prop = eye + hh * sum(b * kk for b, kk in zip(_B, ks) if b != 0.0)
    err = hh * sum(b * kk for b, kk in zip(_B_ERR, ks) if b != 0.0)
    return prop, err


def _rk_propagators_2x2(coef, x0, h):
    # K = A Y with A = [[0, 1], [-c, 0]] written out componentwise
    ks = []
    for i in range(7):
        y = [np.ones((coef.batch, x0.size)), np.zeros((coef.batch, x0.size)),
             np.zeros((coef.batch, x0.size)), np.ones((coef.batch, x0.size))]
        for j, aij in enumerate(_A[i]):
            if aij != 0.0:
                ah = aij * h
                for e in range(4):
                    y[e] = y[e] + ah * ks[j][e]
        c = coef.values(x0 + _C[i] * h)
        ks.append((y[2], y[3], -c * y[0], -c * y[1]))
    prop = np.empty((coef.batch, x0.size, 2, 2))
    err = np.empty((coef.batch, x0.size, 2, 2))
    eye = (1.0, 0.0, 0.0, 1.0)
    for e in range(4):
        r, cc = divmod(e, 2)
        prop[..., r, cc] = eye[e] + h * sum(b * kk[e] for b, kk in zip(_B, ks) if b != 0.0)
        err[..., r, cc] = h * sum(b * kk[e] for b, kk in zip(_B_ERR, ks) if b != 0.0)
    return prop, err


def _exact_propagators(cvals: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Transfer matrices of u'' + c u = 0 over steps of length h with constant c."""
    c = np.asarray(cvals, dtype=float)
    h = np.broadcast_to(h, c.shape)
    out = np.empty(c.shape + (2, 2))
    root = np.sqrt(np.abs(c))
    z = root * h
    pos, neg = c > 0, c < 0
    zero = ~(pos | neg)
    cs = np.where(pos, np.cos(z), np.where(neg, np.cosh(z), 1.0))
    sn = np.where(pos, np.sin(z), np.where(neg, np.sinh(z), 0.0))
    safe = np.where(zero, 1.0, root)
    out[..., 0, 0] = cs
    out[..., 1, 1] = cs
    out[..., 0, 1] = np.where(zero, h, sn / safe)
    out[..., 1, 0] = np.where(pos, -root * sn, np.where(neg, root * sn, 0.0))
    return out


def _piece_values(coef: CoefficientFunction, xm: np.ndarray) -> np.ndarray:
    xr = np.mod(xm, TWO_PI)
    starts = np.array([p[0] for p in coef.pieces])
    vals = [p[2] for p in coef.pieces]
    idx = np.searchsorted(starts, xr, side="right") - 1
    out = np.asarray(vals, dtype=float)[idx]
    if not np.all(np.isfinite(out)):
        raise NonFiniteCoefficient("coefficient c(x) is not finite")
    return out[None, :]


# ----------------------------------------------------------------------------
# grids and prefix products


def _segment_edges(x_end: float, breakpoints) -> np.ndarray:
    """Sorted segment edges from 0 to x_end including shifted breakpoints."""
    sign = 1.0 if x_end > 0 else -1.0
    span = abs(x_end)
    pts = []
    for t in breakpoints:
        t = float(np.mod(t, TWO_PI))
        if sign < 0:
            t = TWO_PI - t
        if 1e-14 < t < span - 1e-14:
            pts.append(t)
    edges = np.array([0.0, *sorted(set(pts)), span])
    return sign * edges


def _subdivide(edges: np.ndarray, hmax: float):
    x0s, hs = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(1, int(np.ceil(abs(b - a) / hmax)))
        loc = a + (b - a) * np.arange(n) / n
        x0s.append(loc)
        hs.append(np.full(n, (b - a) / n))
    return np.concatenate(x0s), np.concatenate(hs)


def _split_steps(x0, h, nsub):
    """Split step j into nsub[j] equal parts (vectorized)."""
    hs = np.repeat(h / nsub, nsub)
    offsets = np.arange(nsub.sum()) - np.repeat(np.cumsum(nsub) - nsub, nsub)
    return np.repeat(x0, nsub) + offsets * hs, hs


def _relative_error(prop, err, omega):
    m = prop.shape[-1]
    d = np.ones(m)
    d[0::2] = omega
    scale = d[:, None] / d[None, :]
    num = np.max(np.abs(err) * scale, axis=(-2, -1))
    den = np.max(np.abs(prop) * scale, axis=(-2, -1))
    return np.max(num / np.maximum(den, 1e-300), axis=0)


def _adaptive_rk(coef, edges, tol, derivative):
    probe = np.linspace(edges[0], edges[-1], 257)
    cmax = np.max(np.abs(coef.values(probe)))
    omega = max(1.0, np.sqrt(cmax))
    x0, h = _subdivide(edges, min(0.25, 0.05 / omega))
    # calibrate the uniform step on a trial pass so most steps pass first time
    prop, err = _rk_propagators(coef, x0, h, derivative)
    rel = np.max(_relative_error(prop, err, omega))
    if rel > tol:
        x0, h = _subdivide(edges, np.max(np.abs(h)) * 0.85 * (tol / rel) ** 0.2)
    done_x, done_h, done_p = [], [], []
    for _ in range(60):
        prop, err = _rk_propagators(coef, x0, h, derivative)
        rel = _relative_error(prop, err, omega)
        good = rel <= tol
        done_x.append(x0[good])
        done_h.append(h[good])
        done_p.append(prop[:, good])
        if np.all(good):
            break
        bx, bh, br = x0[~good], h[~good], rel[~good]
        nsub = np.clip(np.ceil(1.3 * (br / tol) ** 0.2), 2, 64).astype(int)
        x0, h = _split_steps(bx, bh, nsub)
        if np.min(np.abs(h)) < _MIN_STEP:
            raise StepUnderflow(f"step size fell below {_MIN_STEP:g}")
    else:
        raise StepUnderflow("step refinement did not converge")
    x0 = np.concatenate(done_x)
    h = np.concatenate(done_h)
    prop = np.concatenate(done_p, axis=1)
    order = np.argsort(x0 * np.sign(edges[-1]), kind="stable")
    return x0[order], h[order], prop[:, order]


def _exact_grid(coef, edges):
    x0, h = _subdivide(edges, np.inf)
    xs, hs = [], []
    for a, b in zip(x0, h):
        c = _piece_values(coef, np.array([a + 0.5 * b]))[0, 0]
        n = max(1, int(np.ceil(np.sqrt(max(-c, 0.0)) * abs(b) / _MAX_EXACT_GROWTH)))
        xs.append(a + b * np.arange(n) / n)
        hs.append(np.full(n, b / n))
    x0, h = np.concatenate(xs), np.concatenate(hs)
    prop = _exact_propagators(_piece_values(coef, x0 + 0.5 * h), h[None, :])
    return x0, h, prop


def _normalize(mats, logs):
    m = mats.shape[-1]
    nrm = np.abs(mats).reshape(mats.shape[:-2] + (m * m,)).max(axis=-1)
    nrm = np.where(nrm > 0, nrm, 1.0)
    return mats / nrm[..., None, None], logs + np.log(nrm)


def _prefix_products(prop):
    """Inclusive prefix products P_j = R_j ... R_0 with log scales (Hillis-Steele)."""
    if prop.shape[-1] == 2:
        return _prefix_products_2x2(prop)
    mats, logs = _normalize(prop, np.zeros(prop.shape[:2]))
    n = prop.shape[1]
    shift = 1
    while shift < n:
        new_m = mats.copy()
        new_l = logs.copy()
        new_m[:, shift:] = mats[:, shift:] @ mats[:, :-shift]
        new_l[:, shift:] = logs[:, shift:] + logs[:, :-shift]
        new_m[:, shift:], new_l[:, shift:] = _normalize(new_m[:, shift:], new_l[:, shift:])
        mats, logs = new_m, new_l
        shift *= 2
    return mats, logs


def _prefix_products_2x2(prop):
    a, b, c, d = (np.ascontiguousarray(prop[..., i, j]) for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))
    logs = np.zeros(a.shape)

    def renorm(a, b, c, d, logs):
        nrm = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.maximum(np.abs(c), np.abs(d)))
        nrm[nrm == 0] = 1.0
        return a / nrm, b / nrm, c / nrm, d / nrm, logs + np.log(nrm)

    a, b, c, d, logs = renorm(a, b, c, d, logs)
    n = a.shape[1]
    shift = 1
    while shift < n:
        a1, b1, c1, d1 = a[:, shift:], b[:, shift:], c[:, shift:], d[:, shift:]
        a0, b0, c0, d0 = a[:, :-shift], b[:, :-shift], c[:, :-shift], d[:, :-shift]
        na, nb, nc, nd, nl = renorm(
            a1 * a0 + b1 * c0, a1 * b0 + b1 * d0, c1 * a0 + d1 * c0, c1 * b0 + d1 * d0,
            logs[:, shift:] + logs[:, :-shift],
        )
        a = np.concatenate([a[:, :shift], na], axis=1)
        b = np.concatenate([b[:, :shift], nb], axis=1)
        c = np.concatenate([c[:, :shift], nc], axis=1)
        d = np.concatenate([d[:, :shift], nd], axis=1)
        logs = np.concatenate([logs[:, :shift], nl], axis=1)
        shift *= 2
    mats = np.stack([np.stack([a, b], axis=-1), np.stack([c, d], axis=-1)], axis=-2)
    return mats, logs


def _fold(mats, logs):
    """Undo the normalization wherever the true magnitude stays below 1e100."""
    small = logs <= _LOG_RESCALE
    factor = np.where(small, np.exp(np.where(small, logs, 0.0)), 1.0)
    return mats * factor[..., None, None], np.where(small, 0.0, logs)


# ----------------------------------------------------------------------------
# public types


@dataclass(frozen=True)
class FundamentalPair:
    """Fundamental solutions w1 (w1(0)=1, w1'(0)=0) and w2 (w2(0)=0, w2'(0)=1).

    ``states[b, j]`` is the matrix [[w1, w2], [w1', w2']] at ``nodes[j]`` for
    batch member ``b``, scaled by ``exp(-log_scales[b, j])``.  Integration
    runs from 0 to ``x_end`` (``x_end = -2*pi`` for backward integration).
    """

    coef: CoefficientFunction
    tol: float
    x_end: float
    nodes: np.ndarray
    steps: np.ndarray
    states: np.ndarray
    log_scales: np.ndarray
    exact: bool
    derivative: bool = False

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def w1(self):
        return self.states[0, -1, 0, 0]

    @property
    def dw1(self):
        return self.states[0, -1, 1, 0]

    @property
    def w2(self):
        return self.states[0, -1, 0, 1]

    @property
    def dw2(self):
        return self.states[0, -1, 1, 1]

    @property
    def scale_log(self) -> float:
        return float(self.log_scales[0, -1])

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Fundamental matrix at points inside the integration span.

        Returns ``(mats, logs)`` with shapes ``(batch, len(x), m, m)`` and
        ``(batch, len(x))``; the true matrix is ``mats * exp(logs)``.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        sign = np.sign(self.x_end)
        pos = sign * self.nodes
        idx = np.searchsorted(pos, sign * x, side="right") - 1
        idx = np.clip(idx, 0, len(self.nodes) - 2)
        x0 = self.nodes[idx]
        dx = x - x0
        if self.exact:
            prop = _exact_propagators(_piece_values(self.coef, x0 + 0.5 * self.steps[idx]), dx[None, :])
        else:
            prop, _ = _rk_propagators(self.coef, x0, dx, self.derivative)
        mats = prop @ self.states[:, idx]
        logs = self.log_scales[:, idx]
        mats, logs = _normalize(mats, logs)
        return _fold(mats, logs)

    def wronskian_residual(self) -> float:
        """max over stored nodes of |w1 w2' - w2 w1' - 1| (unscaled nodes only)."""
        st = self.states[..., :2, :2]
        det = st[..., 0, 0] * st[..., 1, 1] - st[..., 0, 1] * st[..., 1, 0]
        ok = self.log_scales == 0.0
        if not np.any(ok):
            return 0.0
        return float(np.max(np.abs(det[ok] - 1.0)))


def integrate_hill(
    c: CoefficientFunction,
    tol: float = DEFAULT_TOL,
    *,
    x_end: float = TWO_PI,
    derivative: bool = False,
) -> FundamentalPair:
    """Integrate both fundamental solutions of u'' + c(x) u = 0 from 0 to ``x_end``.

    With ``derivative=True`` the lambda-derivatives of the spectral form are
    carried along (4x4 system); this requires ``c.weight``.
    """
    if not (1e-14 < tol < 1e-4):
        raise ValueError("tol must lie in (1e-14, 1e-4)")
    if derivative and c.weight is None:
        raise ValueError("derivative integration needs the spectral weight")
    edges = _segment_edges(x_end, c.breakpoints)
    exact = c.pieces is not None and not derivative and c.batch == 1
    if exact:
        x0, h, prop = _exact_grid(c, edges)
    else:
        x0, h, prop = _adaptive_rk(c, edges, tol, derivative)
    mats, logs = _prefix_products(prop)
    m = prop.shape[-1]
    first = np.broadcast_to(np.eye(m), (c.batch, 1, m, m))
    states = np.concatenate([first, mats], axis=1)
    log_scales = np.concatenate([np.zeros((c.batch, 1)), logs], axis=1)
    states, log_scales = _fold(states, log_scales)
    nodes = np.append(x0, x0[-1] + h[-1])
    nodes[-1] = x_end
    return FundamentalPair(
        coef=c,
        tol=tol,
        x_end=float(x_end),
        nodes=nodes,
        steps=np.append(h, 0.0),
        states=states,
        log_scales=log_scales,
        exact=exact,
        derivative=derivative,
    )


@dataclass(frozen=True)
class MonodromyResult:
    """Monodromy matrix W = [[w1, w2], [w1', w2']] at x = 2*pi.

    The true matrix is ``W * exp(log_scale)``; ``eta`` is the trace of the
    stored ``W``, so the discriminant is ``eta * exp(log_scale)``.
    """

    W: np.ndarray
    eta: float
    det_residual: float
    log_scale: float
    alpha: float
    k: float
    pair: Optional[FundamentalPair] = field(default=None, repr=False, compare=False)

    @property
    def eta_value(self) -> float:
        """Discriminant as a plain float (may overflow to +-inf)."""
        if self.log_scale == 0.0:
            return self.eta
        with np.errstate(over="ignore"):
            return float(self.eta * np.exp(self.log_scale))

    @property
    def log_abs_eta(self) -> float:
        return float(np.log(abs(self.eta)) + self.log_scale) if self.eta != 0 else -np.inf


def _det_residual(W: np.ndarray, log_scale: float) -> float:
    det = W[0, 0] * W[1, 1] - W[0, 1] * W[1, 0]
    if log_scale == 0.0:
        return float(abs(det - 1.0))
    if det <= 0:
        return float("inf")
    logdet = np.log(det) + 2.0 * log_scale
    return float(abs(np.expm1(logdet))) if logdet < 700.0 else float("inf")


def monodromy_from_pair(pair: FundamentalPair, k: float = np.nan, alpha: float = np.nan) -> MonodromyResult:
    W = np.array(pair.endpoint[0, :2, :2], dtype=float)
    log_scale = pair.scale_log
    return MonodromyResult(
        W=W,
        eta=float(W[0, 0] + W[1, 1]),
        det_residual=_det_residual(W, log_scale),
        log_scale=log_scale,
        alpha=float(alpha),
        k=float(k),
        pair=pair,
    )


def monodromy(q: RefractiveProfile, k: float, alpha: float, tol: float = DEFAULT_TOL) -> MonodromyResult:
    """Monodromy matrix of u'' + (k^2 q - alpha^2) u = 0 over one period."""
    if not k > 0:
        raise ValueError("k must be positive")
    pair = integrate_hill(CoefficientFunction.scattering(q, k, alpha), tol)
    return monodromy_from_pair(pair, k, alpha)


def _weight_floor(s) -> float:
    if isinstance(s, RefractiveProfile):
        return s.q_min
    if callable(s):
        xs = np.linspace(0.0, TWO_PI, 2049)
        return float(np.min(np.asarray(s(xs), dtype=float)))
    return float(s)


def eta_of_lambda(s, qshift, lam, tol: float = DEFAULT_TOL, *, with_derivative: bool = False, chunk: int = 64):
    """Discriminant of y'' + (lam*s - qshift) y = 0 over one period.

    ``lam`` may be a scalar or an array.  With ``with_derivative=True`` the
    pair ``(eta, deta/dlam)`` is returned.
    """
    if _weight_floor(s) <= 0.0:
        raise WeightNotPositive("weight s must be positive on [0, 2*pi]")
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    etas = np.empty(lam_arr.size)
    detas = np.empty(lam_arr.size)
    for start in range(0, lam_arr.size, chunk):
        part = lam_arr[start:start + chunk]
        coef = CoefficientFunction.spectral(s, qshift, part)
        pair = integrate_hill(coef, tol, derivative=with_derivative)
        end = pair.states[:, -1]
        scale = np.exp(pair.log_scales[:, -1])
        etas[start:start + chunk] = (end[:, 0, 0] + end[:, 1, 1]) * scale
        if with_derivative:
            detas[start:start + chunk] = (end[:, 2, 0] + end[:, 3, 1]) * scale
    if np.ndim(lam) == 0:
        return (etas[0], detas[0]) if with_derivative else etas[0]
    return (etas, detas) if with_derivative else etas
