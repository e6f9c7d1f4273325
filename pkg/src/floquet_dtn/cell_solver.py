"""P1 finite elements on the periodic cell (0, p) x (b, d) with DtN boundary coupling.

The unknown is the periodic field uh = exp(-i alpha_hat x1) u, discretized on a
structured triangulation whose left and right columns are identified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dtn_ops import DtNKind, DtNOperator, classical_dtn, substrate_dtn
from .errors import (
    BadGeometry,
    BadResolution,
    FloquetDtNError,
    OperatorHeightMismatch,
    SingularAssembly,
    SingularBVP,
    SingularMatrix,
    ValidationError,
)
from .profiles import RefractiveProfile

# interior 3-point rule, exact for quadratics; barycentric coordinates
_QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_QUAD_W = np.full(3, 1 / 3)
_HEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class CellMesh:
    p: float
    b: float
    d: float
    nx: int
    ny: int
    nodes: np.ndarray
    elements: np.ndarray
    dof: np.ndarray
    periodic_pairs: np.ndarray
    top_trace: np.ndarray
    bottom_trace: np.ndarray

    @property
    def n_dof(self) -> int:
        return self.nx * (self.ny + 1)

    @property
    def hx(self) -> float:
        return self.p / self.nx

    @property
    def hy(self) -> float:
        return (self.d - self.b) / self.ny

    @property
    def trace_x1(self) -> np.ndarray:
        return self.hx * np.arange(self.nx)


def build_mesh(p: float, b: float, d: float, nx: int, ny: int) -> CellMesh:
    """Structured mesh, two triangles per quad, (nx+1)(ny+1) nodes before pairing."""
    if not (p > 0 and math.isfinite(p)):
        raise BadGeometry(f"period must be positive, got p={p}")
    if not d > b:
        raise BadGeometry(f"need d > b, got b={b}, d={d}")
    if nx < 4 or ny < 4:
        raise BadResolution(f"nx and ny must be at least 4, got nx={nx}, ny={ny}")
    x1 = np.linspace(0.0, p, nx + 1)
    x2 = np.linspace(b, d, ny + 1)
    X1, X2 = np.meshgrid(x1, x2)
    nodes = np.column_stack([X1.ravel(), X2.ravel()])
    node = lambda i, j: j * (nx + 1) + i
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    n00, n10, n01, n11 = node(ii, jj), node(ii + 1, jj), node(ii, jj + 1), node(ii + 1, jj + 1)
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    elements = np.empty((2 * len(ii), 3), dtype=int)
    elements[0::2] = lower
    elements[1::2] = upper
    ci, cj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    dof = (cj * nx + (ci % nx)).ravel()
    pairs = np.column_stack([node(0, np.arange(ny + 1)), node(nx, np.arange(ny + 1))])
    top = ny * nx + np.arange(nx)
    bottom = np.arange(nx)
    return CellMesh(float(p), float(b), float(d), int(nx), int(ny), nodes, elements, dof, pairs, top, bottom)


@dataclass(frozen=True)
class CellMedium:
    """Cell refractive index q0(x1, x2), p-periodic in x1.

    ``kind`` is "uniform" (params: value), "layered" (params: interfaces, values;
    layer j spans [interfaces[j-1], interfaces[j])) or "table" (params: samples
    over the rectangle, rows along x2 from b to d, columns along x1 over one
    period, interpolated bilinearly).
    """

    kind: str
    params: dict = field(default_factory=dict)

    @classmethod
    def uniform(cls, value: complex) -> CellMedium:
        return cls("uniform", {"value": complex(value)})

    @classmethod
    def layered(cls, interfaces: Sequence[float], values: Sequence[complex]) -> CellMedium:
        interfaces = [float(t) for t in interfaces]
        values = [complex(v) for v in values]
        if len(values) != len(interfaces) + 1:
            raise ValidationError("cell", "layered medium needs one more value than interfaces")
        if any(np.diff(interfaces) <= 0):
            raise ValidationError("cell", "interfaces must increase strictly")
        return cls("layered", {"interfaces": interfaces, "values": values})

    @classmethod
    def table(cls, samples, p: float, b: float, d: float) -> CellMedium:
        arr = np.asarray(samples, dtype=complex)
        if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 1:
            raise ValidationError("cell", "table must be a 2-D array with at least two rows")
        return cls("table", {"samples": arr, "p": float(p), "b": float(b), "d": float(d)})

    @classmethod
    def over_substrate(cls, base: CellMedium, q: RefractiveProfile, b: float) -> CellMedium:
        """``base`` above x2 = b and the substrate profile q below it."""
        return cls("extended", {"base": base, "substrate": q, "b": float(b)})

    @property
    def depends_on_x1(self) -> bool:
        if self.kind == "extended":
            return self.params["base"].depends_on_x1
        return self.kind == "table" and self.params["samples"].shape[1] > 1

    @property
    def interfaces(self) -> list[float]:
        if self.kind == "extended":
            return sorted(self.params["base"].interfaces + [self.params["b"]])
        return list(self.params["interfaces"]) if self.kind == "layered" else []

    def __call__(self, x1, x2) -> np.ndarray:
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
        if self.kind == "extended":
            below = x2 < self.params["b"]
            return np.where(below, self.params["substrate"](x2) + 0j, self.params["base"](x1, x2))
        if self.kind == "uniform":
            return np.full(x1.shape, self.params["value"], dtype=complex)
        if self.kind == "layered":
            idx = np.searchsorted(np.asarray(self.params["interfaces"]), x2, side="right")
            return np.asarray(self.params["values"], dtype=complex)[idx]
        tab = self.params["samples"]
        rows, cols = tab.shape
        t2 = np.clip((x2 - self.params["b"]) / (self.params["d"] - self.params["b"]), 0.0, 1.0) * (rows - 1)
        j = np.minimum(np.floor(t2).astype(int), rows - 2)
        f2 = t2 - j
        t1 = np.mod(x1, self.params["p"]) / self.params["p"] * cols
        i = np.minimum(np.floor(t1).astype(int), cols - 1)
        f1 = t1 - i
        i1 = (i + 1) % cols
        return ((1 - f2) * ((1 - f1) * tab[j, i] + f1 * tab[j, i1])
                + f2 * ((1 - f1) * tab[j + 1, i] + f1 * tab[j + 1, i1]))

    def validate(self, mesh: CellMesh) -> None:
        """Check Re q0 > 0 and Im q0 >= 0 at the mesh nodes and quadrature points."""
        pts = np.vstack([mesh.nodes, _quadrature_points(mesh).reshape(-1, 2)])
        vals = self(pts[:, 0], pts[:, 1])
        if not np.all(np.isfinite(vals)):
            raise ValidationError("cell", "medium values must be finite")
        if np.any(vals.real <= 0):
            raise ValidationError("cell", "Re q0 must be positive")
        if np.any(vals.imag < 0):
            raise ValidationError("cell", "Im q0 must be non-negative")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for key, val in self.params.items():
            if isinstance(val, (CellMedium, RefractiveProfile)):
                out[key] = val.to_dict()
            elif isinstance(val, np.ndarray):
                out[key] = [[[float(z.real), float(z.imag)] for z in row] for row in val]
            elif isinstance(val, complex):
                out[key] = [val.real, val.imag]
            elif isinstance(val, list) and val and isinstance(val[0], complex):
                out[key] = [[v.real, v.imag] for v in val]
            else:
                out[key] = val
        return out


def _barycentric_gradients(xy: np.ndarray):
    """Areas and gradients of the barycentric coordinates for triangles xy of shape (E, 3, 2)."""
    e1 = xy[:, 1] - xy[:, 0]
    e2 = xy[:, 2] - xy[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g1 = np.stack([e2[:, 1], -e2[:, 0]], -1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], -1) / det[:, None]
    return 0.5 * np.abs(det), np.stack([-(g1 + g2), g1, g2], 1)


def p1_stiffness(vertices) -> np.ndarray:
    """Local P1 stiffness matrix int grad(phi_i).grad(phi_j) of one triangle."""
    area, grads = _barycentric_gradients(np.asarray(vertices, dtype=float)[None])
    return area[0] * grads[0] @ grads[0].T


def _geometry(mesh: CellMesh):
    xy = mesh.nodes[mesh.elements]  # (E, 3, 2)
    e1 = xy[:, 1] - xy[:, 0]
    e2 = xy[:, 2] - xy[:, 0]
    if np.any(np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) <= 2e-14 * mesh.hx * mesh.hy):
        raise SingularAssembly("mesh contains a zero-area element")
    area, grads = _barycentric_gradients(xy)
    return xy, area, grads


def _quadrature_points(mesh: CellMesh) -> np.ndarray:
    xy = mesh.nodes[mesh.elements]
    return np.einsum("qa,eak->eqk", _QUAD_BARY, xy)


def trace_matrix(mesh: CellMesh, N: int) -> np.ndarray:
    """Exact Fourier coefficients (1/p) int phi_j exp(-i 2 pi n x1/p) dx1 of the periodic trace hats."""
    n = np.arange(-N, N + 1)
    kappa = 2 * np.pi * n / mesh.p
    h = mesh.hx
    sinc2 = np.sinc(kappa * h / (2 * np.pi)) ** 2
    return (h / mesh.p) * np.exp(-1j * np.outer(kappa, mesh.trace_x1)) * sinc2[:, None]


def _check_operator(op: DtNOperator, height: float, mesh: CellMesh, k: float, theta: float, where: str) -> None:
    if abs(op.height - height) > _HEIGHT_TOL * max(1.0, abs(height)):
        raise OperatorHeightMismatch(f"{where} operator built at x2={op.height}, boundary is at x2={height}")
    if not (math.isclose(op.p, mesh.p, rel_tol=1e-12) and math.isclose(op.k, k, rel_tol=1e-12)
            and math.isclose(op.theta, theta, rel_tol=1e-12, abs_tol=1e-15)):
        raise OperatorHeightMismatch(f"{where} operator has different p, k or theta")


def volume_matrices(mesh: CellMesh, medium: CellMedium, k: float, alpha_hat: float):
    """Volume part K - i alpha_hat (C - C^T) - M[k^2 q0 - alpha_hat^2] as CSR, plus geometry."""
    xy, area, grads = _geometry(mesh)
    stiff = area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)
    # C_ij = int d1(phi_j) phi_i = area/3 * d1(phi_j)
    conv = np.broadcast_to((area / 3.0)[:, None, None] * grads[:, None, :, 0], stiff.shape)
    qp = np.einsum("qa,eak->eqk", _QUAD_BARY, xy)
    qv = medium(qp[..., 0], qp[..., 1])  # (E, Q)
    weight = k * k * qv - alpha_hat ** 2
    mass = area[:, None, None] * np.einsum("q,eq,qi,qj->eij", _QUAD_W, weight, _QUAD_BARY, _QUAD_BARY)
    local = stiff - 1j * alpha_hat * (conv - conv.transpose(0, 2, 1)) - mass
    dofs = mesh.dof[mesh.elements]
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_dof, mesh.n_dof)).tocsr()
    mat.sum_duplicates()
    return mat


def boundary_block(mesh: CellMesh, op: DtNOperator) -> np.ndarray:
    """Dense block B^H diag(p * coeffs) B on one trace."""
    B = trace_matrix(mesh, op.N)
    return B.conj().T @ (mesh.p * op.coeffs[:, None] * B)


def assemble(
    mesh: CellMesh,
    medium: CellMedium,
    k: float,
    theta: float,
    dtn_top: DtNOperator,
    dtn_bottom: DtNOperator,
):
    """System matrix and load vector of the periodic transformed variational problem."""
    _check_operator(dtn_top, mesh.d, mesh, k, theta, "top")
    _check_operator(dtn_bottom, mesh.b, mesh, k, theta, "bottom")
    alpha_hat = k * math.sin(theta)
    beta = k * math.cos(theta)
    vol = volume_matrices(mesh, medium, k, alpha_hat)
    top = boundary_block(mesh, dtn_top)
    bot = boundary_block(mesh, dtn_bottom)
    nt = mesh.nx
    r_top = np.repeat(mesh.top_trace, nt)
    c_top = np.tile(mesh.top_trace, nt)
    r_bot = np.repeat(mesh.bottom_trace, nt)
    c_bot = np.tile(mesh.bottom_trace, nt)
    bnd = sp.coo_matrix(
        (-np.concatenate([top.ravel(), bot.ravel()]),
         (np.concatenate([r_top, r_bot]), np.concatenate([c_top, c_bot]))),
        shape=vol.shape,
    ).tocsr()
    A = (vol + bnd).tocsr()
    F = np.zeros(mesh.n_dof, dtype=complex)
    B0 = trace_matrix(mesh, 0)[0]
    F[mesh.top_trace] = -2j * beta * np.exp(-1j * beta * mesh.d) * mesh.p * B0.conj()
    return A, F


@dataclass(frozen=True)
class LinearSolve:
    x: np.ndarray
    residual: float
    condition_estimate: float


def solve(A, F, *, k: float = float("nan"), estimate_condition: bool = True) -> LinearSolve:
    """Sparse LU solve with relative residual and 1-norm condition estimate."""
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularMatrix(k) from exc
    x = lu.solve(np.asarray(F, dtype=complex))
    normF = np.linalg.norm(F)
    res = float(np.linalg.norm(A @ x - F) / (normF if normF > 0 else 1.0))
    if not np.all(np.isfinite(x)) or res > 1e-8:
        raise SingularMatrix(k)
    cond = float("nan")
    if estimate_condition:
        n = A.shape[0]
        inv = spla.LinearOperator(
            (n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="H"), dtype=complex
        )
        # one probe column keeps the estimator free of random restarts
        cond = float(spla.norm(A, 1) * spla.onenormest(inv, t=1))
    return LinearSolve(x, res, cond)


@dataclass(frozen=True)
class ScatteringSolution:
    mesh: CellMesh
    k: float
    theta: float
    field_hat: np.ndarray
    indices: np.ndarray
    top_coeffs: np.ndarray
    bottom_coeffs: np.ndarray
    scattered_top: np.ndarray
    efficiencies: dict
    reflected: float
    transmitted: float
    absorbed: float
    energy_residual: float
    residual: float
    condition_estimate: float

    @property
    def alpha_hat(self) -> float:
        return self.k * math.sin(self.theta)

    def nodal_field(self) -> np.ndarray:
        """Physical field u at every mesh node (right column repeated)."""
        uh = self.field_hat[self.mesh.dof]
        return uh * np.exp(1j * self.alpha_hat * self.mesh.nodes[:, 0])

    def summary(self) -> dict:
        return {
            "k": self.k,
            "theta": self.theta,
            "efficiencies": {str(n): e for n, e in sorted(self.efficiencies.items())},
            "reflected": self.reflected,
            "transmitted": self.transmitted,
            "absorbed": self.absorbed,
            "energy_residual": self.energy_residual,
            "residual": self.residual,
            "condition_estimate": self.condition_estimate,
            "top_coeffs": [[float(z.real), float(z.imag)] for z in self.top_coeffs],
            "bottom_coeffs": [[float(z.real), float(z.imag)] for z in self.bottom_coeffs],
            "mesh": {"nx": self.mesh.nx, "ny": self.mesh.ny, "dofs": self.mesh.n_dof},
        }


def absorption_integral(mesh: CellMesh, medium: CellMedium, field_hat: np.ndarray) -> float:
    """int Im q0 |u|^2 over the cell with the assembly quadrature."""
    xy, area, _ = _geometry(mesh)
    qp = np.einsum("qa,eak->eqk", _QUAD_BARY, xy)
    im_q = medium(qp[..., 0], qp[..., 1]).imag
    if not np.any(im_q):
        return 0.0
    vals = field_hat[mesh.dof[mesh.elements]]  # (E, 3)
    at_q = vals @ _QUAD_BARY.T
    return float(np.sum(area[:, None] * _QUAD_W * im_q * np.abs(at_q) ** 2))


def efficiencies(
    field_hat: np.ndarray,
    mesh: CellMesh,
    medium: CellMedium,
    k: float,
    theta: float,
    dtn_top: DtNOperator,
    dtn_bottom: DtNOperator,
    *,
    residual: float = float("nan"),
    condition_estimate: float = float("nan"),
) -> ScatteringSolution:
    """Rayleigh coefficients, reflection efficiencies and the flux balance.

    Fluxes are normalized by the incident flux per period; the transmitted
    part is sum_n Im(coeff_n) |u_n(b)|^2 / beta, read off the bottom map.
    """
    beta = k * math.cos(theta)
    N = dtn_top.N
    B_top = trace_matrix(mesh, N)
    top = B_top @ field_hat[mesh.top_trace]
    B_bot = trace_matrix(mesh, dtn_bottom.N)
    bot = B_bot @ field_hat[mesh.bottom_trace]
    idx = np.arange(-N, N + 1)
    scattered = top.copy()
    scattered[N] -= np.exp(-1j * beta * mesh.d)
    cover = classical_dtn(k, theta, mesh.p, N).coeffs / 1j  # beta_n
    prop = (np.abs(cover.imag) == 0) & (cover.real > 0)
    effs = {int(n): float(cover[i].real / beta * abs(scattered[i]) ** 2) for i, n in enumerate(idx) if prop[i]}
    reflected = float(sum(effs.values()))
    transmitted = float(np.sum(dtn_bottom.coeffs.imag * np.abs(bot) ** 2) / beta)
    absorbed = k * k * absorption_integral(mesh, medium, field_hat) / (mesh.p * beta)
    energy_residual = abs(1.0 - reflected - transmitted - absorbed)
    return ScatteringSolution(
        mesh, float(k), float(theta), field_hat, idx, top, bot, scattered, effs,
        reflected, transmitted, absorbed, energy_residual, residual, condition_estimate,
    )


def solve_cell(
    mesh: CellMesh,
    medium: CellMedium,
    k: float,
    theta: float,
    dtn_top: DtNOperator,
    dtn_bottom: DtNOperator,
    *,
    estimate_condition: bool = True,
) -> ScatteringSolution:
    A, F = assemble(mesh, medium, k, theta, dtn_top, dtn_bottom)
    sol = solve(A, F, k=k, estimate_condition=estimate_condition)
    return efficiencies(
        sol.x, mesh, medium, k, theta, dtn_top, dtn_bottom,
        residual=sol.residual, condition_estimate=sol.condition_estimate,
    )


def l2_error(mesh: CellMesh, field_hat: np.ndarray, exact: Callable, alpha_hat: float) -> float:
    """Relative L2 distance between the P1 field and exact(x1, x2), both physical."""
    xy, area, _ = _geometry(mesh)
    qp = np.einsum("qa,eak->eqk", _QUAD_BARY, xy)
    vals = field_hat[mesh.dof[mesh.elements]] @ _QUAD_BARY.T
    uh = vals * np.exp(1j * alpha_hat * qp[..., 0])
    ue = exact(qp[..., 0], qp[..., 1])
    w = area[:, None] * _QUAD_W
    return float(np.sqrt(np.sum(w * np.abs(uh - ue) ** 2) / np.sum(w * np.abs(ue) ** 2)))


def interpolate(mesh: CellMesh, func: Callable, alpha_hat: float) -> np.ndarray:
    """Nodal interpolant of the periodic transform of a physical field."""
    left = np.unique(mesh.dof, return_index=True)[1]
    pts = mesh.nodes[left]
    return func(pts[:, 0], pts[:, 1]) * np.exp(-1j * alpha_hat * pts[:, 0])


# -- laterally invariant oracle ------------------------------------------------

def cheb(m: int):
    """Chebyshev points x_j = cos(pi j/m) and the differentiation matrix."""
    if m == 0:
        return np.array([1.0]), np.zeros((1, 1))
    x = np.cos(np.pi * np.arange(m + 1) / m)
    c = np.ones(m + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(m + 1)
    X = np.tile(x, (m + 1, 1)).T
    dX = X - X.T
    D = np.outer(c, 1.0 / c) / (dX + np.eye(m + 1))
    D -= np.diag(D.sum(axis=1))
    return x, D


@dataclass(frozen=True)
class LateralSolution:
    indices: np.ndarray
    top: np.ndarray
    bottom: np.ndarray
    grids: list
    values: list

    def coefficient(self, n: int) -> tuple[complex, complex]:
        i = int(n - self.indices[0])
        return complex(self.top[i]), complex(self.bottom[i])


def _mode_bvp(qfun, k, a, b, d, edges, m, top_coeff, bot_coeff, rhs_top):
    x_ref, D_ref = cheb(m)
    blocks = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        x = lo + half * (1.0 - x_ref)  # descending reference points mapped to ascending x
        D = -D_ref / half
        blocks.append((x, D))
    nb = len(blocks)
    size = nb * (m + 1)
    A = np.zeros((size, size), dtype=complex)
    r = np.zeros(size, dtype=complex)
    for s, (x, D) in enumerate(blocks):
        o = s * (m + 1)
        op = D @ D + np.diag(k * k * qfun(x) - a * a)
        A[o + 1:o + m, o:o + m + 1] = op[1:m]
        if s == 0:
            A[o, o:o + m + 1] = D[0]
            A[o, o] += bot_coeff
        else:
            # derivative continuity at the left edge of block s
            pD = blocks[s - 1][1]
            po = (s - 1) * (m + 1)
            A[o, o:o + m + 1] = D[0]
            A[o, po:po + m + 1] -= pD[m]
        if s == nb - 1:
            A[o + m, o:o + m + 1] = D[m]
            A[o + m, o + m] -= top_coeff
            r[o + m] = rhs_top
        else:
            # value continuity at the right edge of block s
            A[o + m, o + m] = 1.0
            A[o + m, o + m + 1] = -1.0
    try:
        u = np.linalg.solve(A, r)
    except np.linalg.LinAlgError as exc:
        raise SingularBVP(f"collocation system singular for alpha={a}") from exc
    if not np.all(np.isfinite(u)) or np.linalg.cond(A) > 1e14:
        raise SingularBVP(f"collocation system singular for alpha={a}")
    xs = np.concatenate([x for x, _ in blocks])
    return xs, u


def solve_laterally_invariant(
    q0_of_x2,
    q: Optional[RefractiveProfile],
    k: float,
    theta: float,
    p: float,
    b: float,
    d: float,
    N: int,
    ny_1d: int = 48,
    *,
    breakpoints: Sequence[float] = (),
    dtn_top: Optional[DtNOperator] = None,
    dtn_bottom: Optional[DtNOperator] = None,
    bottom_map: str = "auto",
) -> LateralSolution:
    """Per-order two-point problems u'' + (k^2 q0 - alpha_n^2) u = 0 by Chebyshev collocation.

    ``q0_of_x2`` is a callable or a CellMedium without x1 dependence. Interior
    discontinuities must be listed in ``breakpoints`` (picked up automatically
    from layered media); each subinterval gets ``ny_1d`` + 1 points.
    """
    if isinstance(q0_of_x2, CellMedium):
        if q0_of_x2.depends_on_x1:
            raise ValueError("medium depends on x1")
        medium = q0_of_x2
        breakpoints = list(breakpoints) + medium.interfaces
        qfun = lambda x: medium(np.zeros_like(x), x)
    else:
        qfun = lambda x: np.asarray(q0_of_x2(x), dtype=complex) * np.ones_like(x)
    edges = [b, *sorted(t for t in breakpoints if b < t < d), d]
    if dtn_top is None:
        dtn_top = classical_dtn(k, theta, p, N, height=d)
    if dtn_bottom is None:
        dtn_bottom = substrate_dtn(q, k, theta, p, b, N, method=bottom_map)
    beta = k * math.cos(theta)
    idx = np.arange(-N, N + 1)
    alphas = k * math.sin(theta) + 2 * np.pi * idx / p
    tops, bots, grids, vals = [], [], [], []
    for i, n in enumerate(idx):
        rhs = -2j * beta * np.exp(-1j * beta * d) if n == 0 else 0.0
        xs, u = _mode_bvp(qfun, k, alphas[i], b, d, edges, ny_1d, dtn_top.coeffs[i], dtn_bottom.coeffs[i], rhs)
        tops.append(u[-1])
        bots.append(u[0])
        grids.append(xs)
        vals.append(u)
    return LateralSolution(idx, np.array(tops), np.array(bots), grids, vals)


# -- wavenumber scan -----------------------------------------------------------

@dataclass(frozen=True)
class ScanRow:
    k: float
    condition_estimate: float
    energy_residual: float
    solvable: bool
    spike: bool = False
    message: str = ""


def wavenumber_scan(
    mesh: CellMesh,
    medium: CellMedium,
    q: RefractiveProfile,
    theta: float,
    k_grid: Sequence[float],
    *,
    N: Optional[int] = None,
    bottom_map: str = "auto",
    spike_factor: float = 10.0,
    **dtn_kwargs,
) -> list[ScanRow]:
    """Condition estimates and energy residuals over a list of wavenumbers.

    Failures are recorded per k. A row is flagged as a spike when its
    condition estimate exceeds ``spike_factor`` times the median of its
    neighbours.
    """
    rows = []
    for k in k_grid:
        k = float(k)
        if not (k > 0 and math.isfinite(k)):
            rows.append(ScanRow(k, float("nan"), float("nan"), False, message="k must be positive and finite"))
            continue
        try:
            top = classical_dtn(k, theta, mesh.p, N, height=mesh.d)
            bot = substrate_dtn(q, k, theta, mesh.p, mesh.b, top.N, method=bottom_map, **dtn_kwargs)
            sol = solve_cell(mesh, medium, k, theta, top, bot)
            rows.append(ScanRow(k, sol.condition_estimate, sol.energy_residual, True))
        except FloquetDtNError as exc:
            rows.append(ScanRow(k, float("inf"), float("nan"), False, message=str(exc)))
    conds = np.array([r.condition_estimate for r in rows])
    out = []
    for i, r in enumerate(rows):
        nb = conds[max(0, i - 2):i][np.isfinite(conds[max(0, i - 2):i])].tolist()
        nb += conds[i + 1:i + 3][np.isfinite(conds[i + 1:i + 3])].tolist()
        spike = bool(nb) and np.isfinite(r.condition_estimate) and r.condition_estimate > spike_factor * np.median(nb)
        out.append(ScanRow(r.k, r.condition_estimate, r.energy_residual, r.solvable, bool(spike) or not r.solvable, r.message))
    return out
