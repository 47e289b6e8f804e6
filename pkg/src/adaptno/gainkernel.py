"""Backstepping gain kernels on the triangle 0 <= xi <= x <= 1.

The kernels solve the coupled Goursat problem

    mu Ku_x = lam Ku_xi + c3(xi) Km + (c1(xi) - c4(x)) Ku
    mu Km_x = -mu Km_xi + c2(xi) Ku + (c4(xi) - c4(x)) Km
    Ku(x, x) = -c3(x) / (lam + mu),   Km(x, 0) = (lam r / mu) Ku(x, 0)

This is the form for which z = m - int Ku u - int Km m obeys
z_t = mu z_x + c4(x) z exactly.  ``convention="xi"`` instead evaluates c4 at
xi in the first row and drops the c4 terms of the second row; the two agree
whenever c4 is constant.

We integrate each row along its characteristic back to the boundary where the
data lives and iterate the resulting pair of Volterra integral equations:

    Ku(x, xi) = -c3(x0)/(lam+mu)
                + int_0^s* [(c1(xi') - c4(x')) Ku + c3(xi') Km](x', xi') ds,
    (x', xi') = (x0 + mu s, x0 - lam s),
    x0 = (lam x + mu xi)/(lam + mu),  s* = (x - xi)/(lam + mu),

    Km(x, xi) = (lam r/mu) Ku(x-xi, 0)
                + (1/mu) int_0^xi [c2(s) Ku + (c4(s) - c4(x-xi+s)) Km](x-xi+s, s) ds.

Quadrature is composite trapezoid with spatial step at most h; off-grid kernel
values come from bilinear interpolation.  Every quadrature/interpolation weight
is assembled once per (lam, mu, grid) into sparse operators, so an iteration is
two sparse mat-vecs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ContractError, DivergenceError, IterationError
from .numerics import Grid1D, TriGrid, interp_matrix_1d

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
CONVENTIONS = ("x", "xi")


@dataclass
class KernelPair:
    Ku: np.ndarray
    Km: np.ndarray
    tg: TriGrid
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.Ku = self.tg.check(self.Ku, "Ku")
        self.Km = self.tg.check(self.Km, "Km")

    def row_at_one(self) -> tuple[np.ndarray, np.ndarray]:
        """(Ku(1, xi_j), Km(1, xi_j)) on the 1-D nodes of the triangle grid."""
        r = self.tg.last_row
        return self.Ku[r], self.Km[r]


class KernelGeometry:
    """Precomputed characteristic quadrature for one (lam, mu, triangle, coefficient grid)."""

    def __init__(self, lam: float, mu: float, tg: TriGrid, coeff_grid: Grid1D):
        if not (lam > 0 and mu > 0):
            raise ContractError("transport speeds must be positive")
        if abs(coeff_grid.length - 1.0) > 1e-12:
            raise ContractError("coefficient grid must span [0, 1]")
        self.lam, self.mu, self.tg, self.coeff_grid = float(lam), float(mu), tg, coeff_grid
        h = tg.h
        cx = coeff_grid.x
        x, xi = tg.x, tg.xi
        i, j = tg.ij
        N = tg.size

        x0 = (lam * x + mu * xi) / (lam + mu)
        self.diag_interp = interp_matrix_1d(cx, x0)

        # Ku characteristics: node k gets nq[k] trapezoid intervals (nq=0 on the diagonal)
        sstar = (x - xi) / (lam + mu)
        nq = np.where(j < i, np.ceil((i - j) - 1e-9).astype(np.intp), 0)
        npts = np.where(nq > 0, nq + 1, 0)
        owner = np.repeat(np.arange(N), npts)
        start = np.concatenate([[0], np.cumsum(npts)[:-1]])
        local = np.arange(owner.size) - np.repeat(start, npts)
        nq_o = nq[owner]
        ds = sstar[owner] / np.maximum(nq_o, 1)
        s = local * ds
        wq = ds * np.where((local == 0) | (local == nq_o), 0.5, 1.0)
        xq = x0[owner] + mu * s
        xiq = x0[owner] - lam * s
        # guard round-off at the end point, which is the node itself
        end = local == nq_o
        xq[end] = x[owner[end]]
        xiq[end] = xi[owner[end]]
        self.P = tg.interp_matrix(xq, xiq)
        self.coef_interp = interp_matrix_1d(cx, np.clip(xiq, 0.0, 1.0))
        self.coef_interp_x = interp_matrix_1d(cx, np.clip(xq, 0.0, 1.0))
        self.wq = wq
        self.R_indptr = np.concatenate([[0], np.cumsum(npts)]).astype(np.int32)
        self.R_indices = np.arange(owner.size, dtype=np.int32)
        self.n_quad = owner.size

        # Km characteristics along the 45-degree line from (x - xi, 0); nodes are exact
        cnt = np.where(j > 0, j + 1, 0) + 1  # +1 for the base term
        ownk = np.repeat(np.arange(N), cnt)
        startk = np.concatenate([[0], np.cumsum(cnt)[:-1]])
        loc = np.arange(ownk.size) - np.repeat(startk, cnt)
        jj = j[ownk]
        is_base = loc == cnt[ownk] - 1
        l = np.where(is_base, 0, loc)
        src_i = i[ownk] - jj + l
        self.B_indices = tg.index(src_i, l).astype(np.int32)
        self.B_indptr = np.concatenate([[0], np.cumsum(cnt)]).astype(np.int32)
        self.B_is_base = is_base
        self.B_level = l
        self.B_xlevel = src_i
        self.B_w = np.where(is_base, 0.0, h * np.where((l == 0) | (l == jj), 0.5, 1.0))
        self.nodes_interp = interp_matrix_1d(cx, tg.nodes_1d)

    def operators(self, c1, c2, c3, c4, r, convention="x"):
        """Assemble (a, R_u, R_m, B, B_m) for one coefficient set.

        B maps Ku to Km; B_m (None under the "xi" convention) is the Km self-coupling.
        """
        N = self.tg.size
        lam, mu = self.lam, self.mu
        a = -(self.diag_interp @ c3) / (lam + mu)
        if convention == "x":
            g = self.coef_interp @ c1 - self.coef_interp_x @ c4
        else:
            g = self.coef_interp @ (c1 - c4)
        c3q = self.coef_interp @ c3
        R_u = sparse.csr_matrix((self.wq * g, self.R_indices, self.R_indptr), shape=(N, self.n_quad))
        R_m = sparse.csr_matrix((self.wq * c3q, self.R_indices, self.R_indptr), shape=(N, self.n_quad))
        c2n = self.nodes_interp @ c2
        bdata = np.where(self.B_is_base, lam * r / mu, self.B_w * c2n[self.B_level] / mu)
        B = sparse.csr_matrix((bdata, self.B_indices, self.B_indptr), shape=(N, N))
        B_m = None
        if convention == "x":
            c4n = self.nodes_interp @ c4
            mdata = self.B_w * (c4n[self.B_level] - c4n[self.B_xlevel]) / mu
            B_m = sparse.csr_matrix((mdata, self.B_indices, self.B_indptr), shape=(N, N))
        return a, R_u, R_m, B, B_m


_GEOMETRY_CACHE: dict = {}


def get_geometry(lam, mu, tg: TriGrid, coeff_grid: Grid1D) -> KernelGeometry:
    key = (float(lam), float(mu), tg.n_points, coeff_grid.n_points, coeff_grid.length)
    geo = _GEOMETRY_CACHE.get(key)
    if geo is None:
        if len(_GEOMETRY_CACHE) > 16:
            _GEOMETRY_CACHE.clear()
        geo = _GEOMETRY_CACHE[key] = KernelGeometry(lam, mu, tg, coeff_grid)
    return geo


def solve_kernels_fields(c1, c2, c3, c4, r, grid: Grid1D, lam, mu, tg: TriGrid,
                         tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                         init: KernelPair | None = None, convention: str = "x") -> KernelPair:
    """Solve the kernel equations for coefficient fields sampled on `grid`."""
    if not tol > 0:
        raise ContractError("tol must be positive")
    if convention not in CONVENTIONS:
        raise ContractError(f"unknown kernel convention {convention!r}")
    c1, c2, c3, c4 = (grid.check(c, f"c{k}") for k, c in enumerate((c1, c2, c3, c4), 1))
    geo = get_geometry(lam, mu, tg, grid)
    a, R_u, R_m, B, B_m = geo.operators(c1, c2, c3, c4, float(r), convention)
    P = geo.P

    if init is not None and init.tg == tg:
        Ku = init.Ku.copy()
    else:
        Ku = a.copy()
    Km = B @ Ku
    deltas = []
    for it in range(1, max_iter + 1):
        PK = P @ np.column_stack([Ku, Km])
        Ku_new = a + R_u @ PK[:, 0] + R_m @ PK[:, 1]
        Km_new = B @ Ku_new
        if B_m is not None:
            Km_new += B_m @ Km
        delta = max(np.max(np.abs(Ku_new - Ku)), np.max(np.abs(Km_new - Km)))
        Ku, Km = Ku_new, Km_new
        if not np.isfinite(delta):
            raise DivergenceError(f"kernel iteration produced non-finite values at iteration {it}")
        deltas.append(float(delta))
        if delta < tol:
            return KernelPair(Ku, Km, tg, info={"iterations": it, "deltas": deltas})
    raise IterationError(
        f"kernel iteration did not reach tol={tol} in {max_iter} iterations "
        f"(last change {deltas[-1]:.3e})",
        residual=deltas[-1],
    )


def solve_kernels(est, lam, mu, tg: TriGrid, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                  init: KernelPair | None = None, convention: str = "x") -> KernelPair:
    """Kernels for the current estimates `est` (an :class:`EstimateState`)."""
    return solve_kernels_fields(est.c1h, est.c2h, est.c3h, est.c4h, est.rh, est.grid,
                                lam, mu, tg, tol=tol, max_iter=max_iter, init=init,
                                convention=convention)


def kernel_residual_fields(k: KernelPair, c1, c2, c3, c4, grid: Grid1D, lam, mu,
                           convention: str = "x"):
    """Sup-norm finite-difference residuals of both kernel PDE rows at interior nodes."""
    tg = k.tg
    n = tg.n_points
    h = tg.h
    Ku = np.zeros((n, n))
    Km = np.zeros((n, n))
    i, j = tg.ij
    Ku[i, j] = k.Ku
    Km[i, j] = k.Km
    cn = [interp_matrix_1d(grid.x, tg.nodes_1d) @ grid.check(c) for c in (c1, c2, c3, c4)]
    ii, jj = np.tril_indices(n, -1)
    mask = jj >= 1
    ii, jj = ii[mask], jj[mask]
    if ii.size == 0:
        return 0.0, 0.0
    Ku_x = (Ku[ii, jj] - Ku[ii - 1, jj]) / h
    Ku_xi = (Ku[ii, jj + 1] - Ku[ii, jj]) / h
    c4x = cn[3][ii] if convention == "x" else cn[3][jj]
    res_u = (mu * Ku_x - lam * Ku_xi - cn[2][jj] * Km[ii, jj]
             - (cn[0][jj] - c4x) * Ku[ii, jj])
    Km_x = (Km[ii, jj] - Km[ii - 1, jj]) / h
    Km_xi = (Km[ii, jj] - Km[ii, jj - 1]) / h
    res_m = mu * Km_x + mu * Km_xi - cn[1][jj] * Ku[ii, jj] - (cn[3][jj] - c4x) * Km[ii, jj]
    return float(np.max(np.abs(res_u))), float(np.max(np.abs(res_m)))


def kernel_residual(k: KernelPair, est, lam, mu, tg: TriGrid | None = None, convention="x"):
    if tg is not None and tg != k.tg:
        raise ContractError("kernel pair is not on the given triangle grid")
    return kernel_residual_fields(k, est.c1h, est.c2h, est.c3h, est.c4h, est.grid, lam, mu,
                                  convention)


def kernel_error(a: KernelPair, b: KernelPair, tg: TriGrid | None = None) -> float:
    """Integral over the triangle of |dKu| + |dKm| (piecewise-linear quadrature)."""
    if a.tg != b.tg or (tg is not None and tg != a.tg):
        raise ContractError("kernel pairs live on different triangle grids")
    w = a.tg.area_weights
    return float(w @ (np.abs(a.Ku - b.Ku) + np.abs(a.Km - b.Km)))
