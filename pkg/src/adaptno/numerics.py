"""Grids, quadrature, norms and the coefficient families used by the experiments.

Everything here is a pure function of its inputs.  Fields are plain float64
numpy arrays sampled on a node-centred :class:`Grid1D` (both endpoints stored).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import ContractError

COEFF_KINDS = ("chebyshev", "sin_shift", "cos_scale", "tabulated")


@dataclass(frozen=True)
class Grid1D:
    n_points: int
    length: float = 1.0

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ContractError(f"n_points must be an integer >= 2, got {self.n_points}")
        if not self.length > 0:
            raise ContractError(f"length must be positive, got {self.length}")

    @property
    def dx(self) -> float:
        return self.length / (self.n_points - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.n_points, dtype=np.float64) * self.dx

    def check(self, f, name="field") -> np.ndarray:
        """Return `f` as a float64 array, raising if it is not a field on this grid."""
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (self.n_points,):
            raise ContractError(
                f"{name} has shape {f.shape}, expected ({self.n_points},) for this grid"
            )
        return f


@dataclass(frozen=True)
class TriGrid:
    """Nodes (x_i, xi_j), 0 <= j <= i < n_points, on the unit triangle.

    Nodes are stored row by row: node ``k = i*(i+1)/2 + j``.
    """

    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ContractError(f"n_points must be an integer >= 2, got {self.n_points}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_points - 1)

    @property
    def size(self) -> int:
        return self.n_points * (self.n_points + 1) // 2

    @cached_property
    def ij(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = np.tril_indices(self.n_points)
        return i.astype(np.intp), j.astype(np.intp)

    @cached_property
    def x(self) -> np.ndarray:
        return self.ij[0] * self.h

    @cached_property
    def xi(self) -> np.ndarray:
        return self.ij[1] * self.h

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.x, self.xi])

    @cached_property
    def nodes_1d(self) -> np.ndarray:
        return np.arange(self.n_points, dtype=np.float64) * self.h

    def index(self, i, j):
        i = np.asarray(i)
        return i * (i + 1) // 2 + np.asarray(j)

    @cached_property
    def diag(self) -> np.ndarray:
        i = np.arange(self.n_points)
        return self.index(i, i)

    @cached_property
    def base(self) -> np.ndarray:
        i = np.arange(self.n_points)
        return self.index(i, 0)

    @cached_property
    def last_row(self) -> np.ndarray:
        """Indices of the nodes (1, xi_j), j = 0..n-1."""
        n = self.n_points - 1
        return self.index(n, np.arange(self.n_points))

    @cached_property
    def area_weights(self) -> np.ndarray:
        """Weights integrating the piecewise-linear interpolant over the triangle.

        Each cell is split into right triangles of area h^2/2; a linear function
        integrates to area times the vertex mean, so every vertex collects h^2/6.
        """
        n = self.n_points
        w = np.zeros(self.size)
        i, j = np.tril_indices(n - 1)
        tri = (self.index(i, j), self.index(i + 1, j), self.index(i + 1, j + 1))
        for v in tri:
            np.add.at(w, v, 1.0)
        keep = j < i
        tri = (self.index(i, j)[keep], self.index(i + 1, j + 1)[keep], self.index(i, j + 1)[keep])
        for v in tri:
            np.add.at(w, v, 1.0)
        return w * self.h**2 / 6.0

    def check(self, values, name="kernel") -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ContractError(f"{name} has shape {values.shape}, expected ({self.size},)")
        return values

    def interp_matrix(self, xq, xiq) -> sparse.csr_matrix:
        """Sparse matrix mapping node values to values at query points.

        Bilinear inside full square cells, barycentric on the cells cut by the
        diagonal.  Queries must lie in the closed triangle (tiny round-off above
        the diagonal is folded back onto it).
        """
        xq = np.asarray(xq, dtype=np.float64)
        xiq = np.asarray(xiq, dtype=np.float64)
        n = self.n_points
        tol = 1e-9
        if np.any(xiq < -tol) or np.any(xq > 1 + tol) or np.any(xiq > xq + tol):
            raise ContractError("query point outside the triangle 0 <= xi <= x <= 1")
        s = xq / self.h
        t = np.minimum(xiq / self.h, s)
        i = np.clip(np.floor(s).astype(np.intp), 0, n - 2)
        j = np.clip(np.floor(t).astype(np.intp), 0, n - 2)
        j = np.minimum(j, i)
        a = np.clip(s - i, 0.0, 1.0)
        b = np.clip(t - j, 0.0, 1.0)
        onsq = j < i
        b = np.where(onsq, b, np.minimum(b, a))

        rows = np.arange(xq.size)
        # square cells: 4 corners; diagonal cells: 3 corners (4th weight 0)
        c00 = self.index(i, j)
        c10 = self.index(i + 1, j)
        c11 = self.index(i + 1, j + 1)
        c01 = self.index(i, np.minimum(j + 1, i))
        w00 = np.where(onsq, (1 - a) * (1 - b), 1 - a)
        w10 = np.where(onsq, a * (1 - b), a - b)
        w11 = np.where(onsq, a * b, b)
        w01 = np.where(onsq, (1 - a) * b, 0.0)
        data = np.concatenate([w00, w10, w11, w01])
        cols = np.concatenate([c00, c10, c11, c01])
        rr = np.tile(rows, 4)
        m = sparse.csr_matrix((data, (rr, cols)), shape=(xq.size, self.size))
        m.eliminate_zeros()
        return m


def interp_matrix_1d(xs, xq) -> sparse.csr_matrix:
    """Sparse linear-interpolation matrix from samples at `xs` to points `xq`."""
    xs = np.asarray(xs, dtype=np.float64)
    xq = np.asarray(xq, dtype=np.float64)
    span = xs[-1] - xs[0]
    if np.any(xq < xs[0] - 1e-9 * span) or np.any(xq > xs[-1] + 1e-9 * span):
        raise ContractError("interpolation point outside the sampled interval")
    k = np.clip(np.searchsorted(xs, xq, side="right") - 1, 0, xs.size - 2)
    a = np.clip((xq - xs[k]) / (xs[k + 1] - xs[k]), 0.0, 1.0)
    rows = np.arange(xq.size)
    m = sparse.csr_matrix(
        (np.concatenate([1 - a, a]), (np.tile(rows, 2), np.concatenate([k, k + 1]))),
        shape=(xq.size, xs.size),
    )
    m.eliminate_zeros()
    return m


def trapezoid(f, g: Grid1D) -> float:
    """Composite trapezoid rule of the samples `f` on `g`."""
    f = g.check(f)
    return float(g.dx * (f.sum() - 0.5 * (f[0] + f[-1])))


def l2_norm(f, g: Grid1D) -> float:
    f = g.check(f)
    return float(np.sqrt(trapezoid(f * f, g)))


def l1_norm(f, g: Grid1D) -> float:
    return trapezoid(np.abs(g.check(f)), g)


def cfl_max_dt(lam: float, mu: float, dx: float) -> float:
    """Largest time step the explicit upwind stepper accepts."""
    for name, v in (("lambda", lam), ("mu", mu), ("dx", dx)):
        if not v > 0:
            raise ContractError(f"{name} must be positive, got {v}")
    return dx / max(lam, mu)


@dataclass(frozen=True)
class CoeffSpec:
    """One member of the coefficient families.

    chebyshev: cos(shape*arccos x); sin_shift: sin(1 - shape*x) + 1;
    cos_scale: cos(shape*x); tabulated: `table` used as is.
    """

    kind: str
    shape: float = 0.0
    table: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in COEFF_KINDS:
            raise ContractError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "tabulated" and self.table is None:
            raise ContractError("tabulated coefficient needs a table")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "chebyshev":
            if np.any(np.abs(x) > 1.0):
                raise ContractError("chebyshev coefficient evaluated outside [-1, 1]")
            return np.cos(self.shape * np.arccos(x))
        if self.kind == "sin_shift":
            return np.sin(1.0 - self.shape * x) + 1.0
        if self.kind == "cos_scale":
            return np.cos(self.shape * x)
        raise ContractError("tabulated coefficients have no closed form; use sample_coeff")


def sample_coeff(spec: CoeffSpec, g: Grid1D) -> np.ndarray:
    if spec.kind == "tabulated":
        return g.check(spec.table, "coefficient table").copy()
    return spec(g.x)


def reference_coeffs(sigma) -> tuple[CoeffSpec, CoeffSpec, CoeffSpec, CoeffSpec]:
    """The four-member family (c1..c4) indexed by shape parameters sigma1..sigma4."""
    s1, s2, s3, s4 = (float(s) for s in sigma)
    return (
        CoeffSpec("chebyshev", s1),
        CoeffSpec("chebyshev", s2),
        CoeffSpec("sin_shift", s3),
        CoeffSpec("cos_scale", s4),
    )
