"""Passive identifier, projected update laws and the adaptive closed loop.

One step of :func:`run_adaptive` does, in order:

1. kernels from the current estimates (exact solver or learned operator),
2. U = int Ku(1,xi) uh dxi + int Km(1,xi) mh dxi,
3. plant step, 4. identifier step, 5. estimate update,

and logs norms, U, the Lyapunov diagnostic V1 and the boundary perturbation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DivergenceError
from .gainkernel import DEFAULT_MAX_ITER, DEFAULT_TOL, KernelPair, solve_kernels
from .numerics import Grid1D, TriGrid, interp_matrix_1d, l1_norm, l2_norm, trapezoid
from .plant import PlantParams, PlantState, check_cfl, n_steps_for, plant_step, upwind_transport
from .trajectory import TrajectoryLog

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptGains:
    gamma: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    gamma4: float = 1.0
    gamma5: float = 1.0
    rho_gain: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if not v > 0:
                raise ContractError(f"gain {name} must be positive, got {v}")

    @property
    def rates(self):
        return (self.gamma1, self.gamma2, self.gamma3, self.gamma4)


@dataclass(frozen=True)
class EstimateState:
    grid: Grid1D
    c1h: np.ndarray
    c2h: np.ndarray
    c3h: np.ndarray
    c4h: np.ndarray
    rh: float
    cbar: tuple[float, float, float, float]
    rbar: float
    gains: AdaptGains = AdaptGains()

    def __post_init__(self):
        for k, name in enumerate(("c1h", "c2h", "c3h", "c4h")):
            object.__setattr__(self, name, self.grid.check(getattr(self, name), name))
        if len(self.cbar) != 4 or not all(b > 0 for b in self.cbar) or not self.rbar > 0:
            raise ContractError("parameter bounds must be four positive c-bounds and a positive r-bound")

    @property
    def fields(self):
        return (self.c1h, self.c2h, self.c3h, self.c4h)

    def within_bounds(self, slack=0.0) -> bool:
        ok = all(np.max(np.abs(c)) <= b + slack for c, b in zip(self.fields, self.cbar))
        return ok and abs(self.rh) <= self.rbar + slack

    def vector(self) -> np.ndarray:
        """Flattened operator input (c1h, c2h, c3h, c4h, rh)."""
        return np.concatenate([*self.fields, [self.rh]])

    @classmethod
    def constant(cls, grid, values=(0.0, 0.0, 0.0, 0.0), rh=0.0, cbar=(1.0,) * 4, rbar=1.0,
                 gains=AdaptGains()):
        fields = [np.full(grid.n_points, float(v)) for v in values]
        return cls(grid, *fields, float(rh), tuple(float(b) for b in cbar), float(rbar), gains)


@dataclass(frozen=True)
class IdentifierState:
    uh: np.ndarray
    mh: np.ndarray


def project(tau, omega_hat, omega_bar):
    """Zero the update where the estimate sits on/after the bound and points outward.

    Works elementwise on arrays.
    """
    tau = np.asarray(tau, dtype=np.float64)
    omega_hat = np.asarray(omega_hat, dtype=np.float64)
    if np.any(np.asarray(omega_bar) <= 0):
        raise ContractError("projection bound must be positive")
    block = (np.abs(omega_hat) >= omega_bar) & (omega_hat * tau >= 0)
    out = np.where(block, 0.0, tau)
    return float(out) if out.ndim == 0 else out


def varpi_norm_sq(u, m, g: Grid1D) -> float:
    u = g.check(u, "u")
    m = g.check(m, "m")
    return trapezoid(u * u, g) + trapezoid(m * m, g)


def identifier_boundary(rh, u0, m0):
    """uh(0) = (rh m(0) + u(0) m(0)^2) / (1 + m(0)^2)."""
    return (rh * m0 + u0 * m0 * m0) / (1.0 + m0 * m0)


def identifier_step(ident: IdentifierState, plant: PlantState, est: EstimateState, U: float,
                    dt: float, g: Grid1D, lam: float, mu: float) -> IdentifierState:
    """Advance the passive identifier one explicit upwind step driven by `plant`."""
    check_cfl(lam, mu, dt, g)
    u, m = plant.u, plant.m
    uh = g.check(ident.uh, "uh")
    mh = g.check(ident.mh, "mh")
    inj = dt * est.gains.rho_gain * varpi_norm_sq(u, m, g)
    src_u = est.c1h * u + est.c2h * m
    src_m = est.c3h * u + est.c4h * m
    uh_n, mh_n = upwind_transport(uh, mh, lam, mu, dt, g.dx, src_u, src_m)
    # error injection rho*|varpi|^2*(u - uh) is stiff when the state is large: implicit
    uh_n = (uh_n + inj * u) / (1.0 + inj)
    mh_n = (mh_n + inj * m) / (1.0 + inj)
    mh_n[-1] = U
    uh_n[0] = identifier_boundary(est.rh, u[0], m[0])
    if not (np.all(np.isfinite(uh_n)) and np.all(np.isfinite(mh_n))):
        raise DivergenceError("identifier state became non-finite")
    return IdentifierState(uh_n, mh_n)


def update_estimates(est: EstimateState, plant: PlantState, ident: IdentifierState, dt: float,
                     g: Grid1D) -> EstimateState:
    """Forward-Euler step of the projected update laws, then a hard clamp to the bounds."""
    u = g.check(plant.u, "u")
    m = g.check(plant.m, "m")
    e1 = u - g.check(ident.uh, "uh")
    e2 = m - g.check(ident.mh, "mh")
    gn = est.gains
    wl = np.exp(-gn.gamma * g.x)
    wr = np.exp(gn.gamma * g.x)
    drives = (gn.gamma1 * wl * e1 * u, gn.gamma2 * wl * e1 * m,
              gn.gamma3 * wr * e2 * u, gn.gamma4 * wr * e2 * m)
    new = []
    for c, tau, bound in zip(est.fields, drives, est.cbar):
        c = c + dt * project(tau, c, bound)
        new.append(np.clip(c, -bound, bound))
    rh = est.rh + dt * project(gn.gamma5 * e1[0] * m[0], est.rh, est.rbar)
    rh = float(np.clip(rh, -est.rbar, est.rbar))
    return replace(est, c1h=new[0], c2h=new[1], c3h=new[2], c4h=new[3], rh=rh)


def lyapunov_v1(plant: PlantState, ident: IdentifierState, est: EstimateState,
                true_params: PlantParams, g: Grid1D) -> float:
    gn = est.gains
    e1 = plant.u - ident.uh
    e2 = plant.m - ident.mh
    v = trapezoid(np.exp(-gn.gamma * g.x) * e1**2, g) + trapezoid(np.exp(gn.gamma * g.x) * e2**2, g)
    truth = (true_params.c1, true_params.c2, true_params.c3, true_params.c4)
    for rate, c, ch in zip(gn.rates, truth, est.fields):
        v += trapezoid((c - ch) ** 2, g) / rate
    v += true_params.lam / (2.0 * gn.gamma5) * (true_params.r - est.rh) ** 2
    return float(v)


def _row_on_grid(k: KernelPair, g: Grid1D):
    ku, km = k.row_at_one()
    if k.tg.n_points == g.n_points:
        return ku, km
    M = interp_matrix_1d(k.tg.nodes_1d, g.x / g.length)
    return M @ ku, M @ km


def control_input(k: KernelPair, a, b, g: Grid1D) -> float:
    """int_0^1 Ku(1,xi) a(xi) dxi + int_0^1 Km(1,xi) b(xi) dxi on the plant grid."""
    ku, km = _row_on_grid(k, g)
    return trapezoid(ku * a, g) + trapezoid(km * b, g)


def gamma_perturbation(exact: KernelPair, approx: KernelPair, ident: IdentifierState,
                       g: Grid1D) -> tuple[float, float]:
    """Boundary perturbation caused by approximate kernels, and its certified bound.

    Returns (Gamma, eps*(|uh|_1 + |mh|_1)) with eps the largest kernel error
    on the x = 1 row.
    """
    if exact.tg != approx.tg:
        raise ContractError("kernel pairs live on different triangle grids")
    diff = KernelPair(approx.Ku - exact.Ku, approx.Km - exact.Km, exact.tg)
    gam = -control_input(diff, ident.uh, ident.mh, g)
    du, dm = diff.row_at_one()
    eps = max(np.max(np.abs(du)), np.max(np.abs(dm)))
    return float(gam), float(eps * (l1_norm(ident.uh, g) + l1_norm(ident.mh, g)))


class ExactKernels:
    """Kernel source backed by the characteristic fixed-point solver."""

    name = "exact"

    def __init__(self, lam, mu, tg: TriGrid, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 warm_start=True):
        self.lam, self.mu, self.tg = lam, mu, tg
        self.tol, self.max_iter, self.warm_start = tol, max_iter, warm_start
        self._last = None

    def __call__(self, est: EstimateState) -> KernelPair:
        init = self._last if self.warm_start else None
        k = solve_kernels(est, self.lam, self.mu, self.tg, self.tol, self.max_iter, init=init)
        self._last = k
        return k


LOG_COLUMNS = ("t", "norm_u", "norm_m", "U", "linf_u", "linf_m", "norm_uh", "norm_mh",
               "rh", "in_bounds", "v1", "gamma_pert", "gamma_bound")


def run_adaptive(plant_params: PlantParams, u0, m0, est0: EstimateState,
                 id0: IdentifierState | None, kernel_source, T: float, dt: float,
                 recompute_every: int = 1, reference_source=None,
                 snapshot_every: int = 0) -> TrajectoryLog:
    """Adaptive backstepping closed loop.

    `kernel_source` maps an :class:`EstimateState` to a :class:`KernelPair`.
    When `reference_source` is given (typically exact kernels beside a learned
    source) the boundary perturbation Gamma(t) and its bound are logged;
    otherwise those columns are zero.
    """
    g = plant_params.grid
    lam, mu = plant_params.lam, plant_params.mu
    check_cfl(lam, mu, dt, g)
    if recompute_every < 1:
        raise ContractError("recompute_every must be >= 1")
    if not est0.within_bounds():
        raise ContractError("initial estimates violate their bounds")
    n = n_steps_for(T, dt)

    plant = PlantState(g.check(u0, "u0").copy(), g.check(m0, "m0").copy(), 0.0)
    ident = id0 if id0 is not None else IdentifierState(np.zeros(g.n_points), np.zeros(g.n_points))
    est = est0
    log = TrajectoryLog(columns=LOG_COLUMNS)

    def record(U, gam=0.0, bound=0.0):
        log.append(t=plant.t, norm_u=l2_norm(plant.u, g), norm_m=l2_norm(plant.m, g), U=U,
                   linf_u=np.max(np.abs(plant.u)), linf_m=np.max(np.abs(plant.m)),
                   norm_uh=l2_norm(ident.uh, g), norm_mh=l2_norm(ident.mh, g), rh=est.rh,
                   in_bounds=float(est.within_bounds()),
                   v1=lyapunov_v1(plant, ident, est, plant_params, g),
                   gamma_pert=gam, gamma_bound=bound)

    def snapshot(kern):
        log.snapshots.append({"t": np.array([plant.t]), "c1h": est.c1h, "c2h": est.c2h,
                              "c3h": est.c3h, "c4h": est.c4h, "rh": np.array([est.rh]),
                              "u": plant.u, "m": plant.m, "Ku": kern.Ku, "Km": kern.Km})

    record(0.0)
    kern = None
    for k in range(n):
        if kern is None or k % recompute_every == 0:
            t0 = time.perf_counter()
            kern = kernel_source(est)
            log.timings.append(1e3 * (time.perf_counter() - t0))
        if snapshot_every and k % snapshot_every == 0:
            snapshot(kern)
        gam = bound = 0.0
        if reference_source is not None:
            gam, bound = gamma_perturbation(reference_source(est), kern, ident, g)
        U = control_input(kern, ident.uh, ident.mh, g)
        plant = plant_step(plant, plant_params, U, dt, g, step=k)
        plant = replace(plant, t=(k + 1) * dt)
        ident = identifier_step(ident, plant, est, U, dt, g, lam, mu)
        est = update_estimates(est, plant, ident, dt, g)
        record(U, gam, bound)
    log.final = {"u": plant.u, "m": plant.m, "uh": ident.uh, "mh": ident.mh,
                 "c1h": est.c1h, "c2h": est.c2h, "c3h": est.c3h, "c4h": est.c4h,
                 "rh": np.array([est.rh]), "t": np.array([plant.t])}
    if kern is not None:
        log.final["Ku"] = kern.Ku
        log.final["Km"] = kern.Km
    return log


def trajectory_deviation(run: TrajectoryLog, reference: TrajectoryLog, g: Grid1D) -> float:
    """Space-time relative L2 distance between the plant states of two runs.

    Both logs must carry a snapshot at every step (``snapshot_every=1``); the
    final states are included as the last time slice.
    """
    def states(log):
        if not log.snapshots:
            raise ContractError("trajectory_deviation needs per-step snapshots")
        us = [s["u"] for s in log.snapshots] + [log.final["u"]]
        ms = [s["m"] for s in log.snapshots] + [log.final["m"]]
        return np.array(us), np.array(ms)

    u, m = states(run)
    ur, mr = states(reference)
    if u.shape != ur.shape:
        raise ContractError(f"runs have different lengths: {u.shape[0]} vs {ur.shape[0]}")
    w = np.full(g.n_points, g.dx)
    w[[0, -1]] *= 0.5
    num = np.sum(((u - ur) ** 2 + (m - mr) ** 2) @ w)
    den = np.sum((ur**2 + mr**2) @ w)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
