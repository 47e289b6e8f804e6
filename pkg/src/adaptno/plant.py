"""Explicit first-order upwind simulator for the coupled 2x2 hyperbolic plant

    u_t + lam u_x = c1 u + c2 m,   u(0) = r m(0)
    m_t - mu  m_x = c3 u + c4 m,   m(1) = U
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DivergenceError, StabilityError
from .numerics import Grid1D, cfl_max_dt, l2_norm
from .trajectory import TrajectoryLog


@dataclass(frozen=True)
class PlantParams:
    lam: float
    mu: float
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    c4: np.ndarray
    r: float
    grid: Grid1D

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ContractError("transport speeds must be positive")
        for name in ("c1", "c2", "c3", "c4"):
            object.__setattr__(self, name, self.grid.check(getattr(self, name), name))


@dataclass(frozen=True)
class PlantState:
    u: np.ndarray
    m: np.ndarray
    t: float = 0.0


def check_cfl(lam, mu, dt, g: Grid1D):
    limit = cfl_max_dt(lam, mu, g.dx)
    if not 0 < dt <= limit * (1 + 1e-12):
        raise StabilityError(f"dt={dt} violates the CFL limit {limit} (dx={g.dx})")


def upwind_transport(u, m, lam, mu, dt, dx, src_u, src_m):
    """One explicit step of the two transport equations, interior nodes only.

    u moves right (backward differences), m moves left (forward differences).
    Boundary nodes u[0] and m[-1] are left to the caller.
    """
    un = u.copy()
    mn = m.copy()
    un[1:] = u[1:] - (lam * dt / dx) * (u[1:] - u[:-1]) + dt * src_u[1:]
    mn[:-1] = m[:-1] + (mu * dt / dx) * (m[1:] - m[:-1]) + dt * src_m[:-1]
    return un, mn


def plant_step(state: PlantState, p: PlantParams, U: float, dt: float, g: Grid1D,
               step: int | None = None) -> PlantState:
    check_cfl(p.lam, p.mu, dt, g)
    u = g.check(state.u, "u")
    m = g.check(state.m, "m")
    un, mn = upwind_transport(
        u, m, p.lam, p.mu, dt, g.dx, p.c1 * u + p.c2 * m, p.c3 * u + p.c4 * m
    )
    mn[-1] = U
    un[0] = p.r * mn[0]
    if not (np.all(np.isfinite(un)) and np.all(np.isfinite(mn))):
        raise DivergenceError(f"plant state diverged at step {step}", step=step)
    return PlantState(un, mn, state.t + dt)


def n_steps_for(T: float, dt: float) -> int:
    if T < 0:
        raise ContractError(f"horizon must be nonnegative, got {T}")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ContractError(f"horizon T={T} is not a whole number of steps dt={dt}")
    return n


def simulate(p: PlantParams, u0, m0, controller=None, T: float = 1.0, dt: float = 0.005,
             snapshot_every: int = 0) -> TrajectoryLog:
    """Run the plant under a non-adaptive control source.

    `controller` is None (zero input), a constant, or a callable
    ``controller(state) -> U``.  Adaptive sources live in
    :func:`adaptno.adaptloop.run_adaptive`.
    """
    g = p.grid
    check_cfl(p.lam, p.mu, dt, g)
    n = n_steps_for(T, dt)
    if controller is None or controller == "zero":
        ctrl = lambda s: 0.0  # noqa: E731
    elif callable(controller):
        ctrl = controller
    else:
        value = float(controller)
        ctrl = lambda s: value  # noqa: E731

    state = PlantState(g.check(u0, "u0").copy(), g.check(m0, "m0").copy(), 0.0)
    log = TrajectoryLog()
    U = 0.0
    log.append(t=0.0, norm_u=l2_norm(state.u, g), norm_m=l2_norm(state.m, g), U=U)
    for k in range(n):
        U = float(ctrl(state))
        state = plant_step(state, p, U, dt, g, step=k)
        state = replace(state, t=(k + 1) * dt)
        log.append(t=state.t, norm_u=l2_norm(state.u, g), norm_m=l2_norm(state.m, g), U=U)
        if snapshot_every and (k + 1) % snapshot_every == 0:
            log.snapshots.append({"t": np.array([state.t]), "u": state.u, "m": state.m})
    log.final = {"u": state.u, "m": state.m, "t": np.array([state.t])}
    return log
