"""Aw-Rascle-Zhang traffic model around a congested equilibrium.

Linearized and written in Riemann coordinates the model is the 2x2 plant

    u1_t + v* u1_x = 0,                 u1(0) = r0 m1(0)
    m1_t - (g p* - v*) m1_x = c(x) u1,   m1(L) = U

with c(x) = -(1/tau) exp(-x / (tau v*)) unknown (tau is hidden from the
controller) and r0 = (v* - g p*)/v*.  Internally x is scaled to [0, 1] and
the speeds divided by L, so the general plant and kernel solver are reused.
Only c is adapted; the reflection r0 is known.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptloop import project
from .errors import ConfigError, ContractError, DivergenceError
from .gainkernel import DEFAULT_MAX_ITER, DEFAULT_TOL, KernelPair, solve_kernels_fields
from .numerics import Grid1D, TriGrid, l2_norm, trapezoid
from .plant import PlantParams, PlantState, check_cfl, n_steps_for, plant_step, upwind_transport
from .trajectory import TrajectoryLog

logger = logging.getLogger(__name__)

CONTROLLERS = ("open_loop", "exact_adaptive", "neural_adaptive")


@dataclass(frozen=True)
class ArzParams:
    vf: float = 40.0
    rho_m: float = 160.0
    rho_star: float = 120.0
    tau: float = 60.0
    gamma_exp: float = 1.0
    L: float = 600.0
    c0: float | None = None

    def __post_init__(self):
        if not 0 < self.rho_star < self.rho_m:
            raise ConfigError("need 0 < rho_star < rho_m")
        if not (self.tau > 0 and self.vf > 0 and self.gamma_exp > 0 and self.L > 0):
            raise ConfigError("tau, vf, gamma and L must be positive")
        if self.c0 is None:
            object.__setattr__(self, "c0", self.vf / self.rho_m**self.gamma_exp)

    def pressure(self, rho):
        return self.c0 * np.asarray(rho, dtype=np.float64) ** self.gamma_exp

    def V(self, rho):
        return self.vf * (1.0 - (np.asarray(rho, dtype=np.float64) / self.rho_m) ** self.gamma_exp)


@dataclass(frozen=True)
class ArzDerived:
    v_star: float
    p_star: float
    q_star: float
    lam: float
    mu: float
    r0: float
    grid: Grid1D
    c_field: np.ndarray = field(compare=False)

    @property
    def x_phys(self) -> np.ndarray:
        return self.grid.x

    def scaled_speeds(self) -> tuple[float, float]:
        """(lam, mu) on the unit interval."""
        L = self.grid.length
        return self.lam / L, self.mu / L


def c_profile(x, tau, v_star):
    return -np.exp(-np.asarray(x, dtype=np.float64) / (tau * v_star)) / tau


def derive_equilibrium(p: ArzParams, n_points: int = 201) -> ArzDerived:
    g = Grid1D(n_points, p.L)
    v = float(p.V(p.rho_star))
    ps = float(p.pressure(p.rho_star))
    mu = p.gamma_exp * ps - v
    if mu <= 0 or v <= 0:
        raise ConfigError(
            f"free-flow regime unsupported: need gamma*p* > v* > 0, got p*={ps}, v*={v}")
    return ArzDerived(
        v_star=v, p_star=ps, q_star=p.rho_star * v, lam=v, mu=mu,
        r0=(v - p.gamma_exp * ps) / v, grid=g, c_field=c_profile(g.x, p.tau, v),
    )


def riemann_from_physical(rho_pert, v_pert, d: ArzDerived, p: ArzParams, g: Grid1D | None = None):
    g = g or d.grid
    rho_pert = g.check(rho_pert, "rho_pert")
    v_pert = g.check(v_pert, "v_pert")
    w = p.gamma_exp * d.p_star / p.rho_star
    u1 = np.exp(g.x / (p.tau * d.v_star)) * (v_pert + w * rho_pert)
    return u1, v_pert.copy()


def physical_from_riemann(u1, m1, d: ArzDerived, p: ArzParams, g: Grid1D | None = None):
    """Full (rho, v) fields, equilibrium plus reconstructed perturbation."""
    g = g or d.grid
    u1 = g.check(u1, "u1")
    m1 = g.check(m1, "m1")
    rho_pert = p.rho_star / (p.gamma_exp * d.p_star) * (np.exp(-g.x / (p.tau * d.v_star)) * u1 - m1)
    return p.rho_star + rho_pert, d.v_star + m1


def sinusoidal_perturbation(p: ArzParams, d: ArzDerived, amp_rho=0.1, amp_v=0.01, waves=3.0):
    """rho~ = amp_rho sin(waves pi x/L) rho*, v~ = -amp_v sin(waves pi x/L) v*."""
    s = np.sin(waves * np.pi * d.grid.x / p.L)
    return amp_rho * s * p.rho_star, -amp_v * s * d.v_star


@dataclass(frozen=True)
class ArzAdaptConfig:
    n_points: int = 201
    kernel_points: int = 21
    dt: float = 0.15
    T: float = 300.0
    cbar: float = 0.025
    gamma: float = 1.0
    gamma3: float = 1.0
    rho_gain: float = 1.0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    probes: tuple[float, ...] = ()
    snapshot_every: int = 0

    def __post_init__(self):
        if (self.n_points - 1) % (self.kernel_points - 1):
            raise ContractError("kernel grid nodes must coincide with road grid nodes")
        if not (self.cbar > 0 and self.gamma > 0 and self.gamma3 > 0 and self.rho_gain > 0):
            raise ContractError("bounds and gains must be positive")


def kernel_inputs(c_hat, cfg: ArzAdaptConfig) -> np.ndarray:
    """The estimate restricted to the kernel grid nodes."""
    step = (cfg.n_points - 1) // (cfg.kernel_points - 1)
    return np.asarray(c_hat)[::step]


def est_vector(c_k, r0) -> np.ndarray:
    """Operator input layout (c1, c2, c3, c4, r) with only c3 nonzero."""
    z = np.zeros_like(c_k)
    return np.concatenate([z, z, c_k, z, [r0]])


class ArzExactKernels:
    name = "exact"

    def __init__(self, d: ArzDerived, cfg: ArzAdaptConfig):
        self.lam, self.mu = d.scaled_speeds()
        self.r0 = d.r0
        self.tg = TriGrid(cfg.kernel_points)
        self.kg = Grid1D(cfg.kernel_points)
        self.cfg = cfg
        self._last = None

    def __call__(self, c_k) -> KernelPair:
        z = np.zeros_like(c_k)
        k = solve_kernels_fields(z, z, c_k, z, self.r0, self.kg, self.lam, self.mu, self.tg,
                                 tol=self.cfg.tol, max_iter=self.cfg.max_iter, init=self._last)
        self._last = k
        return k


class ArzNeuralKernels:
    name = "neural"

    def __init__(self, model, d: ArzDerived, cfg: ArzAdaptConfig):
        from .noperator import forward_with_basis, trunk_basis

        if model.n_s != cfg.kernel_points:
            raise ContractError(f"model expects n_s={model.n_s}, kernel grid has {cfg.kernel_points}")
        self.model, self.r0 = model, d.r0
        self.tg = TriGrid(cfg.kernel_points)
        self._fwd = forward_with_basis
        self.basis = trunk_basis(model, self.tg.points)

    def __call__(self, c_k) -> KernelPair:
        ku, km = self._fwd(self.model, est_vector(c_k, self.r0), self.basis)
        return KernelPair(ku[0], km[0], self.tg)


def probe_columns(probes) -> tuple[str, ...]:
    cols = []
    for x in probes:
        cols += [f"rho_at_{x:g}", f"v_at_{x:g}"]
    return tuple(cols)


ARZ_COLUMNS = ("t", "norm_u", "norm_m", "U", "norm_mh", "c_hat_mean", "c_err",
               "rho_rel_l2", "v_rel_l2")


def run_arz(p: ArzParams, controller: str = "exact_adaptive", cfg: ArzAdaptConfig = ArzAdaptConfig(),
            model=None, init=None) -> TrajectoryLog:
    """Simulate the linearized ARZ loop in Riemann coordinates.

    `init` optionally gives physical perturbations (rho~, v~); the default is
    the stop-and-go sinusoid.  Logged norms are L2 on the scaled road [0, 1].
    """
    if controller not in CONTROLLERS:
        raise ContractError(f"unknown ARZ controller {controller!r}")
    d = derive_equilibrium(p, cfg.n_points)
    g = Grid1D(cfg.n_points)  # scaled road
    lam, mu = d.scaled_speeds()
    check_cfl(lam, mu, cfg.dt, g)
    n = n_steps_for(cfg.T, cfg.dt)
    zero = np.zeros(g.n_points)
    plant_p = PlantParams(lam, mu, zero, zero, d.c_field, zero, d.r0, g)

    rho0, v0 = init if init is not None else sinusoidal_perturbation(p, d)
    u1, m1 = riemann_from_physical(rho0, v0, d, p)
    plant = PlantState(u1, m1, 0.0)
    mh = np.zeros(g.n_points)
    c_hat = np.zeros(g.n_points)

    source = None
    if controller == "exact_adaptive":
        source = ArzExactKernels(d, cfg)
    elif controller == "neural_adaptive":
        if model is None:
            raise ContractError("neural_adaptive needs a trained model")
        source = ArzNeuralKernels(model, d, cfg)

    probes = tuple(float(x) for x in cfg.probes)
    for x in probes:
        if not 0 <= x <= p.L:
            raise ContractError(f"probe position {x} outside the road [0, {p.L}]")
    log = TrajectoryLog(columns=ARZ_COLUMNS + probe_columns(probes))
    rho_ref = np.full(g.n_points, p.rho_star)
    v_ref = np.full(g.n_points, d.v_star)
    rho_den = l2_norm(rho_ref, g)
    v_den = l2_norm(v_ref, g)

    def record(U):
        rho, v = physical_from_riemann(plant.u, plant.m, d, p)
        row = dict(t=plant.t, norm_u=l2_norm(plant.u, g), norm_m=l2_norm(plant.m, g), U=U,
                   norm_mh=l2_norm(mh, g), c_hat_mean=trapezoid(c_hat, g),
                   c_err=l2_norm(c_hat - d.c_field, g),
                   rho_rel_l2=l2_norm(rho - rho_ref, g) / rho_den,
                   v_rel_l2=l2_norm(v - v_ref, g) / v_den)
        for x in probes:
            row[f"rho_at_{x:g}"] = np.interp(x, d.grid.x, rho)
            row[f"v_at_{x:g}"] = np.interp(x, d.grid.x, v)
        log.append(**row)
        return rho, v

    record(0.0)
    wr = np.exp(cfg.gamma * g.x)
    kern = None
    for k in range(n):
        U = 0.0
        if source is not None:
            c_k = kernel_inputs(c_hat, cfg)
            t0 = time.perf_counter()
            kern = source(c_k)
            log.timings.append(1e3 * (time.perf_counter() - t0))
            if cfg.snapshot_every and k % cfg.snapshot_every == 0:
                log.snapshots.append({"t": np.array([plant.t]), "c3h": c_k, "rh": np.array([d.r0]),
                                      "Ku": kern.Ku, "Km": kern.Km})
            ku, km = kern.row_at_one()
            M = _row_interp(kern.tg, g)
            U = trapezoid((M @ ku) * plant.u, g) + trapezoid((M @ km) * plant.m, g)
        plant = plant_step(plant, plant_p, U, cfg.dt, g, step=k)
        plant = replace(plant, t=(k + 1) * cfg.dt)
        if source is not None:
            mh = _identifier_step(mh, plant, c_hat, U, cfg, g, lam, mu)
            eps1 = plant.m - mh
            c_hat = c_hat + cfg.dt * project(cfg.gamma3 * wr * eps1 * plant.u, c_hat, cfg.cbar)
            c_hat = np.clip(c_hat, -cfg.cbar, cfg.cbar)
        record(U)
    rho, v = physical_from_riemann(plant.u, plant.m, d, p)
    log.final = {"u1": plant.u, "m1": plant.m, "mh": mh, "c_hat": c_hat, "c_true": d.c_field,
                 "rho": rho, "v": v, "t": np.array([plant.t])}
    if kern is not None:
        log.final["Ku"] = kern.Ku
        log.final["Km"] = kern.Km
    return log


def _row_interp(tg: TriGrid, g: Grid1D):
    from .numerics import interp_matrix_1d

    return interp_matrix_1d(tg.nodes_1d, g.x)


def _identifier_step(mh, plant: PlantState, c_hat, U, cfg: ArzAdaptConfig, g: Grid1D, lam, mu):
    """m1 identifier: mh_t = mu mh_x + c_hat u1 + rho_g (m1 - mh) |varpi|^2, mh(1) = U."""
    u, m = plant.u, plant.m
    inj = cfg.dt * cfg.rho_gain * (trapezoid(u * u, g) + trapezoid(m * m, g))
    _, mh_n = upwind_transport(np.zeros_like(mh), mh, lam, mu, cfg.dt, g.dx,
                               np.zeros_like(mh), c_hat * u)
    mh_n = (mh_n + inj * m) / (1.0 + inj)
    mh_n[-1] = U
    if not np.all(np.isfinite(mh_n)):
        raise DivergenceError("ARZ identifier became non-finite")
    return mh_n


def generate_arz_dataset(p: ArzParams, cfg: ArzAdaptConfig, tau_range=(50.0, 70.0), n_traj=4,
                         stride=10, seed=0, out_path=None):
    """Exact-adaptive ARZ runs over random relaxation times, harvested every `stride` steps.

    Records use the general layout (c1, c2, c3, c4, r) with c3 = c_hat on the
    kernel grid and r = r0, so the general operator and trainer apply.
    """
    from dataclasses import asdict

    from .dataset import Dataset, save_dataset

    lo, hi = (float(v) for v in tau_range)
    if not 0 < lo < hi:
        raise ContractError("tau range needs 0 < low < high")
    if n_traj < 0 or stride < 1:
        raise ContractError("n_traj must be >= 0 and stride >= 1")
    tg = TriGrid(cfg.kernel_points)
    rows, taus = [], []
    run_cfg = replace(cfg, snapshot_every=stride)
    for k in range(n_traj):
        tau = float(np.random.default_rng([seed, k]).uniform(lo, hi))
        taus.append(tau)
        logger.info("ARZ trajectory %d/%d: tau=%.4f", k + 1, n_traj, tau)
        log = run_arz(replace(p, tau=tau), "exact_adaptive", run_cfg)
        for s in log.snapshots:
            vec = est_vector(s["c3h"], s["rh"][0])
            rows.append(np.concatenate([vec, s["Ku"], s["Km"], s["t"], [float(k)]]))
    n_s = cfg.kernel_points
    rec_len = 4 * n_s + 1 + 2 * tg.size + 2
    R = np.array(rows, dtype=np.float64).reshape(len(rows), rec_len)
    n_in = 4 * n_s + 1
    meta = {"kind": "arz", "params": asdict(p), "tau_range": [lo, hi], "n_traj": n_traj,
            "stride": stride, "seed": seed, "taus": taus}
    data = Dataset(n_s, tg, R[:, :n_in], R[:, n_in:n_in + tg.size],
                   R[:, n_in + tg.size:n_in + 2 * tg.size], R[:, -2], R[:, -1], meta)
    if out_path is not None:
        save_dataset(data, out_path)
    return data, {"records": len(data), "trajectories": n_traj, "taus": taus}
