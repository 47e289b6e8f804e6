"""Experiment configuration: a sectioned TOML file mapped onto frozen dataclasses.

Sections: [plant], [adapt], [kernel], [operator], [dataset], [arz], plus a
top-level ``seed``.  ``plant.lam`` and ``plant.mu`` have no defaults; every
other key does.  Unknown keys are rejected so typos cannot pass silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .adaptloop import AdaptGains, EstimateState
from .arz import ArzAdaptConfig, ArzParams
from .dataset import SamplingRanges, SimSetup
from .errors import ConfigError, ContractError
from .gainkernel import CONVENTIONS, DEFAULT_MAX_ITER, DEFAULT_TOL
from .noperator import ArchConfig, TrainConfig
from .numerics import CoeffSpec, Grid1D, TriGrid, cfl_max_dt, sample_coeff
from .plant import PlantParams


def _reference_family():
    return (
        {"kind": "chebyshev", "shape": 4.0},
        {"kind": "chebyshev", "shape": 0.9},
        {"kind": "sin_shift", "shape": 20.1},
        {"kind": "cos_scale", "shape": 10.1},
    )


@dataclass(frozen=True)
class PlantConfig:
    lam: float
    mu: float
    n_points: int = 21
    dt: float = 0.005
    T: float = 10.0
    r: float = 4.0
    coeffs: tuple = field(default_factory=_reference_family)
    u0_freq: float = 2.0
    u0_amp: float = 1.0
    m0_slope: float = 1.0


@dataclass(frozen=True)
class AdaptConfig:
    cbar: tuple[float, float, float, float] = (1.5, 1.5, 2.5, 1.5)
    rbar: float = 5.0
    gamma: float = 1.0
    gamma1: float = 10.0
    gamma2: float = 10.0
    gamma3: float = 10.0
    gamma4: float = 10.0
    gamma5: float = 200.0
    rho_gain: float = 1.0
    recompute_every: int = 1
    snapshot_every: int = 0


@dataclass(frozen=True)
class KernelConfig:
    n_points: int = 21
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    convention: str = "x"


@dataclass(frozen=True)
class OperatorConfig:
    p: int = 64
    branch_hidden: tuple[int, ...] = (256, 256)
    trunk_hidden: tuple[int, ...] = (128, 128)
    activation: str = "relu"
    separate: bool = False
    lr: float = 1e-3
    epochs: int = 600
    batch: int = 256
    split: float = 0.1
    shuffle: bool = True
    schedule: str = "constant"
    lr_final: float = 1e-5
    norm: str = "channel"
    loss: str = "mse"


@dataclass(frozen=True)
class DatasetConfig:
    sigma1: tuple[float, float] = (3.5, 4.5)
    sigma2: tuple[float, float] = (0.8, 1.0)
    sigma3: tuple[float, float] = (20.0, 21.0)
    sigma4: tuple[float, float] = (10.0, 11.0)
    r: tuple[float, float] = (2.0, 5.0)
    n_traj: int = 4
    stride: int = 4
    tau: tuple[float, float] = (50.0, 70.0)


@dataclass(frozen=True)
class ArzConfig:
    vf: float = 40.0
    rho_m: float = 160.0
    rho_star: float = 120.0
    tau: float = 60.0
    gamma_exp: float = 1.0
    L: float = 600.0
    n_points: int = 201
    kernel_points: int = 21
    dt: float = 0.15
    T: float = 300.0
    cbar: float = 0.025
    gamma: float = 1.0
    gamma3: float = 1.0
    rho_gain: float = 1.0
    probes: tuple[float, ...] = ()
    snapshot_every: int = 0


SECTIONS = {
    "plant": PlantConfig,
    "adapt": AdaptConfig,
    "kernel": KernelConfig,
    "operator": OperatorConfig,
    "dataset": DatasetConfig,
    "arz": ArzConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PlantConfig
    adapt: AdaptConfig = AdaptConfig()
    kernel: KernelConfig = KernelConfig()
    operator: OperatorConfig = OperatorConfig()
    dataset: DatasetConfig = DatasetConfig()
    arz: ArzConfig = ArzConfig()
    seed: int = 0

    # builders for the runtime objects ------------------------------------------
    def grid(self) -> Grid1D:
        return Grid1D(self.plant.n_points)

    def tri_grid(self) -> TriGrid:
        return TriGrid(self.kernel.n_points)

    def coeff_specs(self) -> list[CoeffSpec]:
        return [CoeffSpec(c["kind"], float(c.get("shape", 0.0))) for c in self.plant.coeffs]

    def plant_params(self) -> PlantParams:
        g = self.grid()
        cs = [sample_coeff(s, g) for s in self.coeff_specs()]
        return PlantParams(self.plant.lam, self.plant.mu, *cs, self.plant.r, g)

    def initial_state(self):
        x = self.grid().x
        return self.plant.u0_amp * np.sin(self.plant.u0_freq * np.pi * x), self.plant.m0_slope * x

    def gains(self) -> AdaptGains:
        a = self.adapt
        return AdaptGains(a.gamma, a.gamma1, a.gamma2, a.gamma3, a.gamma4, a.gamma5, a.rho_gain)

    def initial_estimates(self) -> EstimateState:
        return EstimateState.constant(self.grid(), cbar=self.adapt.cbar, rbar=self.adapt.rbar,
                                      gains=self.gains())

    def arch(self) -> ArchConfig:
        o = self.operator
        return ArchConfig(o.p, tuple(o.branch_hidden), tuple(o.trunk_hidden), o.activation, o.separate)

    def train_config(self) -> TrainConfig:
        o = self.operator
        return TrainConfig(lr=o.lr, epochs=o.epochs, batch=o.batch, split=o.split, seed=self.seed,
                           shuffle=o.shuffle, schedule=o.schedule, lr_final=o.lr_final,
                           norm=o.norm, loss=o.loss)

    def sampling_ranges(self) -> SamplingRanges:
        d = self.dataset
        return SamplingRanges(d.sigma1, d.sigma2, d.sigma3, d.sigma4, d.r, d.n_traj, d.stride,
                              self.seed)

    def sim_setup(self) -> SimSetup:
        p, k, a = self.plant, self.kernel, self.adapt
        return SimSetup(lam=p.lam, mu=p.mu, n_points=p.n_points, tg_points=k.n_points, dt=p.dt,
                        T=p.T, u0_freq=p.u0_freq, cbar=a.cbar, rbar=a.rbar, gains=self.gains(),
                        tol=k.tol, max_iter=k.max_iter)

    def arz_params(self) -> ArzParams:
        a = self.arz
        return ArzParams(a.vf, a.rho_m, a.rho_star, a.tau, a.gamma_exp, a.L)

    def arz_adapt(self) -> ArzAdaptConfig:
        a = self.arz
        return ArzAdaptConfig(n_points=a.n_points, kernel_points=a.kernel_points, dt=a.dt, T=a.T,
                              cbar=a.cbar, gamma=a.gamma, gamma3=a.gamma3, rho_gain=a.rho_gain,
                              tol=self.kernel.tol, max_iter=self.kernel.max_iter,
                              probes=tuple(a.probes), snapshot_every=a.snapshot_every)

    # validation and serialization ----------------------------------------------
    def validate(self) -> "ExperimentConfig":
        p = self.plant
        try:
            self.plant_params()
            self.tri_grid()
            if p.dt > cfl_max_dt(p.lam, p.mu, self.grid().dx) * (1 + 1e-12):
                raise ConfigError(f"plant.dt={p.dt} violates the CFL limit for lam={p.lam}, mu={p.mu}")
            if not p.T >= 0:
                raise ConfigError("plant.T must be nonnegative")
            if len(self.adapt.cbar) != 4 or not all(b > 0 for b in self.adapt.cbar) \
                    or not self.adapt.rbar > 0:
                raise ConfigError("adapt bounds must be positive")
            if self.adapt.recompute_every < 1:
                raise ConfigError("adapt.recompute_every must be >= 1")
            if self.kernel.convention not in CONVENTIONS:
                raise ConfigError(f"kernel.convention must be one of {CONVENTIONS}")
            self.gains()
            self.arch()
            self.train_config()
            self.sampling_ranges()
            self.arz_params()
            self.arz_adapt()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: _plain(v) for k, v in sec.items() if v is not None}
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for name, f in names.items():
        if name in data:
            v = data[name]
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kwargs[name] = v
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing mandatory key {section}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from None


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    seed = data.pop("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if "plant" not in data:
        raise ConfigError("missing [plant] section (plant.lam and plant.mu are mandatory)")
    parts = {name: _build(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()}
    coeffs = parts["plant"].coeffs
    if len(coeffs) != 4 or not all(isinstance(c, dict) and "kind" in c for c in coeffs):
        raise ConfigError("plant.coeffs must list four tables with a 'kind' key")
    return ExperimentConfig(seed=seed, **parts).validate()


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.dumps(), encoding="utf-8")
