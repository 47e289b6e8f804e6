"""Training pairs (estimate snapshot -> exact kernels) harvested from closed-loop runs.

KDS1 file: the shared container (see :mod:`adaptno.container`) with one
array ``records`` of shape (count, record_len).  Each row is

    c1h[0:n_s] c2h[...] c3h[...] c4h[...] rh | Ku[0:size] | Km[0:size] | t | traj_id

with ``size`` the TriGrid node count, so record k sits at a fixed byte offset.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .adaptloop import AdaptGains, EstimateState, ExactKernels, run_adaptive
from .errors import ContractError, FormatError
from .gainkernel import DEFAULT_MAX_ITER, DEFAULT_TOL
from .numerics import Grid1D, TriGrid, reference_coeffs, sample_coeff
from .plant import PlantParams

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"KDS1"


@dataclass(frozen=True)
class SamplingRanges:
    sigma1: tuple[float, float] = (3.5, 4.5)
    sigma2: tuple[float, float] = (0.8, 1.0)
    sigma3: tuple[float, float] = (20.0, 21.0)
    sigma4: tuple[float, float] = (10.0, 11.0)
    r: tuple[float, float] = (2.0, 5.0)
    n_traj: int = 4
    stride: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "sigma3", "sigma4", "r"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ContractError(f"range {name} needs low < high, got ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.n_traj < 0 or self.stride < 1:
            raise ContractError("n_traj must be >= 0 and stride >= 1")

    def draw(self, traj_id: int) -> dict[str, float]:
        """Uniform draw for one trajectory; depends only on (seed, traj_id)."""
        rng = np.random.default_rng([self.seed, traj_id])
        names = ("sigma1", "sigma2", "sigma3", "sigma4", "r")
        return {n: float(rng.uniform(*getattr(self, n))) for n in names}


@dataclass(frozen=True)
class SimSetup:
    """Closed-loop settings shared by every trajectory of a dataset."""

    lam: float = 1.0
    mu: float = 1.0
    n_points: int = 21
    tg_points: int = 21
    dt: float = 0.005
    T: float = 10.0
    u0_freq: float = 2.0
    cbar: tuple[float, float, float, float] = (1.5, 1.5, 2.5, 1.5)
    rbar: float = 5.0
    gains: AdaptGains = AdaptGains(1.0, 10.0, 10.0, 10.0, 10.0, 200.0, 1.0)
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def initial_state(self, g: Grid1D):
        """u0 = sin(freq*pi*x), m0 = x."""
        return np.sin(self.u0_freq * np.pi * g.x), g.x.copy()


@dataclass
class Dataset:
    n_s: int
    tg: TriGrid
    X: np.ndarray
    Ku: np.ndarray
    Km: np.ndarray
    t: np.ndarray
    traj: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.X)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(n, 4 * self.n_s + 1)
        self.Ku = np.asarray(self.Ku, dtype=np.float64).reshape(n, self.tg.size)
        self.Km = np.asarray(self.Km, dtype=np.float64).reshape(n, self.tg.size)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(n)
        self.traj = np.asarray(self.traj, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.n_s, self.tg, self.X[idx], self.Ku[idx], self.Km[idx],
                       self.t[idx], self.traj[idx], dict(self.meta))

    @property
    def record_len(self) -> int:
        return 4 * self.n_s + 1 + 2 * self.tg.size + 2

    def records(self) -> np.ndarray:
        return np.column_stack([self.X, self.Ku, self.Km, self.t, self.traj]) \
            if len(self) else np.zeros((0, self.record_len))

    @classmethod
    def empty(cls, n_s, tg, meta=None):
        z = np.zeros((0,))
        return cls(n_s, tg, z, z, z, z, z, meta or {})


def plant_for(draw: dict, setup: SimSetup) -> PlantParams:
    g = Grid1D(setup.n_points)
    specs = reference_coeffs((draw["sigma1"], draw["sigma2"], draw["sigma3"], draw["sigma4"]))
    return PlantParams(setup.lam, setup.mu, *(sample_coeff(s, g) for s in specs), draw["r"], g)


def trajectory_records(draw: dict, setup: SimSetup, stride: int, traj_id: int):
    """Run one exact-kernel adaptive closed loop and harvest its snapshots."""
    p = plant_for(draw, setup)
    g = p.grid
    tg = TriGrid(setup.tg_points)
    u0, m0 = setup.initial_state(g)
    est0 = EstimateState.constant(g, cbar=setup.cbar, rbar=setup.rbar, gains=setup.gains)
    src = ExactKernels(setup.lam, setup.mu, tg, setup.tol, setup.max_iter)
    log = run_adaptive(p, u0, m0, est0, None, src, setup.T, setup.dt, snapshot_every=stride)
    rows = []
    for s in log.snapshots:
        vec = np.concatenate([s["c1h"], s["c2h"], s["c3h"], s["c4h"], s["rh"]])
        rows.append(np.concatenate([vec, s["Ku"], s["Km"], s["t"], [float(traj_id)]]))
    return rows


def generate_dataset(ranges: SamplingRanges, setup: SimSetup, out_path=None) -> tuple[Dataset, dict]:
    """Build (and optionally write) a dataset; returns it with a summary dict."""
    tg = TriGrid(setup.tg_points)
    n_s = setup.n_points
    draws = [ranges.draw(k) for k in range(ranges.n_traj)]
    rows = []
    for k, d in enumerate(draws):
        logger.info("trajectory %d/%d: %s", k + 1, ranges.n_traj, d)
        rows.extend(trajectory_records(d, setup, ranges.stride, k))
    rec_len = 4 * n_s + 1 + 2 * tg.size + 2
    R = np.array(rows, dtype=np.float64).reshape(len(rows), rec_len)
    meta = {"ranges": asdict(ranges), "setup": _setup_dict(setup), "draws": draws}
    data = _from_records(R, n_s, tg, meta)
    if out_path is not None:
        save_dataset(data, out_path)
    summary = {"records": len(data), "trajectories": ranges.n_traj,
               "per_trajectory": len(rows) // ranges.n_traj if ranges.n_traj else 0,
               "draws": draws}
    return data, summary


def _setup_dict(setup: SimSetup) -> dict:
    d = asdict(setup)
    d["gains"] = asdict(setup.gains)
    return d


def _from_records(R, n_s, tg, meta) -> Dataset:
    n_in = 4 * n_s + 1
    sz = tg.size
    return Dataset(n_s, tg, R[:, :n_in], R[:, n_in:n_in + sz], R[:, n_in + sz:n_in + 2 * sz],
                   R[:, n_in + 2 * sz], R[:, n_in + 2 * sz + 1], meta)


def save_dataset(data: Dataset, path) -> int:
    desc = {
        "kind": "kernel-dataset",
        "n_s": data.n_s,
        "tg_n_points": data.tg.n_points,
        "count": len(data),
        "record_layout": ["c1h", "c2h", "c3h", "c4h", "rh", "Ku", "Km", "t", "traj_id"],
        "record_len": data.record_len,
        "meta": data.meta,
    }
    return container.write(path, DATASET_MAGIC, desc, {"records": data.records()})


def load_dataset(path) -> Dataset:
    desc, arrays = container.read(path, DATASET_MAGIC)
    try:
        n_s, n_tg, count = int(desc["n_s"]), int(desc["tg_n_points"]), int(desc["count"])
        tg = TriGrid(n_tg)
        R = arrays["records"]
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise FormatError(f"bad dataset descriptor ({exc})", offset=12) from None
    rec_len = 4 * n_s + 1 + 2 * tg.size + 2
    if R.shape != (count, rec_len):
        raise FormatError(f"records have shape {R.shape}, descriptor implies ({count}, {rec_len})",
                          offset=12)
    return _from_records(R, n_s, tg, desc.get("meta", {}))


def split(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition; the test half gets floor(fraction * N) records."""
    if not 0 < fraction < 1:
        raise ContractError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(data)
    n_test = int(np.floor(fraction * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))
