"""Wall-clock comparison of the exact kernel solver against operator inference."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import ContractError
from .gainkernel import DEFAULT_MAX_ITER, DEFAULT_TOL, kernel_error, solve_kernels
from .noperator import NeuralKernels, forward
from .numerics import TriGrid

BENCH_SCHEMA = "adaptno-bench/1"
BENCH_COLUMNS = ("dx_kernel", "n_nodes", "solver_ms", "no_ms", "speedup", "error", "no_full_ms")


@dataclass(frozen=True)
class BenchRow:
    dx_kernel: float
    n_nodes: int
    solver_ms: float
    no_ms: float
    speedup: float
    error: float
    no_full_ms: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in BENCH_COLUMNS)


def median_ms(fn, repeats: int = 11, warmups: int = 2) -> float:
    """Median wall time of `fn()` in milliseconds (monotonic clock)."""
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(1e3 * (time.perf_counter() - t0))
    return statistics.median(samples)


def tri_grid_for(dx: float) -> TriGrid:
    n = 1.0 / dx if dx > 0 else 0.0
    if n < 1 or abs(n - round(n)) > 1e-9 * n:
        raise ContractError(f"resolution {dx} does not divide the unit interval")
    return TriGrid(int(round(n)) + 1)


def bench_kernels(model, est, resolutions, lam: float = 1.0, mu: float = 1.0,
                  tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                  repeats: int = 11, warmups: int = 2) -> list[BenchRow]:
    """One row per kernel resolution, sorted by decreasing dx.

    ``solver_ms`` is a cold (not warm-started) exact solve; ``no_ms`` is
    operator inference with the trunk basis for that grid already built, which
    mirrors the solver reusing its cached quadrature geometry.  ``no_full_ms``
    also recomputes the trunk.  Timed sections run on one BLAS thread.
    """
    if est.grid.n_points != model.n_s:
        raise ContractError(f"estimates have {est.grid.n_points} nodes, model expects {model.n_s}")
    rows = []
    vec = est.vector()
    for dx in sorted({float(d) for d in resolutions}, reverse=True):
        tg = tri_grid_for(dx)
        neural = NeuralKernels(model, tg)
        exact = solve_kernels(est, lam, mu, tg, tol, max_iter)
        err = kernel_error(exact, neural(est))
        with threadpool_limits(limits=1):
            s_ms = median_ms(lambda: solve_kernels(est, lam, mu, tg, tol, max_iter), repeats, warmups)
            n_ms = median_ms(lambda: neural(est), repeats, warmups)
            f_ms = median_ms(lambda: forward(model, vec, tg.points), repeats, warmups)
        rows.append(BenchRow(dx, tg.size, s_ms, n_ms, s_ms / n_ms, err, f_ms))
    return rows


def write_bench_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# schema: {BENCH_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([repr(v) for v in r.as_tuple()])
