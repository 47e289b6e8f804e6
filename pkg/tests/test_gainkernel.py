import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from adaptno.adaptloop import EstimateState
from adaptno.errors import ContractError, IterationError
from adaptno.gainkernel import (
    KernelPair,
    kernel_error,
    kernel_residual,
    kernel_residual_fields,
    solve_kernels,
    solve_kernels_fields,
)
from adaptno.numerics import Grid1D, TriGrid, reference_coeffs, sample_coeff


def const_fields(n, c1, c2, c3, c4):
    return [np.full(n, float(v)) for v in (c1, c2, c3, c4)]


def test_zero_coefficients_give_zero_kernels():
    g = Grid1D(21)
    k = solve_kernels_fields(*const_fields(21, 0, 0, 0, 0), 3.7, g, 1.0, 2.0, TriGrid(21))
    assert not k.Ku.any() and not k.Km.any()


@pytest.mark.parametrize("c1", [0.0, 1.5, -2.0])
def test_constant_diagonal_data_propagates(c1):
    g = Grid1D(41)
    tg = TriGrid(41)
    k = solve_kernels_fields(*const_fields(41, c1, 0, 2, c1), 0.0, g, 1.0, 1.0, tg)
    assert np.max(np.abs(k.Ku + 1.0)) <= 1e-6
    assert np.max(np.abs(k.Km)) <= 1e-6
    assert kernel_residual_fields(k, *const_fields(41, c1, 0, 2, c1), g, 1.0, 1.0) == pytest.approx((0, 0), abs=1e-10)


@pytest.mark.parametrize("lam,mu", [(1.0, 1.0), (1.0, 2.0), (3.0, 0.5)])
def test_exponential_growth_along_characteristics(lam, mu):
    # c2 = 0, r = 0 and constant c4 decouple Km = 0 and Ku grows by exp(g s*)
    g_rate, c3, c4 = 1.3, 2.0, 0.4
    n = 41
    grid = Grid1D(n)
    tg = TriGrid(n)
    k = solve_kernels_fields(*const_fields(n, g_rate + c4, 0, c3, c4), 0.0, grid, lam, mu, tg)
    exact = -c3 / (lam + mu) * np.exp(g_rate * (tg.x - tg.xi) / (lam + mu))
    assert np.max(np.abs(k.Ku - exact)) <= 1e-3 * np.max(np.abs(exact))
    assert np.max(np.abs(k.Km)) == 0.0


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    st.floats(-3, 3),
    st.floats(0.3, 3),
    st.floats(0.3, 3),
    st.integers(0, 1),
)
@example([0.0, 0.0, -2.0, 0.0], 3.0, 2.0, 0.375, 0)
@example([-2.0, 2.0, 2.0, 2.0], -3.0, 3.0, 0.3, 1)
def test_boundary_identities_are_exact(cs, r, lam, mu, spatial):
    grid = Grid1D(21)
    fields = [c + spatial * 0.5 * np.sin((k + 1) * grid.x) for k, c in enumerate(cs)]
    tg = TriGrid(21)
    # strong reflection (lam*r/mu up to 30) puts the float64 round-off floor of the
    # iteration far above the default tol; the identities hold at every iterate anyway
    k = solve_kernels_fields(*fields, r, grid, lam, mu, tg, tol=1e-3, max_iter=400)
    diag = -fields[2] / (lam + mu)
    assert np.allclose(k.Ku[tg.diag], diag, rtol=0, atol=1e-14)
    assert np.allclose(k.Km[tg.base], lam * r / mu * k.Ku[tg.base], rtol=1e-14, atol=1e-13)


def contraction_deltas(c, r):
    grid = Grid1D(21)
    k = solve_kernels_fields(*const_fields(21, *c), r, grid, 1.0, 1.0, TriGrid(21))
    return np.array(k.info["deltas"])


box_corners = st.tuples(
    st.sampled_from([-1.5, 1.5]), st.sampled_from([-1.5, 1.5]),
    st.sampled_from([-2.5, 2.5]), st.sampled_from([-1.5, 1.5]),
).flatmap(lambda c: st.tuples(st.just(c), st.sampled_from([-5.0, 0.0, 5.0])))


@settings(max_examples=30, deadline=None)
@given(box_corners)
def test_successive_approximation_changes_decay_after_their_peak(cr):
    # Volterra iterates behave like M^n / n!, so the change peaks, then falls monotonically
    d = contraction_deltas(*cr)
    peak = int(np.argmax(d))
    tail = d[peak:][d[peak:] > 1e-13]
    assert np.all(tail[1:] < tail[:-1])
    assert peak <= 8


@pytest.mark.xfail(strict=True, reason="changes grow for several iterations at bound-box corners")
def test_successive_approximation_contracts_after_three_iterations():
    d = contraction_deltas((1.5, 1.5, 2.5, -1.5), 5.0)
    assert np.all(d[4:] < d[3:-1])


def reference_test_fields(n=321):
    g = Grid1D(n)
    return [sample_coeff(s, g) for s in reference_coeffs((4, 0.9, 20.1, 10.1))], g


def sup_on_coarse(a, b):
    s = (b.tg.n_points - 1) // (a.tg.n_points - 1)
    i, j = a.tg.ij
    kb = b.tg.index(i * s, j * s)
    return max(np.max(np.abs(a.Ku - b.Ku[kb])), np.max(np.abs(a.Km - b.Km[kb])))


def test_residual_is_first_order():
    c, g = reference_test_fields()
    res = [max(kernel_residual_fields(solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(n)), *c, g, 1, 1))
           for n in (21, 41, 81)]
    ratios = [res[0] / res[1], res[1] / res[2]]
    assert all(1.5 <= q <= 2.6 for q in ratios), ratios


def test_solution_is_second_order():
    # trapezoid + bilinear interpolation converge one order faster than the residual
    c, g = reference_test_fields()
    sols = [solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(n)) for n in (21, 41, 81)]
    d = [sup_on_coarse(sols[0], sols[1]), sup_on_coarse(sols[1], sols[2])]
    assert 3.5 <= d[0] / d[1] <= 4.5


@pytest.mark.xfail(strict=True, reason="h=1/20 under-resolves this kernel; see decisions ledger")
def test_reference_point_h20_against_h160():
    c, g = reference_test_fields()
    coarse = solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(21))
    fine = solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(161))
    assert sup_on_coarse(coarse, fine) <= 2e-2


def test_warm_start_matches_cold_start():
    c, g = reference_test_fields(21)
    tg = TriGrid(21)
    cold = solve_kernels_fields(*c, 4.0, g, 1, 1, tg, tol=1e-12)
    near = solve_kernels_fields(*[f * 1.01 for f in c], 4.1, g, 1, 1, tg)
    warm = solve_kernels_fields(*c, 4.0, g, 1, 1, tg, tol=1e-12, init=near)
    assert max(np.max(np.abs(cold.Ku - warm.Ku)), np.max(np.abs(cold.Km - warm.Km))) < 1e-11
    assert warm.info["iterations"] < cold.info["iterations"]


def test_bound_shrinks_with_the_parameter_box():
    rng = np.random.default_rng(3)
    grid = Grid1D(21)
    tg = TriGrid(41)
    cbar = np.array([1.5, 1.5, 2.5, 1.5])
    draws = [(rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1)) for _ in range(12)]

    def kbar(scale):
        best = 0.0
        for coef, r in draws:
            # smooth fields bounded by scale * cbar
            fields = [scale * cbar[q] * (0.5 * coef[q, 0] + 0.25 * coef[q, 1] * np.cos(3 * grid.x)
                                         + 0.25 * coef[q, 2] * grid.x) for q in range(4)]
            k = solve_kernels_fields(*fields, scale * 5.0 * r, grid, 1, 1, tg)
            best = max(best, np.max(np.abs(k.Ku)), np.max(np.abs(k.Km)))
        return best

    bounds = [kbar(s) for s in (1.0, 0.5, 0.25)]
    assert bounds[0] >= bounds[1] >= bounds[2] > 0


def test_convention_agrees_for_constant_c4():
    grid = Grid1D(21)
    fields = [np.sin(grid.x), 0.3 + grid.x, np.cos(2 * grid.x), np.full(21, 0.7)]
    a = solve_kernels_fields(*fields, 1.5, grid, 1, 2, TriGrid(21), convention="x")
    b = solve_kernels_fields(*fields, 1.5, grid, 1, 2, TriGrid(21), convention="xi")
    assert np.allclose(a.Ku, b.Ku, atol=1e-12) and np.allclose(a.Km, b.Km, atol=1e-12)


def test_estimate_grid_coarser_than_triangle():
    grid = Grid1D(21)
    est = EstimateState.constant(grid, (0.5, 0.0, 2.0, 0.5), 0.0, cbar=(3,) * 4, rbar=1)
    k = solve_kernels(est, 1, 1, TriGrid(81))
    assert np.max(np.abs(k.Ku + 1.0)) <= 1e-6
    assert kernel_residual(k, est, 1, 1, TriGrid(81)) == pytest.approx((0, 0), abs=1e-10)


def test_errors():
    grid = Grid1D(21)
    c, g = reference_test_fields(21)
    with pytest.raises(IterationError) as exc:
        solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(21), max_iter=3)
    assert exc.value.residual > 0
    with pytest.raises(ContractError):
        solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(21), tol=0)
    with pytest.raises(ContractError):
        solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(21), convention="y")
    with pytest.raises(ContractError):
        solve_kernels_fields(*c, 4.0, g, -1, 1, TriGrid(21))
    with pytest.raises(ContractError):
        solve_kernels_fields(np.zeros(5), *c[1:], 4.0, grid, 1, 1, TriGrid(21))


class TestKernelError:
    def test_identical_pairs(self):
        tg = TriGrid(11)
        k = KernelPair(np.arange(tg.size, dtype=float), np.ones(tg.size), tg)
        assert kernel_error(k, k) == 0.0

    def test_constant_difference_times_area(self):
        tg = TriGrid(31)
        a = KernelPair(np.zeros(tg.size), np.zeros(tg.size), tg)
        b = KernelPair(np.full(tg.size, 0.1), np.zeros(tg.size), tg)
        assert kernel_error(a, b) == pytest.approx(0.05, abs=1e-15)

    def test_grid_mismatch(self):
        a = KernelPair(np.zeros(TriGrid(5).size), np.zeros(TriGrid(5).size), TriGrid(5))
        b = KernelPair(np.zeros(TriGrid(6).size), np.zeros(TriGrid(6).size), TriGrid(6))
        with pytest.raises(ContractError):
            kernel_error(a, b)

    def test_linear_difference(self):
        # piecewise-linear quadrature integrates x exactly: int_T x = 1/3
        tg = TriGrid(9)
        a = KernelPair(tg.x.copy(), np.zeros(tg.size), tg)
        b = KernelPair(np.zeros(tg.size), np.zeros(tg.size), tg)
        assert kernel_error(a, b) == pytest.approx(1 / 3, abs=1e-14)


def test_solver_determinism():
    c, g = reference_test_fields(21)
    a = solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(21))
    b = solve_kernels_fields(*c, 4.0, g, 1, 1, TriGrid(21))
    assert np.array_equal(a.Ku, b.Ku) and np.array_equal(a.Km, b.Km)
