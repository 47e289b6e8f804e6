import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptno.arz import (
    ArzAdaptConfig,
    ArzParams,
    c_profile,
    derive_equilibrium,
    est_vector,
    kernel_inputs,
    physical_from_riemann,
    probe_columns,
    riemann_from_physical,
    run_arz,
    sinusoidal_perturbation,
)
from adaptno.errors import ConfigError, ContractError, StabilityError
from adaptno.numerics import Grid1D

P = ArzParams()
SHORT = ArzAdaptConfig(T=15.0)


def test_reference_equilibrium():
    d = derive_equilibrium(P)
    assert d.v_star == 10.0 and d.p_star == 30.0 and d.q_star == 1200.0
    assert d.lam == 10.0 and d.mu == 20.0 and d.r0 == -2.0
    assert d.c_field[0] == pytest.approx(-1 / 60, rel=1e-15)
    assert d.scaled_speeds() == (10 / 600, 20 / 600)


def test_c_profile_shape():
    d = derive_equilibrium(P)
    c = d.c_field
    assert np.all(c < 0) and np.all(np.diff(c) > 0)
    for tau in (30.0, 60.0, 90.0):
        assert c_profile(0.0, tau, 10.0) == pytest.approx(-1 / tau)
        assert c_profile(0.0, tau, 39.9) == c_profile(0.0, tau, 10.0)


def test_free_flow_is_rejected():
    with pytest.raises(ConfigError, match="free-flow"):
        derive_equilibrium(ArzParams(rho_star=40.0))
    # gamma p* = v* exactly: the second speed vanishes
    with pytest.raises(ConfigError):
        derive_equilibrium(ArzParams(rho_star=80.0))


@pytest.mark.parametrize("kw", [dict(rho_star=170.0), dict(rho_star=0.0), dict(tau=0.0), dict(vf=-1.0)])
def test_parameter_validation(kw):
    with pytest.raises(ConfigError):
        ArzParams(**kw)


def test_zero_perturbation_maps_to_zero():
    d = derive_equilibrium(P)
    z = np.zeros(d.grid.n_points)
    u1, m1 = riemann_from_physical(z, z, d, P)
    assert not u1.any() and not m1.any()
    rho, v = physical_from_riemann(z, z, d, P)
    assert np.all(rho == 120.0) and np.all(v == 10.0)


def test_exponential_cancels_in_reconstruction():
    d = derive_equilibrium(P)
    x = d.grid.x
    rho, v = physical_from_riemann(np.exp(x / (P.tau * d.v_star)), np.zeros_like(x), d, P)
    assert np.allclose(rho - P.rho_star, P.rho_star / (P.gamma_exp * d.p_star), rtol=1e-14)
    assert np.all(v == d.v_star)


def test_stop_and_go_round_trip():
    d = derive_equilibrium(P)
    rho0, v0 = sinusoidal_perturbation(P, d)
    x = d.grid.x
    assert np.allclose(rho0, 12.0 * np.sin(3 * np.pi * x / 600.0), atol=1e-14)
    u1, m1 = riemann_from_physical(rho0, v0, d, P)
    rho, v = physical_from_riemann(u1, m1, d, P)
    assert np.allclose(rho - P.rho_star, rho0, rtol=0, atol=1e-12)
    assert np.allclose(v - d.v_star, v0, rtol=0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(40.0, 80.0))
def test_transforms_are_mutual_inverses(coef, tau):
    p = ArzParams(tau=tau)
    d = derive_equilibrium(p, 51)
    x = d.grid.x / p.L
    rho = coef[0] + coef[1] * np.sin(3 * x) + coef[2] * x**2
    v = coef[3] + coef[4] * np.cos(2 * x) + coef[5] * x
    u1, m1 = riemann_from_physical(rho, v, d, p)
    r2, v2 = physical_from_riemann(u1, m1, d, p)
    assert np.allclose(r2 - p.rho_star, rho, rtol=0, atol=1e-10)
    assert np.allclose(v2 - d.v_star, v, rtol=0, atol=1e-12)
    rr, mm = riemann_from_physical(r2 - p.rho_star, v2 - d.v_star, d, p)
    assert np.allclose(rr, u1, rtol=0, atol=1e-10) and np.allclose(mm, m1, rtol=0, atol=1e-12)


def test_inlet_flux_gives_reflection():
    d = derive_equilibrium(P)
    x = d.grid.x
    v = 0.3 * np.cos(x / 100)
    rho = 0.2 * np.sin(x / 50)
    rho[0] = -P.rho_star * v[0] / d.v_star
    u1, m1 = riemann_from_physical(rho, v, d, P)
    assert u1[0] == pytest.approx(d.r0 * m1[0], rel=1e-14)


def physical_rates(rho, v, d, p, dx):
    """Time derivatives from the linearized physical model (independent of the transforms)."""
    dp = p.gamma_exp * d.p_star / p.rho_star
    rho_x, v_x = np.gradient(rho, dx, edge_order=2), np.gradient(v, dx, edge_order=2)
    rho_t = -d.v_star * rho_x - p.rho_star * v_x
    v_t = -dp * rho_t - d.v_star * (v_x + dp * rho_x) - (dp * rho + v) / p.tau
    return rho_t, v_t


@pytest.mark.parametrize("tau", [50.0, 60.0, 70.0])
def test_riemann_system_from_physical_linearization(tau):
    p = ArzParams(tau=tau)
    errs = []
    for n in (201, 401, 801):
        d = derive_equilibrium(p, n)
        x, dx = d.grid.x, d.grid.dx
        rho = 5 * np.sin(2 * np.pi * x / p.L) + 2 * np.cos(5 * x / p.L)
        v = 0.4 * np.cos(3 * np.pi * x / p.L) - 0.1 * x / p.L
        rho_t, v_t = physical_rates(rho, v, d, p, dx)
        u1, m1 = riemann_from_physical(rho, v, d, p)
        u1_t, m1_t = riemann_from_physical(rho_t, v_t, d, p)
        ru = u1_t + d.lam * np.gradient(u1, dx, edge_order=2)
        rm = m1_t - d.mu * np.gradient(m1, dx, edge_order=2) - d.c_field * u1
        errs.append(max(np.max(np.abs(ru)), np.max(np.abs(rm))))
    # central differences: the discrete residual is O(dx^2)
    assert errs[0] < 1e-2
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_kernel_grid_helpers():
    cfg = ArzAdaptConfig()
    c = np.arange(201.0)
    assert np.array_equal(kernel_inputs(c, cfg), np.arange(0, 201, 10.0))
    v = est_vector(np.ones(21), -2.0)
    assert v.shape == (85,) and v[-1] == -2.0 and v[42:63].sum() == 21 and np.abs(v).sum() == 23
    with pytest.raises(ContractError):
        ArzAdaptConfig(n_points=200)
    with pytest.raises(ContractError):
        ArzAdaptConfig(cbar=0.0)


def test_probe_names():
    assert probe_columns((0.0, 300.0, 12.5)) == (
        "rho_at_0", "v_at_0", "rho_at_300", "v_at_300", "rho_at_12.5", "v_at_12.5")


def test_equilibrium_is_a_fixed_point():
    z = np.zeros(201)
    log = run_arz(P, "exact_adaptive", SHORT, init=(z, z))
    assert not log.column("U").any()
    assert not log.column("norm_u").any() and not log.column("norm_m").any()
    assert np.all(log.final["rho"] == P.rho_star)


@pytest.fixture(scope="module")
def adaptive_short():
    return run_arz(P, "exact_adaptive", ArzAdaptConfig(T=30.0, probes=(0.0, 300.0)))


def test_adaptive_run_invariants(adaptive_short):
    log = adaptive_short
    d = derive_equilibrium(P)
    f = log.final
    assert np.max(np.abs(f["c_hat"])) <= 0.025
    # true profile lies inside the bound for every admissible tau
    assert np.max(np.abs(c_profile(d.grid.x, 50.0, d.v_star))) <= 0.025
    assert f["u1"][0] == pytest.approx(d.r0 * f["m1"][0], rel=1e-14, abs=1e-300)
    assert len(log.timings) == len(log) - 1
    assert {"rho_at_0", "v_at_300"} <= set(log.columns)
    rho0, _ = sinusoidal_perturbation(P, d)
    assert log.column("rho_at_300")[0] == pytest.approx(P.rho_star + rho0[100])


def test_adaptive_beats_open_loop_early(adaptive_short):
    open_log = run_arz(P, "open_loop", ArzAdaptConfig(T=30.0))
    assert not open_log.column("U").any()
    a = adaptive_short.column("norm_u")[-1] + adaptive_short.column("norm_m")[-1]
    o = open_log.column("norm_u")[-1] + open_log.column("norm_m")[-1]
    assert a < o


def test_run_errors(tmp_path):
    with pytest.raises(ContractError):
        run_arz(P, "magic", SHORT)
    with pytest.raises(ContractError):
        run_arz(P, "neural_adaptive", SHORT)
    with pytest.raises(ContractError):
        run_arz(P, "open_loop", ArzAdaptConfig(T=1.0, probes=(700.0,)))
    with pytest.raises(StabilityError):
        run_arz(P, "open_loop", ArzAdaptConfig(dt=5.0))


def test_run_is_deterministic(tmp_path):
    a = run_arz(P, "exact_adaptive", SHORT)
    b = run_arz(P, "exact_adaptive", SHORT)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_reconstruction_grid_default():
    d = derive_equilibrium(P, 11)
    assert isinstance(d.grid, Grid1D) and d.grid.length == 600.0 and d.x_phys[-1] == 600.0
