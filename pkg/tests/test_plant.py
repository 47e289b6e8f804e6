import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptno.config import from_dict
from adaptno.errors import ContractError, DivergenceError, StabilityError
from adaptno.numerics import Grid1D
from adaptno.plant import PlantParams, PlantState, plant_step, simulate


def transport_params(n=101, lam=1.0, mu=1.0, r=0.0, c=(0.0, 0.0, 0.0, 0.0)):
    g = Grid1D(n)
    fields = [np.full(n, v) for v in c]
    return PlantParams(lam, mu, *fields, r, g)


def test_zero_state_is_an_equilibrium():
    p = transport_params(21, r=3.0, c=(1.0, -2.0, 0.5, 4.0))
    s = PlantState(np.zeros(21), np.zeros(21))
    for _ in range(20):
        s = plant_step(s, p, 0.0, 0.01, p.grid)
    assert not s.u.any() and not s.m.any()
    assert s.t == pytest.approx(0.2)


def test_pure_transport_against_characteristics():
    n, lam, dt, t_end = 101, 1.0, 0.005, 0.5
    p = transport_params(n, lam=lam)
    g = p.grid
    s = PlantState(np.sin(2 * np.pi * g.x), g.x.copy())
    for k in range(int(round(t_end / dt))):
        s = plant_step(s, p, 0.0, dt, g, step=k)
    # exact solution along characteristics, away from the inflow front
    mask = g.x >= lam * t_end + 0.1
    exact = np.sin(2 * np.pi * (g.x[mask] - lam * t_end))
    # leading-order numerical diffusion of the upwind scheme
    nu = lam * dt / g.dx
    bound = t_end * 0.5 * lam * g.dx * (1 - nu) * (2 * np.pi) ** 2
    err = np.max(np.abs(s.u[mask] - exact))
    assert err <= bound
    assert err > 0.2 * bound  # the bound is the actual error mechanism, not slack


def test_open_loop_does_not_converge():
    cfg = from_dict({"plant": {"lam": 1.0, "mu": 1.0, "n_points": 81, "dt": 0.0125 / 2}})
    p = cfg.plant_params()
    u0, m0 = cfg.initial_state()
    log = simulate(p, u0, m0, None, T=10.0, dt=cfg.plant.dt)
    total = log.column("norm_u") + log.column("norm_m")
    assert np.all(np.isfinite(total))
    assert total.min() >= 0.2 * total[0]


def test_boundary_overwrite_order():
    p = transport_params(11, r=2.0, mu=1.0)
    g = p.grid
    s = PlantState(np.zeros(11), np.zeros(11))
    s = plant_step(s, p, 7.0, g.dx, g)
    assert s.m[-1] == 7.0
    # at CFL number one the inlet value reaches the next node in one step
    assert s.m[-2] == 0.0
    s = plant_step(s, p, 7.0, g.dx, g)
    assert s.m[-2] == pytest.approx(7.0)
    assert s.u[0] == 2.0 * s.m[0]


def test_cfl_violation_is_rejected():
    p = transport_params(21)
    with pytest.raises(StabilityError):
        plant_step(PlantState(np.zeros(21), np.zeros(21)), p, 0.0, 0.06, p.grid)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_step():
    p = transport_params(21)
    u = np.zeros(21)
    u[3] = np.inf
    with pytest.raises(DivergenceError) as exc:
        plant_step(PlantState(u, np.zeros(21)), p, 0.0, 0.01, p.grid, step=17)
    assert exc.value.step == 17
    assert "17" in str(exc.value)


def test_bad_speeds_and_field_shapes():
    g = Grid1D(5)
    z = np.zeros(5)
    with pytest.raises(ContractError):
        PlantParams(0.0, 1.0, z, z, z, z, 0.0, g)
    with pytest.raises(ContractError):
        PlantParams(1.0, 1.0, np.zeros(4), z, z, z, 0.0, g)


def test_simulate_horizon_edges():
    p = transport_params(21)
    log = simulate(p, np.ones(21), np.ones(21), None, T=0.0, dt=0.01)
    assert len(log.rows) == 1
    log = simulate(p, np.zeros(21), np.zeros(21), None, T=1.0, dt=0.01)
    assert len(log.rows) == 101
    assert not np.any(log.column("norm_u")) and not np.any(log.column("U"))
    with pytest.raises(ContractError):
        simulate(p, np.zeros(21), np.zeros(21), None, T=-1.0, dt=0.01)


def test_simulate_fixed_signal_and_callable():
    p = transport_params(21)
    log = simulate(p, np.zeros(21), np.zeros(21), 0.5, T=0.1, dt=0.01)
    assert np.all(log.column("U")[1:] == 0.5)
    log = simulate(p, np.zeros(21), np.zeros(21), lambda s: s.t, T=0.1, dt=0.01)
    assert log.column("U")[2] == pytest.approx(0.01)


def test_first_order_refinement():
    def solve(n):
        p = transport_params(n, c=(0.3, -0.2, 0.1, 0.2), r=0.5)
        g = p.grid
        dt = 0.25 * g.dx
        # smooth bumps, small at both boundaries
        u0 = np.exp(-20 * (g.x - 0.5) ** 2)
        m0 = np.exp(-20 * (g.x - 0.6) ** 2)
        log = simulate(p, u0, m0, None, T=1.0, dt=dt)
        return log.final["u"], log.final["m"]

    coarse, mid, fine = solve(81), solve(161), solve(321)

    def diff(a, b):
        # compare on the coarse nodes
        s = (len(b[0]) - 1) // (len(a[0]) - 1)
        return np.sqrt(np.mean((a[0] - b[0][::s]) ** 2 + (a[1] - b[1][::s]) ** 2))

    order = np.log2(diff(coarse, mid) / diff(mid, fine))
    assert 0.7 <= order <= 1.3


@settings(max_examples=25, deadline=None)
@given(
    st.integers(5, 40),
    st.floats(0.1, 3.0),
    st.floats(0.1, 3.0),
    st.floats(0.1, 1.0),
    st.integers(0, 2**31 - 1),
)
def test_transport_maximum_principle(n, lam, mu, cfl_frac, seed):
    p = transport_params(n, lam=lam, mu=mu)
    g = p.grid
    dt = cfl_frac * g.dx / max(lam, mu)
    rng = np.random.default_rng(seed)
    s = PlantState(rng.normal(size=n), rng.normal(size=n))
    mu_max, mm_max = np.abs(s.u).max(), np.abs(s.m).max()
    for _ in range(30):
        s = plant_step(s, p, 0.0, dt, g)
        assert np.abs(s.u).max() <= mu_max + 1e-14
        assert np.abs(s.m).max() <= mm_max + 1e-14
        mu_max, mm_max = np.abs(s.u).max(), np.abs(s.m).max()


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_boundary_identity_after_every_step(r, U, seed):
    rng = np.random.default_rng(seed)
    p = transport_params(15, r=r, c=tuple(rng.uniform(-1, 1, 4)))
    s = PlantState(rng.normal(size=15), rng.normal(size=15))
    for _ in range(10):
        s = plant_step(s, p, U, 0.05, p.grid)
        assert s.u[0] == r * s.m[0]
        assert s.m[-1] == U


def test_determinism():
    cfg = from_dict({"plant": {"lam": 1.0, "mu": 1.0}})
    p = cfg.plant_params()
    u0, m0 = cfg.initial_state()
    a = simulate(p, u0, m0, None, T=1.0, dt=0.005)
    b = simulate(p, u0, m0, None, T=1.0, dt=0.005)
    assert a.rows == b.rows
    assert np.array_equal(a.final["u"], b.final["u"])
