import numpy as np
import pytest

from twophase import parabolic_lab as pl
from twophase import shape_newton as sn
from twophase.errors import ConfigurationError
from twophase.radial_core import Conductivity

from oracles import disk_heat_series

COND = Conductivity(2.0, 1.0)


@pytest.fixture(scope="module")
def one_phase_disk():
    prob = pl.HeatProblem(pl.CAUCHY_DIRICHLET, Conductivity(1.0, 1.0), pl.RadialGeometry(0.5, h_max=2.5e-3),
                          T=1.0, t_min=1e-8)
    return pl.simulate(prob)


@pytest.fixture(scope="module")
def two_phase_disk():
    prob = pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.RadialGeometry(0.5), T=1.0, t_min=1e-6,
                          steps_per_decade=60)
    return pl.simulate(prob)


@pytest.fixture(scope="module")
def radial_mesh_field():
    mesh = sn.build_mesh(sn.extend_perturbation(sn.Perturbation.zeros(6, 0.5), sn.Perturbation.zeros(6)), 32)
    prob = pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.PlanarGeometry(mesh), T=1.0, t_min=1e-4,
                          steps_per_decade=20, time_richardson=False)
    return pl.simulate(prob)


def test_geometric_time_grid():
    t = pl.geometric_times(1e-4, 1.0, 10)
    assert t[0] == 0 and t[1] == 1e-4 and t[-1] == 1.0
    assert np.all(np.diff(t) > 0)
    assert t.size == 2 + 40
    with pytest.raises(ConfigurationError):
        pl.geometric_times(1.0, 0.5, 10)


def test_graded_nodes_contain_cluster_points():
    x = pl.graded_nodes(0.0, 1.0, [0.5, 1.0], 1e-3, 2e-2)
    assert 0.5 in x and x[0] == 0 and x[-1] == 1
    h = np.diff(x)
    assert h.max() <= 2e-2 * (1 + 1e-12) and h.min() >= 1e-3 * (1 - 1e-9)


def test_one_phase_matches_bessel_series(one_phase_disk):
    r = np.linspace(0, 1, 51)
    for t in (0.01, 0.1, 1.0):
        exact, tail = disk_heat_series(r, t)
        assert tail < 1e-12
        assert np.max(np.abs(one_phase_disk.profile(r, t) - exact)) < 5e-5


def test_maximum_principle_and_monotone_heat(two_phase_disk):
    assert two_phase_disk.max_violation <= pl.BOUND_TOL
    v = two_phase_disk.values[1:, ~two_phase_disk.fixed]
    assert v.min() >= -pl.BOUND_TOL and v.max() <= 1 + pl.BOUND_TOL
    heat = two_phase_disk.total_heat()
    assert np.all(np.diff(heat) >= -1e-12)


def test_long_time_limit_is_boundary_value():
    prob = pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.RadialGeometry(0.5, h_fine=1e-3, h_max=2e-2),
                          T=20.0, t_min=1e-4, steps_per_decade=30)
    fld = pl.simulate(prob)
    assert np.max(np.abs(fld.values[-1] - 1.0)) < 1e-8


@pytest.mark.parametrize("kind", [pl.CAUCHY, pl.CAUCHY_DIRICHLET])
def test_solution_operator_self_adjoint(kind):
    """The homogeneous solution map is symmetric in the lumped-mass inner product.

    Checked on the plain backward-Euler run; the bound limiter of the time
    extrapolation is nonlinear.
    """
    geo = pl.RadialGeometry(0.5, h_fine=0.02, h_max=0.05)

    def run(initial):
        prob = pl.HeatProblem(kind, Conductivity(2.0, 1.0, 4.0), geo, T=0.1, t_min=1e-3, steps_per_decade=10,
                              initial=initial, time_richardson=False)
        return pl.simulate(prob)

    base = run(None)
    n = base.nodes.size
    ones = np.eye(n)
    free = np.nonzero(~base.fixed)[0][::max(1, n // 12)]
    cols = {}
    for j in free:
        start = base.values[0].copy()
        start[j] += 0.5 if start[j] < 0.5 else -0.5
        cols[j] = (run(start).values[-1] - base.values[-1]) / (start[j] - base.values[0][j])
    m = base.mass
    for i in free:
        for j in free:
            assert m[i] * cols[j][i] == pytest.approx(m[j] * cols[i][j], rel=1e-9, abs=1e-15)
    assert ones.shape == (n, n)


def test_initial_data_shape_checked():
    prob = pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.RadialGeometry(0.5), initial=np.zeros(3))
    with pytest.raises(ConfigurationError):
        pl.simulate(prob)


def test_problem_validation():
    with pytest.raises(ConfigurationError):
        pl.HeatProblem("robin", COND, pl.RadialGeometry(0.5))
    with pytest.raises(ConfigurationError):
        pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.FlatGeometry())
    with pytest.raises(ConfigurationError):
        pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.RadialGeometry(1.5))


def test_box_too_small_rejected():
    prob = pl.HeatProblem(pl.CAUCHY, Conductivity(1.0, 1.0, 4.0), pl.FlatGeometry(half_width=1.0), T=1.0)
    with pytest.raises(ConfigurationError):
        prob.box_width()
    big = pl.HeatProblem(pl.CAUCHY, Conductivity(1.0, 1.0, 4.0), pl.FlatGeometry(), T=1.0)
    assert big.box_width() == pytest.approx(pl.cauchy_box_width(big.cond, 1.0))


@pytest.mark.parametrize("sigma_s,sigma_m", [(1.0, 4.0), (4.0, 1.0), (1.0, 1.0)])
def test_flat_interface_similarity_value(sigma_s, sigma_m):
    prob = pl.HeatProblem(pl.CAUCHY, Conductivity(1.0, sigma_s, sigma_m), pl.FlatGeometry(), T=1.0, t_min=1e-8)
    fld = pl.simulate(prob)
    target = pl.similarity_limit(prob.cond)
    sel = (fld.times >= 1e-4) & (fld.times <= 1)
    assert np.max(np.abs(fld.profile(0.0)[sel, 0] - target)) < 1e-3
    lim = pl.interface_limit(fld)
    assert abs(lim.estimates[0] - target) < 1e-4


def test_similarity_limit_swap_symmetry():
    a = pl.similarity_limit(Conductivity(1.0, 1.0, 4.0))
    b = pl.similarity_limit(Conductivity(1.0, 4.0, 1.0))
    assert a == pytest.approx(2 / 3) and a + b == pytest.approx(1.0)


def test_interface_limit_needs_cauchy(two_phase_disk):
    with pytest.raises(ConfigurationError):
        pl.interface_limit(two_phase_disk)


def test_decay_fit_gaussian_rate(one_phase_disk):
    fit = pl.decay_fit(one_phase_disk, 0.6, 2e-3, 1e-2)
    assert fit.slope < 0
    # u ~ B exp(-d^2 / (4 t)) at distance d = 0.4 from the boundary, up to a power-law prefactor
    assert fit.b == pytest.approx(0.4 ** 2 / 4, rel=0.3)


def test_richardson_to_zero_polynomial_in_sqrt_t():
    t = 1e-2 / 4.0 ** np.arange(4)
    vals = 0.7 + 2 * np.sqrt(t) - 3 * t + 5 * t ** 1.5
    ex = pl.richardson_to_zero(t, vals)
    assert ex.value == pytest.approx(0.7, abs=1e-13) and ex.monotone
    with pytest.raises(ConfigurationError):
        pl.richardson_to_zero([1e-2, 5e-3, 1e-3], [1, 2, 3])


def test_radial_flux_is_constant_on_circles(two_phase_disk):
    for radius in (1.0, 0.75):
        ft = pl.flux_trace(two_phase_disk, pl.Circle(radius))
        assert np.max(ft.spread) == 0.0
    outer = pl.flux_trace(two_phase_disk, pl.Circle(1.0))
    assert np.all(outer.values[1:, 0] > 0)


def test_flux_trace_requires_shell_surface(two_phase_disk):
    with pytest.raises(ConfigurationError):
        pl.flux_trace(two_phase_disk, pl.Circle(0.3))


def test_planar_radial_mesh_flux_band_limited(radial_mesh_field):
    ft = pl.flux_trace(radial_mesh_field, pl.MeshRing(1.0))
    assert np.max(ft.relative_spread()) < 1e-6
    # the mesh symmetry harmonics are present in the raw nodal flux but above the band
    assert np.max(ft.relative_spread(band=False)) > np.max(ft.relative_spread())


def test_planar_fluxes_agree_with_1d(radial_mesh_field, two_phase_disk):
    ft = pl.flux_trace(radial_mesh_field, pl.MeshRing(1.0))
    ref = pl.flux_trace(two_phase_disk, pl.Circle(1.0))
    # coarse first-order time steps on the mesh: compare where the time error is small
    i = np.argmin(np.abs(ft.times - 1e-2))
    assert ft.values[i].mean() == pytest.approx(np.interp(ft.times[i], ref.times, ref.values[:, 0]), rel=3e-2)


def test_balance_moment_of_constant_field_vanishes(two_phase_disk):
    p = np.array([0.75, 0.0])
    m = pl.balance_moment(two_phase_disk, p, p, 0.15)
    final = m.values[-1]      # the field is close to 1 at T = 1, moment of a constant is zero
    assert abs(final) < 1e-3 * np.pi * 0.15 ** 3
    assert np.max(np.abs(m.values)) > 10 * abs(final)


def test_balance_moments_agree_on_radial_mesh(radial_mesh_field):
    pts = [0.75 * np.array([np.cos(a), np.sin(a)]) for a in 2 * np.pi * np.arange(8) / 8]
    ms = [pl.balance_moment(radial_mesh_field, p, p, 0.15) for p in pts]
    assert np.max(pl.moment_spread(ms)) < 1e-10


def test_balance_moment_admissibility(two_phase_disk):
    with pytest.raises(ConfigurationError):
        pl.balance_moment(two_phase_disk, [0.75, 0.0], [1.0, 0.0], 0.3)   # leaves the domain
    with pytest.raises(ConfigurationError):
        pl.balance_moment(two_phase_disk, [0.6, 0.0], [1.0, 0.0], 0.15)   # touches the core


def test_heat_content_interior_ball_negligible(two_phase_disk):
    hc = pl.heat_content(two_phase_disk, [0.0, 0.0], 0.3)
    early = two_phase_disk.times <= 1e-3
    assert np.max(np.abs(hc.content[early])) < 1e-12
    assert hc.exponent == pytest.approx(0.75)


@pytest.mark.slow
def test_tangent_ball_content_ratio():
    prob = pl.HeatProblem(pl.CAUCHY_DIRICHLET, COND, pl.RadialGeometry(0.5, h_fine=2e-5), T=0.01, t_min=1e-9,
                          steps_per_decade=60)
    fld = pl.simulate(prob)
    a = pl.heat_content(fld, [0.8, 0.0], 0.2)
    b = pl.heat_content(fld, [0.7, 0.0], 0.3)
    ts = np.array([1.6e-3, 4e-4, 1e-4, 2.5e-5])
    ratio = np.interp(ts, fld.times, a.rescaled) / np.interp(ts, fld.times, b.rescaled)
    assert pl.richardson_to_zero(ts, ratio).value == pytest.approx(np.sqrt(7 / 12), rel=1e-3)


def test_csv_output(tmp_path, two_phase_disk):
    ft = pl.flux_trace(two_phase_disk, pl.Circle(1.0))
    ft.write_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "t,d,spread,band_spread" and len(lines) == 1 + ft.times.size


def test_osculating_ball_content_diverges(two_phase_disk):
    # B_1(0) osculates the unit circle everywhere (kappa = 1/r): the rescaled content blows up as t -> 0
    hc = pl.heat_content(two_phase_disk, [0.0, 0.0], 1.0)
    sel = (two_phase_disk.times > 1e-5) & (two_phase_disk.times < 1e-2)
    series = hc.rescaled[sel]
    assert np.all(np.diff(series) < 0)
    assert series[0] > 5 * series[-1]
