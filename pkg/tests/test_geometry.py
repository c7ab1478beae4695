import numpy as np
import pytest
from scipy.integrate import quad

from twophase.errors import ConfigurationError
from twophase.geometry import (
    CurveBoundary, RevolutionBoundary, curvatures, distance_field, exterior_moment, exterior_volume,
    fit_weingarten, flat_moment, nearest_parameter,
)


def circle_moment(r, rho):
    # exterior arc at distance s subtends pi + 2 asin(s/(2 rho)); its normal moment integrand
    # is 2 s^2 cos(asin(s/(2 rho)))
    return 2 * quad(lambda s: s * s * np.sqrt(1 - s * s / (4 * rho * rho)), 0, r, epsabs=1e-15)[0]


def circle_volume(r, rho):
    return quad(lambda s: s * (np.pi + 2 * np.arcsin(s / (2 * rho))), 0, r, epsabs=1e-15)[0]


def test_circle_curvature_and_products():
    d = curvatures(CurveBoundary.circle(2.0), 32, r=0.5)
    assert np.allclose(d.kappa, 0.5, atol=1e-12)
    assert np.allclose(d.pi_values, 1 / 0.5 - 0.5, atol=1e-12)
    assert np.allclose(d.weingarten, 0.75, atol=1e-12)


def test_ellipse_curvature_formula():
    a, b = 2.0, 1.0
    e = CurveBoundary.ellipse(a, b)
    t = np.linspace(0, 2 * np.pi, 13)
    exact = a * b / (a ** 2 * np.sin(t) ** 2 + b ** 2 * np.cos(t) ** 2) ** 1.5
    assert np.allclose(e.curvature(t), exact, atol=1e-10)
    assert e.curvature(0.0)[0] == pytest.approx(2.0, abs=1e-10)


def test_sphere_weingarten():
    d = curvatures(RevolutionBoundary.sphere(), 9)
    assert np.allclose(d.weingarten, 8.0)
    assert np.allclose(d.sum_kappa, 2.0)


def test_spheroid_curvatures_at_poles_and_equator():
    s = RevolutionBoundary(2.0, 1.0)
    k = s.principal_curvatures(np.array([1e-12, np.pi / 2]))
    # oblate spheroid: flat at the pole (both c/a^2), sharp meridian a/c^2 and parallel 1/a at the equator
    assert np.allclose(k[0], [1.0 / 4.0, 1.0 / 4.0])
    assert np.allclose(k[1], [2.0, 1.0 / 2.0])


def test_distance_field_unit_circle():
    u = CurveBoundary.circle(1.0)
    d = distance_field(u, 0.4)
    radius = np.hypot(d.x[:, 0], d.x[:, 1])
    assert np.allclose(d.delta, 1 - radius, atol=1e-13)
    assert np.allclose(d.laplacian, -1 / (1 - d.delta), atol=1e-12)
    assert np.all(np.abs(np.linalg.norm(d.grad, axis=1) - 1) < 1e-8)
    recon = d.x - d.delta[:, None] * d.grad
    assert np.max(np.abs(recon - d.foot)) < 1e-10
    assert not d.flagged.any()


def test_distance_gradient_matches_finite_differences():
    e = CurveBoundary.ellipse(2.0, 1.5)
    d = distance_field(e, 0.3, n_theta=12, n_depth=3)
    h = 1e-6
    for x, g in zip(d.x[::5], d.grad[::5]):
        fd = []
        for ax in range(2):
            step = np.zeros(2)
            step[ax] = h
            dp = distance_field(e, 0.35, points=x + step).delta[0]
            dm = distance_field(e, 0.35, points=x - step).delta[0]
            fd.append((dp - dm) / (2 * h))
        assert np.allclose(fd, g, atol=1e-7)
    recon = d.x - d.delta[:, None] * d.grad
    assert np.max(np.abs(recon - d.foot)) < 1e-10


def test_tube_width_check():
    with pytest.raises(ConfigurationError):
        distance_field(CurveBoundary.ellipse(2.0, 1.0), 0.3)


def test_nearest_parameter_converges():
    e = CurveBoundary.ellipse(2.0, 1.0)
    t, ok = nearest_parameter(e, np.array([1.5, 0.2]))
    assert ok
    y = e.point(t)[0]
    assert abs(np.dot(y - [1.5, 0.2], e.tangent(t)[0])) < 1e-12


def test_flat_moment_and_volume():
    line = CurveBoundary.from_function(lambda t: (100 * np.cos(t), 100 * np.sin(t)), n=33)
    # a very large circle approximates the flat case; the true half-plane values are the limit
    r = 0.1
    assert flat_moment(r) == pytest.approx(2 * r ** 3 / 3)
    assert exterior_moment(line, 0.0, r) == pytest.approx(circle_moment(r, 100.0), rel=1e-12)
    assert exterior_volume(line, 0.0, r) == pytest.approx(np.pi * r ** 2 / 2, rel=2e-3)
    assert flat_moment(1.0, 3) == pytest.approx(np.pi / 4)


@pytest.mark.parametrize("rho", [1.0, 2.0])
@pytest.mark.parametrize("r", [0.2, 0.1, 0.05])
def test_circle_exterior_integrals(rho, r):
    c = CurveBoundary.circle(rho)
    assert exterior_moment(c, 0.7, r) == pytest.approx(circle_moment(r, rho), rel=1e-12)
    assert exterior_volume(c, 0.7, r) == pytest.approx(circle_volume(r, rho), rel=1e-12)
    # leading behaviour pi r^2/2 + r^3/(3 rho): the exterior of a convex set is more than half the ball
    assert exterior_volume(c, 0.7, r) == pytest.approx(np.pi * r ** 2 / 2 + r ** 3 / (3 * rho), rel=r ** 2)


def test_symmetry_and_orientation():
    c = CurveBoundary.circle(1.0)
    assert exterior_volume(c, 0.1, 0.1) == pytest.approx(exterior_volume(c, 2.0, 0.1), rel=1e-12)
    rev = c.reversed()
    assert exterior_moment(rev, -0.3, 0.1) == pytest.approx(-exterior_moment(c, 0.3, 0.1), rel=1e-12)
    assert exterior_volume(rev, -0.3, 0.1) == pytest.approx(exterior_volume(c, 0.3, 0.1), rel=1e-12)
    assert np.allclose(rev.normal(-0.3), -c.normal(0.3))


@pytest.mark.parametrize("rho", [1.0, 2.0])
def test_weingarten_fit_on_circle(rho):
    fit = fit_weingarten(CurveBoundary.circle(rho), 0.4, rho * np.array([0.2, 0.1, 0.05]))
    assert fit.extrapolated == pytest.approx(3 / rho ** 2, rel=1e-4)
    assert fit.raw_estimates[-1] == pytest.approx(3 / rho ** 2, rel=3e-3)
    assert not fit.flagged


def test_moment_expansion_order():
    # relative error of the two-term expansion decays like r^2 (slope 2 in log-log)
    c = CurveBoundary.circle(1.0)
    radii = np.array([0.2, 0.1, 0.05])
    errs = []
    for r in radii:
        pred = flat_moment(r) * (1 - 3 / 40 * r ** 2)
        errs.append(abs(exterior_moment(c, 0.0, r) / pred - 1))
    slope = np.polyfit(np.log(radii), np.log(np.array(errs) / radii ** 2), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.2)


def test_ellipse_weingarten_not_constant():
    e = CurveBoundary.ellipse(2.0, 1.0)
    vals = [fit_weingarten(e, t, [0.1, 0.05, 0.025]).extrapolated for t in (0.0, np.pi / 4, np.pi / 2)]
    assert (max(vals) - min(vals)) / max(vals) > 0.2
    assert vals[0] == pytest.approx(12.0, rel=1e-3)
    assert vals[2] == pytest.approx(0.1875, rel=1e-3)


def test_csv(tmp_path):
    d = curvatures(CurveBoundary.circle(1.0), 8, r=0.5)
    d.write_csv(tmp_path / "k.csv")
    rows = (tmp_path / "k.csv").read_text().splitlines()
    assert rows[0] == "param,kappa_sum,pi,C" and len(rows) == 9
