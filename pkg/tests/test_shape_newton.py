import numpy as np
import pytest

from twophase import shape_newton as sn
from twophase.errors import (
    DivergenceError, JacobianNotInvertible, MeshQualityError, PerturbationTooLarge,
)
from twophase.radial_core import (
    Conductivity, EllipticParams, RadialConfig, closed_form_torsion, solve_base_radial,
)

COND = Conductivity(2.0, 1.0)
PARAMS = EllipticParams()
ZERO_F = sn.Perturbation.zeros(6, 0.5)
ZERO_G = sn.Perturbation.zeros(6)


@pytest.fixture(scope="module")
def derivs():
    return sn.modal_derivatives(COND, PARAMS)


@pytest.fixture(scope="module")
def base_field():
    mesh = sn.build_mesh(sn.extend_perturbation(ZERO_F, ZERO_G), 48)
    return sn.solve_transmission(mesh, COND, PARAMS)


def test_perturbation_evaluation_and_mean():
    p = sn.Perturbation([0.0, 0.3], [0.1, 0.0])
    t = np.linspace(0, 2 * np.pi, 7)
    assert np.allclose(p(t), 0.3 * np.cos(2 * t) + 0.1 * np.sin(t))
    assert np.allclose(p(t, 1), -0.6 * np.sin(2 * t) + 0.1 * np.cos(t))
    grid = 2 * np.pi * np.arange(64) / 64
    assert abs(np.mean(p(grid))) < 1e-15
    assert np.allclose(sn.Perturbation.from_vector(p.vector()).vector(), p.vector())


def test_identity_extension():
    dmap = sn.extend_perturbation(ZERO_F, ZERO_G)
    r = np.linspace(0, 1, 11)
    assert np.all(dmap.displacement(r, 0.3 * np.ones_like(r)) == 0)


def test_outer_only_extension():
    g = sn.Perturbation.single(2, 0.01, 2)
    dmap = sn.extend_perturbation(sn.Perturbation.zeros(2, 0.5), g)
    t = np.linspace(0, 2 * np.pi, 9)
    assert np.allclose(dmap.displacement(np.ones_like(t), t), 0.01 * np.cos(2 * t))
    assert np.allclose(dmap.displacement(0.5 * np.ones_like(t), t), 0.0)


def test_bijectivity_sweep_threshold():
    eps = np.round(np.arange(0.01, 0.301, 0.01), 2)
    first = sn.bijectivity_sweep(eps)
    crit = sn.critical_amplitude()
    assert crit == pytest.approx(0.5 / 1.875)
    assert first == pytest.approx(0.27)
    assert first - 0.01 < crit < first


def test_too_large_rejected():
    with pytest.raises(PerturbationTooLarge):
        sn.extend_perturbation(ZERO_F, sn.Perturbation.single(2, 0.3, 6))


def test_mesh_fitted_to_perturbed_interface():
    f = sn.Perturbation.single(3, 0.05, 6, 0.5)
    mesh = sn.build_mesh(sn.extend_perturbation(f, ZERO_G), 24)
    th = mesh.ref_theta[mesh.interface_nodes]
    assert np.allclose(np.hypot(*mesh.points[mesh.interface_nodes].T), 0.5 + 0.05 * np.cos(3 * th))
    assert mesh.euler_characteristic() == 1


def test_mesh_quality_floor():
    g = sn.Perturbation.single(2, 0.2, 6)
    dmap = sn.extend_perturbation(ZERO_F, g)
    with pytest.raises(MeshQualityError) as info:
        sn.build_mesh(dmap, 24, min_angle=25.0)
    assert info.value.region.shape[1] == 2


def test_unperturbed_matches_closed_form(base_field):
    mesh = base_field.mesh
    err = np.max(np.abs(base_field.values - closed_form_torsion(mesh.ref_r, 0.5, 2.0, 1.0)))
    assert err < 5e-5
    assert base_field.lambda_serrin == pytest.approx(0.5, rel=1e-3)


def test_one_phase_equals_uniform_conductivity():
    mesh = sn.build_mesh(sn.extend_perturbation(ZERO_F, sn.Perturbation.single(2, 0.02, 6)), 24)
    a = sn.solve_transmission(mesh, Conductivity(1.0, 1.0), PARAMS)
    from twophase import fem
    asm = fem.assemble(mesh, 1.0, 1.0)
    u = fem.solve_dirichlet(asm.stiffness, asm.load, mesh.outer_nodes, 0.0)
    assert np.max(np.abs(a.values - u)) < 1e-12


def test_beta_one_matches_radial():
    params = EllipticParams(beta=1.0)
    rad = solve_base_radial(params, COND, RadialConfig.uniform(0.5, 1025))
    errs = []
    for res in (24, 48):
        mesh = sn.build_mesh(sn.extend_perturbation(ZERO_F, ZERO_G), res)
        fld = sn.solve_transmission(mesh, COND, params)
        errs.append(np.max(np.abs(fld.values - rad(mesh.ref_r))))
    assert errs[1] < 1e-4 and errs[0] / errs[1] > 3.0


def test_normalized_shell_same_solution_up_to_scale():
    mesh = sn.build_mesh(sn.extend_perturbation(ZERO_F, ZERO_G), 16)
    cond = Conductivity(4.0, 2.0)
    a = sn.solve_transmission(mesh, cond, PARAMS)
    b = sn.solve_transmission(mesh, cond, PARAMS, normalize_shell=True)
    assert np.allclose(a.values, b.values, atol=1e-13)


def test_radial_residual_vanishes(base_field):
    res = sn.residual(base_field)
    assert res.sup_norm < 1e-12
    assert abs(res.mean) < 1e-12


def test_outer_mode_two_residual():
    mesh = sn.build_mesh(sn.extend_perturbation(ZERO_F, sn.Perturbation.single(2, 0.01, 6)), 48)
    res = sn.residual(sn.solve_transmission(mesh, COND, PARAMS))
    assert abs(res.mean) < 1e-12
    others = np.concatenate([np.delete(res.cos, 1), res.sin])
    assert abs(res.cos[1]) > 20 * np.max(np.abs(others))


def test_frozen_jacobian_algebra(derivs):
    assert derivs[0] == pytest.approx(-1 / 11, abs=1e-9)
    res = sn.Residual(np.zeros(1), np.zeros(1), 0.0, np.zeros(6), np.zeros(6), 0.0, 0.0)
    assert np.all(sn.apply_inverse_frozen_jacobian(res, derivs).vector() == 0)
    rho = 0.37
    pure = sn.Residual(np.zeros(1), np.zeros(1), 0.0, np.eye(6)[1] * rho, np.zeros(6), 0.0, 0.0)
    assert sn.apply_inverse_frozen_jacobian(pure, derivs).cos[1] == pytest.approx(rho / derivs[1])
    rng = np.random.default_rng(3)
    f = sn.Perturbation(rng.normal(size=6), rng.normal(size=6))
    fwd = sn.apply_frozen_jacobian(f, derivs)
    back = sn.apply_inverse_frozen_jacobian(fwd, derivs)
    assert np.max(np.abs(back.vector() - f.vector())) < 1e-12


def test_flagged_mode_not_invertible():
    res = sn.Residual(np.zeros(1), np.zeros(1), 0.0, np.ones(3), np.zeros(3), 0.0, 0.0)
    with pytest.raises(JacobianNotInvertible):
        sn.apply_inverse_frozen_jacobian(res, np.zeros(3))


def test_newton_zero_outer_perturbation(derivs):
    f, rep = sn.newton_solve(ZERO_G, COND, PARAMS, sn.NewtonOptions(resolution=32), modal_derivs=derivs)
    assert rep.converged and rep.iterations <= 1
    assert np.all(np.abs(f.vector()) < 1e-12)


def test_newton_one_phase_rejected():
    with pytest.raises(Exception):
        sn.newton_solve(sn.Perturbation.single(2, 0.01, 6), Conductivity(1.0, 1.0), PARAMS)


def test_newton_divergence_reported(monkeypatch, derivs):
    calls = {"n": 0}
    real = sn.evaluate_psi

    def growing(f, g, cond, params, opts):
        res, fld = real(f, g, cond, params, opts)
        calls["n"] += 1
        # residual grows geometrically but stays tiny, so the iterate remains a valid map
        scale = 1e-5 * 2.0 ** calls["n"]
        return sn.Residual(res.theta, res.values, res.mean, np.eye(6)[1] * scale, np.zeros(6), scale, scale), fld

    monkeypatch.setattr(sn, "evaluate_psi", growing)
    with pytest.raises(DivergenceError) as info:
        sn.newton_solve(sn.Perturbation.single(2, 0.01, 6), COND, PARAMS, sn.NewtonOptions(resolution=16),
                        modal_derivs=derivs)
    assert len(info.value.report.residual_history) >= 4


def test_newton_counterexample_small(derivs):
    g = sn.Perturbation.single(2, 0.005, 6)
    f, rep = sn.newton_solve(g, COND, PARAMS, sn.NewtonOptions(resolution=32), modal_derivs=derivs)
    assert rep.converged and rep.iterations <= 10
    assert abs(f.cos[1]) > 10 * np.max(np.abs(np.delete(f.vector(), 1)))
    # the interface is genuinely non-circular
    assert abs(f.cos[1]) > 1e-3


def test_frozen_update_contracts(derivs):
    g = sn.Perturbation.single(2, 0.005, 6)
    opts = sn.NewtonOptions(resolution=32, update="frozen", max_iter=12)
    f, rep = sn.newton_solve(g, COND, PARAMS, opts, modal_derivs=derivs)
    assert rep.converged
    assert max(rep.contraction) < 0.5


def test_shape_derivative_zero(base_field):
    du = sn.shape_derivative_direct(ZERO_F, base_field)
    assert np.all(du.values_shell == 0) and np.all(du.flux == 0)


def test_shape_derivative_modal_agreement_and_decoupling(base_field, derivs):
    for k in (2, 4):
        du = sn.shape_derivative_direct(sn.Perturbation.single(k, 1.0, 6, 0.5), base_field)
        pred = derivs[k - 1] * np.cos(k * du.theta)
        rel = np.sqrt(np.mean((du.flux - pred) ** 2) / np.mean(pred ** 2))
        assert rel < 2e-3
        mean, a, b = sn.modal_projection(du.theta, du.flux, 6)
        leak = np.max(np.abs(np.concatenate([np.delete(a, k - 1), b])))
        assert leak < 1e-3 * abs(a[k - 1])


def test_material_derivative_first_order():
    gaps = sn.material_derivative_gap(sn.Perturbation.single(2, 1.0, 6, 0.5), COND, PARAMS, resolution=32)
    assert gaps[0] / gaps[1] == pytest.approx(2.0, abs=0.2)


def test_outputs(tmp_path, base_field):
    res = sn.residual(base_field)
    sn.write_boundary_csv(base_field, tmp_path / "b.csv", res.values)
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "theta,x,y,flux,psi"
    sn.extend_perturbation(ZERO_F, ZERO_G).write_polylines(tmp_path / "p.csv", n=8)
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 2 * 9
