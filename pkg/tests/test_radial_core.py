import numpy as np
import pytest

from twophase.errors import ConfigurationError
from twophase.radial_core import (
    Conductivity, EllipticParams, RadialConfig, closed_form_torsion, invertibility_report,
    solve_base_radial, solve_mode, solve_radial_ode, write_csv,
)

import oracles


@pytest.fixture(scope="module")
def torsion():
    cfg = RadialConfig.uniform(0.5, 1024)
    return solve_base_radial(EllipticParams(), Conductivity(2.0, 1.0), cfg)


def test_one_phase_torsion():
    sol = solve_base_radial(EllipticParams(), Conductivity(1.0, 1.0), RadialConfig.uniform(0.5, 257))
    assert np.max(np.abs(sol.values - (1 - sol.r ** 2) / 4)) < 1e-10
    assert sol.cond.sigma_s * sol.du_outer == pytest.approx(-0.5, abs=1e-9)
    assert sol.lambda_serrin == pytest.approx(0.5)


def test_two_phase_torsion_closed_form(torsion):
    exact = closed_form_torsion(torsion.r, 0.5, 2.0, 1.0)
    assert np.max(np.abs(torsion.values - exact)) < 1e-9
    assert torsion.values[0] == pytest.approx(oracles.TORSION_CENTER_VALUE, abs=1e-9)
    assert torsion.values[-1] == 0.0


def test_transmission_invariants(torsion):
    assert abs(torsion.u_inner_plus - torsion.u_inner_minus) < 1e-9
    assert abs(2.0 * torsion.du_inner_minus - 1.0 * torsion.du_inner_plus) < 1e-9


@pytest.mark.parametrize("dim,gamma,sc,ss,R", [(2, 1.0, 3.0, 0.7, 0.3), (3, 2.0, 0.4, 1.5, 0.6),
                                               (4, 0.5, 5.0, 1.0, 0.45)])
def test_divergence_identity(dim, gamma, sc, ss, R):
    sol = solve_base_radial(EllipticParams(gamma=gamma, dim=dim), Conductivity(sc, ss),
                            RadialConfig.uniform(R, 513))
    assert ss * sol.du_outer == pytest.approx(-gamma / dim, abs=1e-9)


def test_beta_positive_against_shooting():
    p = EllipticParams(beta=1.0, dim=3)
    c = Conductivity(0.5, 1.0)
    sol = solve_base_radial(p, c, RadialConfig.uniform(0.4, 2049))
    uR, dm, dp = oracles.shooting_base(3, 1.0, 1.0, 0.5, 1.0, 0.4)
    assert sol.u_inner_minus == pytest.approx(uR, abs=1e-9)
    assert sol.du_inner_minus == pytest.approx(dm, abs=1e-8)
    assert sol.du_inner_plus == pytest.approx(dp, abs=1e-8)
    # maximum principle: c_bdry < u < gamma/beta
    assert np.all(sol.values[:-1] > 0) and np.all(sol.values < 1.0)


def test_second_order_refinement_ratio():
    p = EllipticParams(beta=1.0, dim=3)
    c = Conductivity(0.5, 1.0)
    uR = oracles.shooting_base(3, 1.0, 1.0, 0.5, 1.0, 0.4)[0]
    errs = []
    for n in (101, 201, 401):
        sol = solve_base_radial(p, c, RadialConfig.uniform(0.4, n), richardson=False)
        errs.append(abs(sol.u_inner_minus - uR))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(3.5 < q < 4.5 for q in ratios), ratios


def test_mode_one_hand_oracle(torsion):
    m = solve_mode(1, torsion)
    assert m.deriv_at_one == pytest.approx(oracles.MODE1_DERIV_AT_ONE, abs=1e-9)
    assert m.eig == 1.0
    core = m.phase == 0
    shell = m.phase == 1
    r = m.r
    assert np.max(np.abs(m.values[core] - oracles.MODE1_CORE_A * r[core])) < 1e-9
    shell_exact = oracles.MODE1_SHELL_B * r[shell] + oracles.MODE1_SHELL_C / r[shell]
    assert np.max(np.abs(m.values[shell] - shell_exact)) < 1e-9


def test_mode_invariants(torsion):
    m = solve_mode(3, torsion)
    assert m.values[-1] == 0.0
    vL = m.values[m.phase == 0][-1]
    vR = m.values[m.phase == 1][0]
    dL = m.deriv[m.phase == 0][-1]
    dR = m.deriv[m.phase == 1][0]
    assert vR - vL == pytest.approx(torsion.du_inner_minus - torsion.du_inner_plus, abs=1e-9)
    assert 2.0 * dL == pytest.approx(dR, abs=1e-8)
    # regularity: s_k = O(r^k) near the origin
    small = (m.r > 0) & (m.r < 0.05)
    assert np.all(np.abs(m.values[small]) < 10 * m.r[small] ** 3)


def test_mode_linearity_hook(torsion):
    a = solve_mode(2, torsion)
    b = solve_mode(2, torsion, jump_scale=-3.0)
    assert np.allclose(b.values, -3.0 * a.values, atol=1e-12)


def test_one_phase_mode_vanishes():
    base = solve_base_radial(EllipticParams(), Conductivity(1.0, 1.0), RadialConfig.uniform(0.5, 257))
    m = solve_mode(2, base)
    assert np.all(m.values == 0.0) and m.deriv_at_one == 0.0


def test_mode_zero_rejected(torsion):
    with pytest.raises(ConfigurationError):
        solve_mode(0, torsion)


def test_invertibility_report_flags(torsion):
    rep = invertibility_report(torsion, 8)
    assert [r.k for r in rep] == list(range(1, 9))
    assert not any(r.flagged for r in rep)
    assert rep[0].deriv_at_one == pytest.approx(-1 / 11, abs=1e-9)
    base = solve_base_radial(EllipticParams(), Conductivity(1.0, 1.0), RadialConfig.uniform(0.5, 257))
    assert all(r.flagged for r in invertibility_report(base, 8, with_condition=False))


def test_invertibility_beta_positive_shooting():
    p = EllipticParams(beta=1.0, dim=3)
    c = Conductivity(0.5, 1.0)
    base = solve_base_radial(p, c, RadialConfig.uniform(0.4, 2049))
    rep = invertibility_report(base, 8, with_condition=False)
    jump = base.du_inner_minus - base.du_inner_plus
    for r in rep:
        ref = oracles.shooting_mode_deriv(r.k, 3, 1.0, 0.5, 1.0, 0.4, jump)
        assert abs(r.deriv_at_one) > 0
        assert r.deriv_at_one == pytest.approx(ref, rel=1e-6)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        Conductivity(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        EllipticParams(beta=-1.0)
    with pytest.raises(ConfigurationError):
        RadialConfig.from_nodes(0.5, np.linspace(0, 1, 10))
    with pytest.raises(ConfigurationError):
        invertibility_report(solve_base_radial(EllipticParams(), Conductivity(2, 1),
                                               RadialConfig.uniform(0.5, 65)), 65)


def test_explicit_grid_config():
    nodes = np.concatenate([np.linspace(0, 0.5, 41), np.linspace(0.5, 1, 61)[1:]])
    cfg = RadialConfig.from_nodes(0.5, nodes)
    sol = solve_base_radial(EllipticParams(), Conductivity(2, 1), cfg)
    assert np.max(np.abs(sol.values - closed_form_torsion(sol.r, 0.5, 2, 1))) < 1e-10


def test_hermite_evaluation(torsion):
    rho = np.linspace(0, 1, 37)
    assert np.allclose(torsion(rho), closed_form_torsion(rho, 0.5, 2, 1), atol=1e-9)


def test_generic_solver_three_phases():
    # div(sigma grad u) = -1 with sigma = 1, 2, 4 on [0,.3], [.3,.6], [.6,1], N = 2
    nodes = np.linspace(0, 1, 301)
    raw = solve_radial_ode(nodes, (90, 180), (1.0, 2.0, 4.0), dim=2, sources=(1.0, 1.0, 1.0))
    # flux: sigma u' = -r/2 everywhere
    idx = np.arange(1, 300)
    sigma = np.where(idx <= 90, 1.0, np.where(idx <= 180, 2.0, 4.0))
    assert np.allclose(sigma * raw.dleft[1:-1], -nodes[1:-1] / 2, atol=1e-9)


def test_csv_roundtrip(tmp_path, torsion):
    path = tmp_path / "u.csv"
    write_csv(torsion, path)
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding=None)
    assert data.shape[0] == torsion.r.size
    assert set(data["phase"]) == {"core", "shell"}
