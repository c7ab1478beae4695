"""Quasi-Newton construction of non-radial two-phase overdetermined solutions (N = 2).

Given a zero-mean perturbation ``g`` of the outer circle, find a zero-mean
perturbation ``f`` of the interface circle ``r = R`` such that the
transmission solution of ``div(sigma grad u) = beta u - gamma``, ``u = 0``
on the outer boundary, has constant normal flux there.  The overdetermination
defect is

    Psi(f, g) = (d_nu u + Lambda / sigma_s) J_tau,
    Lambda = (gamma |Omega| - beta int u) / |d Omega|,

sampled at the outer boundary nodes and expanded in cos/sin modes of the
reference angle.  The update inverts the derivative at the radial
configuration, which is diagonal in Fourier modes with entries ``s_k'(1)``
from :mod:`twophase.radial_core`.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import fem
from .errors import (
    ConfigurationError, DivergenceError, JacobianNotInvertible, MeshQualityError, PerturbationTooLarge,
)
from .radial_core import (
    FLAG_THRESHOLD, Conductivity, EllipticParams, RadialConfig, solve_base_radial, solve_mode,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# perturbations and the domain map
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    """Zero-mean Fourier series ``sum_k a_k cos k theta + b_k sin k theta``, k = 1..K."""

    cos: np.ndarray
    sin: np.ndarray
    base_radius: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.cos, dtype=float).ravel()
        s = np.asarray(self.sin, dtype=float).ravel()
        if c.shape != s.shape:
            raise ConfigurationError("cos and sin coefficient vectors must have equal length")
        object.__setattr__(self, "cos", c)
        object.__setattr__(self, "sin", s)

    @classmethod
    def zeros(cls, K, base_radius=1.0):
        return cls(np.zeros(K), np.zeros(K), base_radius)

    @classmethod
    def single(cls, k, amplitude, K, base_radius=1.0, kind="cos"):
        p = np.zeros(K)
        p[k - 1] = amplitude
        return cls(p, np.zeros(K), base_radius) if kind == "cos" else cls(np.zeros(K), p, base_radius)

    @classmethod
    def from_vector(cls, vec, base_radius=1.0):
        vec = np.asarray(vec, dtype=float)
        K = vec.size // 2
        return cls(vec[:K], vec[K:], base_radius)

    @property
    def K(self):
        return self.cos.size

    def vector(self):
        return np.concatenate([self.cos, self.sin])

    def resized(self, K):
        c = np.zeros(K)
        s = np.zeros(K)
        m = min(K, self.K)
        c[:m] = self.cos[:m]
        s[:m] = self.sin[:m]
        return Perturbation(c, s, self.base_radius)

    def __call__(self, theta, order=0):
        theta = np.asarray(theta, dtype=float)
        k = np.arange(1, self.K + 1)
        kt = np.multiply.outer(theta, k)
        if order == 0:
            return np.cos(kt) @ self.cos + np.sin(kt) @ self.sin
        if order == 1:
            return (-np.sin(kt) * k) @ self.cos + (np.cos(kt) * k) @ self.sin
        raise ValueError("order must be 0 or 1")

    def __add__(self, other):
        K = max(self.K, other.K)
        a, b = self.resized(K), other.resized(K)
        return Perturbation(a.cos + b.cos, a.sin + b.sin, self.base_radius)

    def scaled(self, factor):
        return Perturbation(factor * self.cos, factor * self.sin, self.base_radius)

    def sup_norm(self, n=2048):
        return float(np.max(np.abs(self(2 * np.pi * np.arange(n) / n)))) if self.K else 0.0

    def is_small(self):
        return self.sup_norm() < self.base_radius / 4.0


def smoothstep(t):
    """Quintic cutoff 10t^3 - 15t^4 + 6t^5 clamped to [0, 1] (flat ends to second order)."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10 - 15 * t + 6 * t * t)


def smoothstep_slope(t):
    inside = (t > 0) & (t < 1)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30 * t * t * (1 - t) ** 2, 0.0)


@dataclass(frozen=True)
class DomainMap:
    """``x -> (r + rho(r, theta)) e_theta`` with ``rho = f(theta) b_in(r) + g(theta) b_out(r)``.

    ``b_in`` rises from 0 at the centre to 1 at ``r = R`` and falls back to 0
    at ``r = 1``; ``b_out`` rises from 0 at ``r = R`` to 1 at ``r = 1``.  Both
    use the quintic cutoff, so the map is C^2 and equals the identity at the
    centre.
    """

    inner: Perturbation
    outer: Perturbation
    R: float = 0.5

    def blends(self, r):
        r = np.asarray(r, dtype=float)
        R = self.R
        s_core = smoothstep(r / R)
        s_shell = smoothstep((r - R) / (1 - R))
        b_in = np.where(r <= R, s_core, 1.0 - s_shell)
        b_out = np.where(r <= R, 0.0, s_shell)
        d_core = smoothstep_slope(r / R) / R
        d_shell = smoothstep_slope((r - R) / (1 - R)) / (1 - R)
        db_in = np.where(r <= R, d_core, -d_shell)
        db_out = np.where(r <= R, 0.0, d_shell)
        return b_in, b_out, db_in, db_out

    def displacement(self, r, theta):
        b_in, b_out, _, _ = self.blends(r)
        return self.inner(theta) * b_in + self.outer(theta) * b_out

    def jacobian(self, r, theta):
        """Determinant of the map in polar form: (1 + d_r rho)(r + rho)/r."""
        r = np.asarray(r, dtype=float)
        b_in, b_out, db_in, db_out = self.blends(r)
        f = self.inner(theta)
        g = self.outer(theta)
        rho = f * b_in + g * b_out
        drho = f * db_in + g * db_out
        return (1 + drho) * (r + rho) / r

    def apply(self, r, theta):
        rad = r + self.displacement(r, theta)
        return np.stack([rad * np.cos(theta), rad * np.sin(theta)], axis=-1)

    def write_polylines(self, path, n=256):
        theta = 2 * np.pi * np.arange(n + 1) / n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["curve", "theta", "x", "y"])
            for name, r in (("interface", self.R), ("outer", 1.0)):
                pts = self.apply(np.full(theta.shape, r), theta)
                for t, (x, y) in zip(theta, pts):
                    w.writerow([name, f"{t:.12e}", f"{x:.12e}", f"{y:.12e}"])


def extend_perturbation(f: Perturbation, g: Perturbation, R=0.5, n_r=400, n_theta=512) -> DomainMap:
    """Blend the boundary perturbations into a map of the disk and check it is a bijection."""
    dmap = DomainMap(f, g, R)
    r = (np.arange(n_r) + 0.5) / n_r
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    rr, tt = np.meshgrid(np.concatenate([r, [R, 1.0]]), theta, indexing="ij")
    jac = dmap.jacobian(rr, tt)
    if np.min(jac) <= 0:
        i = np.unravel_index(np.argmin(jac), jac.shape)
        raise PerturbationTooLarge(
            f"perturbation too large: Jacobian {jac[i]:.3e} at r={rr[i]:.3f}, theta={tt[i]:.3f}",
            residual=float(jac[i]))
    return dmap


def bijectivity_sweep(eps_values, K=2, mode=2, R=0.5):
    """First amplitude of ``g = eps cos(mode theta)`` rejected by :func:`extend_perturbation`."""
    zero = Perturbation.zeros(K, R)
    for eps in eps_values:
        try:
            extend_perturbation(zero, Perturbation.single(mode, eps, K), R)
        except PerturbationTooLarge:
            return float(eps)
    return None


def critical_amplitude(mode=2, R=0.5):
    """Closed form of the rejection threshold for ``g = eps cos(mode theta)``: 1 / max b_out'."""
    return (1 - R) / 1.875


# --------------------------------------------------------------------------
# meshes and fields
# --------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _reference(R, resolution, symmetry):
    return fem.reference_mesh(R, resolution, symmetry=symmetry)


def build_mesh(dmap: DomainMap, resolution=64, min_angle=10.0, symmetry=None) -> fem.Mesh:
    """Fitted mesh of the perturbed two-phase disk (reference ring mesh moved by the map).

    The rotation order of the reference mesh defaults to the smallest
    multiple of 8 above the number of modes carried by the map.
    """
    if symmetry is None:
        symmetry = fem.symmetry_for_modes(max(dmap.inner.K, dmap.outer.K))
    ref = _reference(float(dmap.R), int(resolution), int(symmetry))
    pts = dmap.apply(ref.ref_r, ref.ref_theta)
    pts[0] = 0.0
    mesh = ref.moved(pts)
    areas = mesh.signed_areas()
    angles = mesh.min_angles()
    bad = (areas <= 0) | (angles < min_angle)
    if np.any(bad):
        cent = mesh.points[mesh.triangles[bad]].mean(axis=1)
        raise MeshQualityError(
            f"{int(bad.sum())} elements below the quality floor (min angle {angles.min():.2f} deg)",
            region=cent)
    return mesh


@dataclass
class Field:
    mesh: fem.Mesh
    values: np.ndarray
    flux: np.ndarray              # d_nu u at outer nodes (variational)
    reaction: np.ndarray          # <sigma d_nu u, phi_i> at outer nodes
    lambda_serrin: float
    integral: float               # int u
    area: float
    cond: Conductivity
    params: EllipticParams


def solve_transmission(mesh: fem.Mesh, cond: Conductivity, params: EllipticParams,
                       normalize_shell=False) -> Field:
    """P1 solution of ``div(sigma grad u) = beta u - gamma``, ``u = c_bdry`` on the outer boundary.

    With ``normalize_shell`` the conductivities are divided by ``sigma_s``
    (and the data accordingly), which is the normalization ``sigma_s = 1``.
    """
    if params.dim != 2:
        raise ConfigurationError("the finite-element solver is planar (dim = 2)")
    sc, ss = cond.sigma_c, cond.sigma_s
    beta, gamma = params.beta, params.gamma
    if normalize_shell:
        sc, ss, beta, gamma = sc / ss, 1.0, beta / ss, gamma / ss
        cond = Conductivity(sc, ss, cond.sigma_m)
        params = EllipticParams(beta, gamma, params.c_bdry, 2)
    asm = fem.assemble(mesh, sc, ss, (gamma, gamma))
    A = asm.stiffness + beta * asm.mass
    u = fem.solve_dirichlet(A, asm.load, mesh.outer_nodes, params.c_bdry)
    react = fem.boundary_reaction(A, asm.load, u, mesh.outer_nodes)
    flux = react / (ss * mesh.edge_weights)
    integral = float(np.sum(asm.mass @ u))
    perim = float(mesh.edge_weights.sum())
    lam = (gamma * asm.area - beta * integral) / perim
    return Field(mesh, u, flux, react, lam, integral, asm.area, cond, params)


def write_boundary_csv(field: Field, path, psi=None):
    m = field.mesh
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "x", "y", "flux"] + (["psi"] if psi is not None else []))
        for i, node in enumerate(m.outer_nodes):
            row = [f"{m.ref_theta[node]:.12e}", f"{m.points[node, 0]:.12e}", f"{m.points[node, 1]:.12e}",
                   f"{field.flux[i]:.12e}"]
            if psi is not None:
                row.append(f"{psi[i]:.12e}")
            w.writerow(row)


# --------------------------------------------------------------------------
# overdetermination residual
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Residual:
    theta: np.ndarray
    values: np.ndarray        # Psi at the outer nodes
    mean: float               # modal mean (k = 0 coefficient)
    cos: np.ndarray           # k = 1..K
    sin: np.ndarray
    sup_norm: float           # sup of the modes 1..K reconstruction
    nodal_sup: float          # sup of the nodal values minus the mean

    def as_perturbation(self, base_radius=1.0):
        return Perturbation(self.cos, self.sin, base_radius)


def modal_projection(theta, values, K):
    n = theta.size
    k = np.arange(1, K + 1)
    kt = np.multiply.outer(theta, k)
    mean = float(np.mean(values))
    return mean, 2.0 / n * (values @ np.cos(kt)), 2.0 / n * (values @ np.sin(kt))


def residual(field: Field, mesh: fem.Mesh = None, params: EllipticParams = None, K=6) -> Residual:
    """Psi at the outer nodes and its modes 1..K.

    The discrete tangential Jacobian is ``l_i / dtheta`` with ``l_i`` the
    boundary weight of node ``i``; combined with the discrete Lambda this
    makes the modal mean vanish up to rounding.
    """
    mesh = mesh or field.mesh
    ss = field.cond.sigma_s
    dtheta = 2 * np.pi / mesh.outer_nodes.size
    psi = (field.reaction + field.lambda_serrin * mesh.edge_weights) / (ss * dtheta)
    theta = mesh.outer_theta
    mean, a, b = modal_projection(theta, psi, K)
    recon = Perturbation(a, b)(theta)
    return Residual(theta, psi, mean, a, b, float(np.max(np.abs(recon))), float(np.max(np.abs(psi - mean))))


# --------------------------------------------------------------------------
# frozen Jacobian
# --------------------------------------------------------------------------

def modal_derivatives(cond: Conductivity, params: EllipticParams, R=0.5, K=6, radial_nodes=2049):
    """s_k'(1) for k = 1..K at the radial configuration."""
    base = solve_base_radial(params, cond, RadialConfig.uniform(R, radial_nodes))
    return np.array([solve_mode(k, base).deriv_at_one for k in range(1, K + 1)])


def apply_frozen_jacobian(f: Perturbation, modal_derivs):
    d = np.asarray(modal_derivs, dtype=float)[: f.K]
    return Perturbation(f.cos * d, f.sin * d, 1.0)


def apply_inverse_frozen_jacobian(res, modal_derivs, threshold=FLAG_THRESHOLD, base_radius=0.5) -> Perturbation:
    """Divide each residual mode by s_k'(1)."""
    a = np.asarray(res.cos, dtype=float)
    b = np.asarray(res.sin, dtype=float)
    d = np.asarray(modal_derivs, dtype=float)[: a.size]
    weak = np.abs(d) < threshold
    if np.any(weak & ((a != 0) | (b != 0))):
        raise JacobianNotInvertible(
            f"Jacobian not invertible: |s_k'(1)| below {threshold:g} for k = {list(np.nonzero(weak)[0] + 1)}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ca = np.where(weak, 0.0, a / d)
        cb = np.where(weak, 0.0, b / d)
    return Perturbation(ca, cb, base_radius)


# --------------------------------------------------------------------------
# the quasi-Newton solve
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NewtonOptions:
    K: int = 6
    resolution: int = 64
    tol: float = 1e-6
    max_iter: int = 10
    R: float = 0.5
    radial_nodes: int = 2049
    divergence_window: int = 3
    update: str = "broyden"     # "frozen": fixed modal Jacobian; "broyden": secant updates on top of it


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    residual_history: list = field(default_factory=list)     # sup_norm / |Lambda(0,0)|
    nodal_history: list = field(default_factory=list)
    contraction: list = field(default_factory=list)
    f_history: list = field(default_factory=list)
    lambda_reference: float = float("nan")
    modal_derivs: list = field(default_factory=list)
    runtime_s: float = 0.0
    message: str = ""
    small_interface: bool = True      # every iterate kept sup|f| < R/4

    def to_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_history": [float(x) for x in self.residual_history],
            "nodal_residual_history": [float(x) for x in self.nodal_history],
            "contraction_factors": [float(x) for x in self.contraction],
            "f_history": [[float(v) for v in f] for f in self.f_history],
            "lambda_reference": float(self.lambda_reference),
            "modal_derivatives": [float(x) for x in self.modal_derivs],
            "runtime_s": float(self.runtime_s),
            "message": self.message,
            "small_interface": bool(self.small_interface),
        }

    def write_json(self, path, f=None):
        data = self.to_dict()
        if f is not None:
            data["f_cos"] = [float(x) for x in f.cos]
            data["f_sin"] = [float(x) for x in f.sin]
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


def evaluate_psi(f: Perturbation, g: Perturbation, cond, params, opts: NewtonOptions):
    dmap = extend_perturbation(f, g, opts.R)
    mesh = build_mesh(dmap, opts.resolution)
    fld = solve_transmission(mesh, cond, params)
    return residual(fld, K=opts.K), fld


def newton_solve(g: Perturbation, cond: Conductivity, params: EllipticParams, opts: NewtonOptions = None,
                 f0: Perturbation = None, modal_derivs=None):
    """Iterate ``f <- f - B^{-1} Psi(f, g)`` until the modes 1..K are below tolerance.

    ``B`` starts as the modal derivative at the radial configuration.  With
    ``update="frozen"`` it stays there (the operator inverted in the
    implicit-function argument); with ``update="broyden"`` rank-one secant
    corrections are added from the observed residual changes, which removes
    the slow mode-coupling contraction at moderate amplitudes without ever
    assembling a shape Jacobian.
    """
    opts = opts or NewtonOptions()
    t0 = time.perf_counter()
    cond.require_two_phase()
    g = g.resized(opts.K)
    if not g.is_small():
        raise PerturbationTooLarge("outer perturbation violates sup |g| < 1/4")
    if modal_derivs is None:
        modal_derivs = modal_derivatives(cond, params, opts.R, opts.K, opts.radial_nodes)
    zero = Perturbation.zeros(opts.K, opts.R)
    _, fld0 = evaluate_psi(zero, Perturbation.zeros(opts.K), cond, params, opts)
    lam_ref = abs(fld0.lambda_serrin) / cond.sigma_s
    f = f0.resized(opts.K) if f0 is not None else zero
    report = NewtonReport(False, 0, lambda_reference=lam_ref, modal_derivs=list(modal_derivs))
    if opts.update not in ("frozen", "broyden"):
        raise ConfigurationError(f"unknown update rule {opts.update!r}")
    d = np.asarray(modal_derivs, dtype=float)[: opts.K]
    if np.any(np.abs(d) < FLAG_THRESHOLD):
        raise JacobianNotInvertible("Jacobian not invertible: a modal derivative is below the flag threshold")
    # the iteration matrix acts on (cos_1..cos_K, sin_1..sin_K)
    B = np.diag(np.concatenate([d, d]))
    growth = 0
    prev_vec = prev_psi = None
    for it in range(opts.max_iter + 1):
        res, _ = evaluate_psi(f, g, cond, params, opts)
        psi_vec = np.concatenate([res.cos, res.sin])
        rel = res.sup_norm / lam_ref
        report.residual_history.append(rel)
        report.nodal_history.append(res.nodal_sup / lam_ref)
        report.f_history.append(f.vector().tolist())
        if len(report.residual_history) > 1:
            prev = report.residual_history[-2]
            report.contraction.append(rel / prev if prev > 0 else 0.0)
            growth = growth + 1 if rel > prev else 0
        log.debug("newton iteration %d: relative residual %.3e", it, rel)
        if rel <= opts.tol:
            report.converged = True
            break
        if growth >= opts.divergence_window:
            report.runtime_s = time.perf_counter() - t0
            report.message = "outside IFT neighborhood; reduce |g|"
            raise DivergenceError(report.message, report)
        if it == opts.max_iter:
            break
        vec = f.vector()
        if opts.update == "broyden" and prev_vec is not None:
            step_f = vec - prev_vec
            denom = step_f @ step_f
            if denom > 0:
                B = B + np.outer(psi_vec - prev_psi - B @ step_f, step_f) / denom
        prev_vec, prev_psi = vec, psi_vec
        if opts.update == "frozen":
            delta = apply_inverse_frozen_jacobian(res, d, base_radius=opts.R).vector()
        else:
            delta = np.linalg.solve(B, psi_vec)
        f = Perturbation.from_vector(vec - delta, opts.R)
        # the map and mesh checks catch real breakdown; leaving sup|f| < R/4 is only reported
        report.small_interface = report.small_interface and f.is_small()
        report.iterations = it + 1
    report.runtime_s = time.perf_counter() - t0
    report.message = "converged" if report.converged else "maximum iterations reached"
    return f, report


# --------------------------------------------------------------------------
# linearization checks
# --------------------------------------------------------------------------

def _psi_vector(f, g, cond, params, opts):
    res, _ = evaluate_psi(f, g, cond, params, opts)
    return np.concatenate([res.cos, res.sin])


def linear_prediction(g0: Perturbation, cond, params, opts: NewtonOptions = None, h=1e-4):
    """First-order response ``f_lin = -[d_f Psi_h]^{-1} d_g Psi_h g0`` of the discrete map.

    Both derivatives are central differences of the discrete residual at
    (0, 0), so ``f(eps g0) - eps f_lin`` measures the nonlinearity alone.
    """
    opts = opts or NewtonOptions()
    K = opts.K
    zero_f = Perturbation.zeros(K, opts.R)
    zero_g = Perturbation.zeros(K)
    g0 = g0.resized(K)
    dg = (_psi_vector(zero_f, g0.scaled(h), cond, params, opts)
          - _psi_vector(zero_f, g0.scaled(-h), cond, params, opts)) / (2 * h)
    J = np.empty((2 * K, 2 * K))
    for j in range(2 * K):
        e = np.zeros(2 * K)
        e[j] = h
        fp = Perturbation.from_vector(e, opts.R)
        J[:, j] = (_psi_vector(fp, zero_g, cond, params, opts)
                   - _psi_vector(fp.scaled(-1), zero_g, cond, params, opts)) / (2 * h)
    return Perturbation.from_vector(-np.linalg.solve(J, dg), opts.R), J


def consistency_sweep(g0: Perturbation, cond, params, eps_values=(0.02, 0.01, 0.005), opts: NewtonOptions = None):
    """Deviation ``|f(eps g0) - eps f_lin|`` over ``eps`` and its log-log slope."""
    opts = opts or NewtonOptions()
    tight = NewtonOptions(opts.K, opts.resolution, min(opts.tol, 1e-11), max(opts.max_iter, 20), opts.R,
                          opts.radial_nodes, opts.divergence_window, opts.update)
    f_lin, _ = linear_prediction(g0, cond, params, tight)
    derivs = modal_derivatives(cond, params, opts.R, opts.K, opts.radial_nodes)
    devs = []
    for eps in eps_values:
        f, rep = newton_solve(g0.scaled(eps), cond, params, tight, modal_derivs=derivs)
        devs.append(float(np.max(np.abs(f.vector() - eps * f_lin.vector()))))
    slope = float(np.polyfit(np.log(eps_values), np.log(devs), 1)[0])
    return {"eps": list(eps_values), "deviation": devs, "slope": slope, "f_lin": f_lin.vector().tolist()}


@dataclass
class DerivativeField:
    mesh: fem.Mesh
    values_core: np.ndarray      # u' seen from the core side (continuous part)
    values_shell: np.ndarray     # u' seen from the shell side
    flux: np.ndarray             # d_nu u' at outer nodes
    theta: np.ndarray


def shape_derivative_direct(f: Perturbation, base: Field, R=0.5, radial_nodes=2049) -> DerivativeField:
    """Finite-element solution of the jump problem for the shape derivative u'.

    ``sigma Lap u' = beta u'`` per phase, ``[u'] = (u_r(R-) - u_r(R+)) f``,
    ``[sigma d_nu u'] = 0``, ``u' = 0`` on the outer boundary.  The jump is
    lifted into the shell with the quintic cutoff and the continuous
    remainder is solved for.
    """
    mesh = base.mesh
    cond, params = base.cond, base.params
    rad = solve_base_radial(params, cond, RadialConfig.uniform(R, radial_nodes))
    jump = rad.du_inner_minus - rad.du_inner_plus
    asm = fem.assemble(mesh, cond.sigma_c, cond.sigma_s, (0.0, 0.0))
    # element-level lifting: shell elements see E = jump f(theta) chi(r), core elements see 0
    chi = 1.0 - smoothstep((mesh.ref_r - R) / (1 - R))
    lift_nodes = jump * f(mesh.ref_theta) * np.where(mesh.ref_r >= R - 1e-14, chi, 0.0)
    shell = mesh.phase == fem.SHELL
    shell_asm = _phase_operator(mesh, shell, cond.sigma_s, params.beta)
    A = asm.stiffness + params.beta * asm.mass
    rhs = -shell_asm @ lift_nodes
    w = fem.solve_dirichlet(A, rhs, mesh.outer_nodes, 0.0)
    total_react = (A @ w + shell_asm @ lift_nodes)[mesh.outer_nodes]
    flux = total_react / (cond.sigma_s * mesh.edge_weights)
    return DerivativeField(mesh, w, w + lift_nodes, flux, mesh.outer_theta)


def _phase_operator(mesh, mask, sigma, beta):
    sub = fem.Mesh.__new__(fem.Mesh)
    sub.__dict__.update(mesh.__dict__)
    sub.triangles = mesh.triangles[mask]
    sub.phase = mesh.phase[mask]
    asm = fem.assemble(sub, sigma, sigma, (0.0, 0.0))
    return asm.stiffness + beta * asm.mass


def material_derivative_gap(f: Perturbation, cond, params, t_values=(1e-2, 5e-3), resolution=64, R=0.5):
    """L2 distance between the difference quotient (u_{tf} o T - u)/t and u' + rho u_r.

    Both sides are material (pulled-back) derivatives on the fixed reference
    topology; the gap should shrink like t.
    """
    zero_g = Perturbation.zeros(f.K)
    ref_map = extend_perturbation(Perturbation.zeros(f.K, R), zero_g, R)
    base = solve_transmission(build_mesh(ref_map, resolution), cond, params)
    du = shape_derivative_direct(f, base, R)
    rad = solve_base_radial(params, cond, RadialConfig.uniform(R, 2049))
    mesh = base.mesh
    r = mesh.ref_r
    # core side at interface nodes; both sides give the same material derivative there
    ur = rad.derivative(r)
    rho = DomainMap(f, zero_g, R).displacement(r, mesh.ref_theta)
    predicted = np.where(r > R, du.values_shell, du.values_core) + rho * ur
    lumped = fem.assemble(mesh, 1.0, 1.0, lumped=True).mass.diagonal()
    gaps = []
    for t in t_values:
        ft = f.scaled(t)
        pert = solve_transmission(build_mesh(extend_perturbation(ft, zero_g, R), resolution), cond, params)
        quotient = (pert.values - base.values) / t
        gaps.append(float(np.sqrt(np.sum(lumped * (quotient - predicted) ** 2))))
    return gaps
