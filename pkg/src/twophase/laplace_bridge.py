"""Laplace transforms of heat fields and the large-lambda boundary asymptotics.

``w(x, lambda) = lambda int_0^inf e^{-lambda t} u(x, t) dt`` turns the heat
problems of :mod:`twophase.parabolic_lab` into the elliptic problems
``div(sigma grad w) = lambda (w - X)`` with ``X`` the initial data.  This module

* transforms stored heat fields (exact integration of the piecewise-linear
  time interpolant, with explicit head and tail bounds),
* solves the transformed problems directly (radial finite differences or
  planar P1 elements),
* evaluates the WKB barriers ``f_pm = e^{-sqrt(lambda/sigma_s) delta}
  (A_0 + sqrt(sigma_s/lambda) A_pm)`` in the inner tube of a plane curve,
* fits the flux asymptotics ``d_0/sigma_s - sqrt(lambda/sigma_s) -> -1/2 sum kappa``
  and the curvature formula of the Cauchy problem.

Sign convention: ``nu`` is the outward unit normal, so the boundary flux
``d_0 = sigma_s d_nu w`` is positive and grows like ``sqrt(lambda)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import ConfigurationError, NumericalError
from .geometry import CurveBoundary, nearest_parameter
from .parabolic_lab import (
    CAUCHY, HeatField, PlanarGeometry, RadialGeometry, graded_nodes,
)
from .radial_core import Conductivity, _expand, solve_radial_extrapolated

DIRICHLET = "dirichlet"
TAIL_TOL = 1e-8
HEAD_TOL = 1e-3


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

def _linear_weights(times, lam):
    """Weights ``c_j`` with ``lambda int e^{-lambda t} u(t) dt = sum c_j u(t_j)`` on ``[t_0, t_end]``.

    ``u`` is the piecewise-linear interpolant of the samples.
    """
    t = np.asarray(times, dtype=float)
    E = np.exp(-lam * t)
    x = lam * np.diff(t)
    # g(x) = (1 - e^{-x}(1 + x)) / x, evaluated without cancellation for small x
    small = x < 1e-3
    g = np.empty_like(x)
    xs = x[small]
    g[small] = xs / 2 - xs ** 2 / 3 + xs ** 3 / 8 - xs ** 4 / 30
    xl = x[~small]
    g[~small] = (-np.expm1(-xl) - xl * np.exp(-xl)) / xl
    seg = E[:-1] - E[1:]
    right = E[:-1] * g
    left = seg - right
    w = np.zeros(t.size)
    w[:-1] += left
    w[1:] += right
    return w


@dataclass
class LaplaceField:
    lam: float
    values: np.ndarray
    nodes: np.ndarray | None
    mesh: fem.Mesh | None
    flux: np.ndarray | None        # d_0 samples on the boundary (outward)
    provenance: str
    error_bound: float = 0.0
    phase: np.ndarray | None = None
    derivative: np.ndarray | None = None

    def __call__(self, rho):
        """Values at radii ``rho``: cubic Hermite with the solver derivatives when available."""
        if self.nodes is None:
            raise ConfigurationError("pointwise evaluation needs a 1D field")
        rho = np.asarray(rho, dtype=float)
        if self.derivative is None:
            return np.interp(rho, self.nodes, self.values)
        r = self.nodes
        # with duplicated interface nodes, side="right" picks the copy of the phase to the right
        i = np.clip(np.searchsorted(r, rho, side="right") - 1, 0, r.size - 2)
        h = r[i + 1] - r[i]
        s = (rho - r[i]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s ** 2 * (3 - 2 * s)
        h11 = s ** 2 * (s - 1)
        return (h00 * self.values[i] + h10 * h * self.derivative[i]
                + h01 * self.values[i + 1] + h11 * h * self.derivative[i + 1])


def transform_field(field: HeatField, lam, tail_tol=TAIL_TOL) -> LaplaceField:
    """``w = lambda int_0^inf e^{-lambda t} u dt`` from the stored samples.

    The samples are interpolated linearly in time; beyond the horizon ``T``
    the last state is held, which is exact up to ``e^{-lambda T}`` because
    ``0 <= u <= 1``.
    """
    if lam <= 0:
        raise ConfigurationError("lambda must be positive")
    T = field.times[-1]
    tail = np.exp(-lam * T)
    if tail > tail_tol:
        raise ConfigurationError(f"extend horizon: e^(-lambda T) = {tail:.2e} exceeds {tail_tol:.0e}")
    w = _linear_weights(field.times, lam)
    values = w @ field.values + tail * field.values[-1]
    flux = None
    if field.is_radial:
        from .parabolic_lab import _radial_flux

        g = field.problem.geometry
        probe = HeatField(field.problem, np.array([0.0]), values[None, :], field.nodes, None, field.mass,
                          field.operator, field.fixed)
        flux = _radial_flux(probe, g.R_outer)
    return LaplaceField(float(lam), values, field.nodes, field.mesh, flux, "transformed", float(tail))


@dataclass
class TransformedBoundaryData:
    lambdas: np.ndarray
    values: np.ndarray
    head_bound: np.ndarray
    tail_bound: np.ndarray


def tilde_a(times, a_values, lambdas, head_tol=HEAD_TOL, tail_tol=TAIL_TOL) -> TransformedBoundaryData:
    """Transform of a boundary trace ``a(t)`` for every ``lambda`` in the sweep.

    On ``[0, t_1]`` (``t_1`` the first positive sample) the integrand is not
    resolved; since ``0 < a < 1`` its contribution is uncertain by at most
    ``1 - e^{-lambda t_1}``, which must stay below ``head_tol``.
    """
    t = np.asarray(times, dtype=float)
    a = np.asarray(a_values, dtype=float)
    if t[0] > 0:
        t = np.concatenate([[0.0], t])
        a = np.concatenate([[a[0]], a])
    t1 = t[1]
    out, heads, tails = [], [], []
    for lam in np.atleast_1d(lambdas):
        head = -np.expm1(-lam * t1)
        if head > head_tol:
            raise ConfigurationError(f"refine near t=0: head bound {head:.2e} at lambda={lam:g}")
        tail = np.exp(-lam * t[-1])
        if tail > tail_tol:
            raise ConfigurationError(f"extend horizon: tail bound {tail:.2e} at lambda={lam:g}")
        # on the unresolved head use the first resolved value
        a_use = a.copy()
        a_use[0] = a[1]
        out.append(_linear_weights(t, lam) @ a_use + tail * a[-1])
        heads.append(head)
        tails.append(tail)
    vals = np.array(out)
    if np.any(vals <= 0) or np.any(vals >= 1):
        raise NumericalError("transformed boundary values left (0, 1)")
    return TransformedBoundaryData(np.atleast_1d(np.asarray(lambdas, dtype=float)), vals,
                                   np.array(heads), np.array(tails))


# --------------------------------------------------------------------------
# direct elliptic solves
# --------------------------------------------------------------------------

class _NodeGrid:
    """Explicit radial grid with interface nodes; refinement inserts midpoints."""

    def __init__(self, nodes, interfaces):
        self.nodes = np.asarray(nodes, dtype=float)
        self.interface_nodes = tuple(int(np.argmin(np.abs(self.nodes - r))) for r in interfaces)

    def refined(self):
        mid = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        out = np.empty(2 * self.nodes.size - 1)
        out[::2] = self.nodes
        out[1::2] = mid
        return _NodeGrid(out, [self.nodes[i] for i in self.interface_nodes])


def radial_lambda_grid(geometry: RadialGeometry, lam, kind, cond: Conductivity):
    """Grid resolving the boundary layers of width ``sqrt(sigma / lambda)``."""
    layer = np.sqrt(min(cond.sigma_s, cond.sigma_m) / lam)
    h_fine = min(geometry.h_fine * 10, layer / 40)
    h_max = min(0.01, layer / 10)
    if kind == CAUCHY:
        right = geometry.R_outer + 40 * np.sqrt(cond.sigma_m / lam)
        nodes = graded_nodes(0.0, right, [geometry.R, geometry.R_outer], h_fine, h_max, 1.03)
        return _NodeGrid(nodes, [geometry.R, geometry.R_outer])
    nodes = graded_nodes(0.0, geometry.R_outer, [geometry.R, geometry.R_outer], h_fine, h_max, 1.03)
    return _NodeGrid(nodes, [geometry.R])


def solve_elliptic_lambda(geometry, cond: Conductivity, lam, kind=DIRICHLET) -> LaplaceField:
    """Direct solve of ``div(sigma grad w) = lambda (w - X)``.

    ``kind=DIRICHLET``: ``w = 1`` on the outer boundary, ``X = 0``.
    ``kind=CAUCHY``: ``X`` is the indicator of the exterior and ``w -> 1``
    far away (truncated where the decay ``e^{-sqrt(lambda/sigma_m) L}`` is
    negligible).  For planar meshes the Cauchy problem uses the mesh core as
    ``Omega`` (conductivity ``sigma_s``) and the mesh shell as the exterior.
    """
    if lam <= 0:
        raise ConfigurationError("lambda must be positive")
    if kind not in (DIRICHLET, CAUCHY):
        raise ConfigurationError(f"unknown problem kind {kind!r}")
    if isinstance(geometry, RadialGeometry):
        return _solve_radial(geometry, cond, lam, kind)
    if isinstance(geometry, PlanarGeometry):
        return _solve_planar(geometry.mesh, cond, lam, kind)
    raise ConfigurationError("geometry must be radial or planar")


def _solve_radial(geometry, cond, lam, kind):
    grid = radial_lambda_grid(geometry, lam, kind, cond)
    if kind == CAUCHY:
        sigmas = (cond.sigma_c, cond.sigma_s, cond.sigma_m)
        sources = (0.0, 0.0, lam)
    else:
        sigmas = (cond.sigma_c, cond.sigma_s)
        sources = (0.0, 0.0)
    raw = solve_radial_extrapolated(grid, sigmas, dim=geometry.dim, beta=lam, sources=sources, outer_value=1.0)
    r, phase, vals, ders = _expand(raw)
    i_out = int(np.nonzero(np.isclose(r, geometry.R_outer) & (phase == 1))[0][-1])
    flux = np.array([cond.sigma_s * ders[i_out]])
    return LaplaceField(float(lam), vals, r, None, flux, "direct", raw.residual, phase, ders)


def _solve_planar(mesh: fem.Mesh, cond, lam, kind):
    if kind == CAUCHY:
        asm = fem.assemble(mesh, cond.sigma_s, cond.sigma_m, source=(0.0, lam), lumped=True)
    else:
        asm = fem.assemble(mesh, cond.sigma_c, cond.sigma_s, source=(0.0, 0.0), lumped=True)
    A = (asm.stiffness + lam * asm.mass).tocsr()
    w = fem.solve_dirichlet(A, asm.load, mesh.outer_nodes, 1.0)
    react = fem.boundary_reaction(A, asm.load, w, mesh.outer_nodes)
    flux = None if kind == CAUCHY else react / mesh.edge_weights
    return LaplaceField(float(lam), w, None, mesh, flux, "direct", 0.0)


@dataclass
class CauchyBoundarySamples:
    theta: np.ndarray
    lambdas: np.ndarray
    values: np.ndarray          # (n_lambda, n_points) w on Gamma
    flux_inner: np.ndarray      # sigma_s (d_nu w)_- per point
    flux_outer: np.ndarray      # sigma_m (d_nu w)_+ per point


def planar_cauchy_samples(mesh: fem.Mesh, cond: Conductivity, lambdas) -> CauchyBoundarySamples:
    """Boundary values and one-sided variational fluxes on the mesh interface.

    The mesh core plays ``Omega`` and its shell the exterior medium.  The
    one-sided fluxes are the residuals of the interface equations for the
    core-only and exterior-only assemblies.
    """
    iface = mesh.interface_nodes
    p = mesh.points[iface]
    length = 0.5 * (np.linalg.norm(np.roll(p, -1, 0) - p, axis=1) + np.linalg.norm(p - np.roll(p, 1, 0), axis=1))
    core = mesh.phase == fem.CORE
    parts = []
    for keep in (core, ~core):
        sub = fem.Mesh(mesh.layout, mesh.ref_r, mesh.ref_theta, mesh.points, mesh.triangles[keep],
                       mesh.phase[keep], mesh.outer_nodes, mesh.interface_nodes)
        parts.append(sub)
    vals, fin, fout = [], [], []
    for lam in lambdas:
        w = _solve_planar(mesh, cond, lam, CAUCHY).values
        a_in = fem.assemble(parts[0], cond.sigma_s, cond.sigma_m, source=(0.0, lam), lumped=True)
        a_out = fem.assemble(parts[1], cond.sigma_s, cond.sigma_m, source=(0.0, lam), lumped=True)
        r_in = ((a_in.stiffness + lam * a_in.mass) @ w - a_in.load)[iface]
        r_out = ((a_out.stiffness + lam * a_out.mass) @ w - a_out.load)[iface]
        vals.append(w[iface])
        fin.append(r_in / length)
        fout.append(-r_out / length)
    return CauchyBoundarySamples(mesh.ref_theta[iface], np.asarray(lambdas, dtype=float), np.array(vals),
                                 np.array(fin), np.array(fout))


# --------------------------------------------------------------------------
# WKB barriers in the inner tube of a plane curve
# --------------------------------------------------------------------------

_TAU_NODES, _TAU_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass
class _TubePoint:
    delta: np.ndarray
    kappa: np.ndarray
    kappa_s: np.ndarray
    kappa_ss: np.ndarray
    foot_param: np.ndarray


def _curvature_jet(boundary: CurveBoundary, t, h=1e-3):
    """Inward-normal curvature and its first two arc-length derivatives at parameters ``t``."""
    sign = boundary.geometric_sign * boundary.orientation
    k = lambda s: sign * boundary.curvature(s)  # noqa: E731
    k0 = k(t)
    kp, km = k(t + h), k(t - h)
    k2p, k2m = k(t + 2 * h), k(t - 2 * h)
    kt = (8 * (kp - km) - (k2p - k2m)) / (12 * h)
    ktt = (-k2p + 16 * kp - 30 * k0 + 16 * km - k2m) / (12 * h * h)
    z1 = boundary.derivative(t, 1)
    z2 = boundary.derivative(t, 2)
    v = np.abs(z1)
    vt = (z1.conjugate() * z2).real / v
    ks = kt / v
    kss = (ktt - kt * vt / v) / v ** 2
    return k0, ks, kss


def laplacian_amplitude(kappa, kappa_s, kappa_ss, tau):
    """``Delta A_0`` at depth ``tau`` on the normal ray of a plane curve.

    In tube coordinates ``(s, tau)`` with ``h = 1 - kappa(s) tau`` and
    ``A_0 = h^{-1/2}``:
    ``Delta A_0 = kappa^2/4 h^{-5/2} + tau kappa_ss/2 h^{-7/2} + 5/4 kappa_s^2 tau^2 h^{-9/2}``.
    """
    h = 1.0 - kappa * tau
    return kappa ** 2 / 4 * h ** -2.5 + tau * kappa_ss / 2 * h ** -3.5 + 1.25 * kappa_s ** 2 * tau ** 2 * h ** -4.5


def amplitudes(kappa, kappa_s, kappa_ss, delta):
    """``A_0`` and ``A_pm`` at depth ``delta`` (arrays broadcast together).

    ``A_pm = int_0^delta [Delta A_0 / 2 pm 1] ((1 - kappa tau)/(1 - kappa delta))^{1/2} dtau``;
    the inner exponential of the defining formula has this closed form
    because ``Delta delta = -kappa / (1 - kappa tau)`` along the ray.
    """
    kappa, kappa_s, kappa_ss, delta = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                                           for a in (kappa, kappa_s, kappa_ss, delta)))
    a0 = (1.0 - kappa * delta) ** -0.5
    tau = 0.5 * delta[..., None] * (_TAU_NODES + 1)
    wts = 0.5 * delta[..., None] * _TAU_WEIGHTS
    lap = laplacian_amplitude(kappa[..., None], kappa_s[..., None], kappa_ss[..., None], tau)
    weight = np.sqrt((1 - kappa[..., None] * tau) / (1 - kappa[..., None] * delta[..., None]))
    base = np.sum(wts * 0.5 * lap * weight, axis=-1)
    extra = np.sum(wts * weight, axis=-1)
    return a0, base + extra, base - extra


@dataclass
class BarrierData:
    boundary: CurveBoundary
    sigma_s: float
    delta0: float
    eta: float
    lambda0: float | None
    sample_points: np.ndarray
    delta: np.ndarray
    foot: np.ndarray
    kappa: np.ndarray
    A0: np.ndarray
    A_plus: np.ndarray
    A_minus: np.ndarray
    psi: np.ndarray
    eikonal_error: float
    psi_solver: object = None

    def with_lambda0(self, lambda0):
        return BarrierData(**{**self.__dict__, "lambda0": lambda0})


def _tube_points(boundary: CurveBoundary, x, delta0, guesses=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sign = boundary.geometric_sign * boundary.orientation
    foot_t = np.empty(x.shape[0])
    for i, p in enumerate(x):
        foot_t[i], ok = nearest_parameter(boundary, p, None if guesses is None else guesses[i])
        if not ok:
            raise NumericalError("nearest-point iteration did not converge")
    foot = boundary.point(foot_t)
    inward = -sign * boundary.normal(foot_t)
    delta = np.sum((x - foot) * inward, axis=1)
    if np.any(delta < -1e-12) or np.any(delta > delta0 * (1 + 1e-9)):
        raise ConfigurationError("point outside the inner tube")
    delta = np.clip(delta, 0.0, None)
    k, ks, kss = _curvature_jet(boundary, foot_t)
    return _TubePoint(delta, k, ks, kss, foot_t), foot, inward


class _TubeHarmonic:
    """P1 harmonic function on the inner tube: 0 on the curve, 2 on the inner edge."""

    def __init__(self, boundary: CurveBoundary, delta0, n_theta=256, n_depth=24):
        import matplotlib.tri as mtri

        t = 2 * np.pi * np.arange(n_theta) / n_theta
        s = delta0 * np.arange(n_depth + 1) / n_depth
        sign = boundary.geometric_sign * boundary.orientation
        base = boundary.point(t)
        inward = -sign * boundary.normal(t)
        pts = (base[None, :, :] + s[:, None, None] * inward[None, :, :]).reshape(-1, 2)
        idx = np.arange((n_depth + 1) * n_theta).reshape(n_depth + 1, n_theta)
        a, b = idx[:-1], np.roll(idx[:-1], -1, axis=1)
        c, d = idx[1:], np.roll(idx[1:], -1, axis=1)
        tris = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
        area = 0.5 * ((pts[tris[:, 1], 0] - pts[tris[:, 0], 0]) * (pts[tris[:, 2], 1] - pts[tris[:, 0], 1])
                      - (pts[tris[:, 1], 1] - pts[tris[:, 0], 1]) * (pts[tris[:, 2], 0] - pts[tris[:, 0], 0]))
        tris[area < 0] = tris[area < 0][:, [0, 2, 1]]
        from .kernels import p1_local_matrices

        stiff, _, _ = p1_local_matrices(pts, tris)
        n = pts.shape[0]
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        K = sp.csr_matrix((stiff.ravel(), (rows, cols)), shape=(n, n))
        fixed = np.concatenate([idx[0], idx[-1]])
        vals = np.concatenate([np.zeros(n_theta), np.full(n_theta, 2.0)])
        self.values = fem.solve_dirichlet(K, np.zeros(n), fixed, vals)
        self._tri = mtri.Triangulation(pts[:, 0], pts[:, 1], tris)
        self._interp = mtri.LinearTriInterpolator(self._tri, self.values)

    def __call__(self, x):
        x = np.atleast_2d(x)
        z = self._interp(x[:, 0], x[:, 1])
        out = np.ma.filled(z.astype(float), np.nan)
        return out


def build_barrier(boundary: CurveBoundary, sigma_s=1.0, delta0=None, n_theta=32, n_depth=8) -> BarrierData:
    """Tube data for the barriers of a closed plane curve.

    ``delta0`` defaults to ``0.4 / max kappa`` and ``eta`` is ``delta0 /
    (2 sqrt(sigma_s))`` (half the decay rate of the barriers at the inner
    edge of the tube).  ``lambda0`` is filled in by :func:`search_lambda0`.
    """
    dense = 2 * np.pi * np.arange(8 * boundary.n) / (8 * boundary.n)
    kap = boundary.geometric_sign * boundary.orientation * boundary.curvature(dense)
    kmax = float(np.max(np.abs(kap)))
    if delta0 is None:
        delta0 = 0.4 / kmax
    if np.max(kap) >= 1.0 / (2 * delta0):
        raise ConfigurationError("delta0 violates max kappa < 1/(2 delta0)")
    t = 2 * np.pi * np.arange(n_theta) / n_theta
    depth = delta0 * np.arange(1, n_depth + 1) / n_depth
    T, S = np.meshgrid(t, depth, indexing="ij")
    sign = boundary.geometric_sign * boundary.orientation
    pts = boundary.point(T.ravel()) - sign * S.ravel()[:, None] * boundary.normal(T.ravel())
    tp, foot, inward = _tube_points(boundary, pts, delta0, T.ravel())
    a0, ap, am = amplitudes(tp.kappa, tp.kappa_s, tp.kappa_ss, tp.delta)
    # eikonal check: finite-difference gradient of the distance at the samples
    h = 1e-6
    grad = np.empty_like(pts)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        dp = _tube_points(boundary, pts + e, delta0 * (1 + 1e-4) + h, tp.foot_param)[0].delta
        dm = _tube_points(boundary, pts - e, delta0 * (1 + 1e-4) + h, tp.foot_param)[0].delta
        grad[:, j] = (dp - dm) / (2 * h)
    eik = float(np.max(np.abs(np.linalg.norm(grad, axis=1) - 1.0)))
    harmonic = _TubeHarmonic(boundary, delta0)
    psi = harmonic(pts)
    return BarrierData(boundary, float(sigma_s), float(delta0), float(delta0 / (2 * np.sqrt(sigma_s))), None,
                       pts, tp.delta, foot, tp.kappa, a0, ap, am, psi, eik, harmonic)


def barrier_eval(bdata: BarrierData, x, lam):
    """``(f_minus, f_plus, w_minus, w_plus)`` at points of the tube."""
    if bdata.lambda0 is not None and lam < bdata.lambda0 * (1 - 1e-12):
        raise ConfigurationError(f"lambda={lam:g} below the certified lambda0={bdata.lambda0:g}")
    tp, _, _ = _tube_points(bdata.boundary, x, bdata.delta0)
    a0, ap, am = amplitudes(tp.kappa, tp.kappa_s, tp.kappa_ss, tp.delta)
    k = np.sqrt(lam / bdata.sigma_s)
    decay = np.exp(-k * tp.delta)
    f_plus = decay * (a0 + ap / k)
    f_minus = decay * (a0 + am / k)
    psi = bdata.psi_solver(np.atleast_2d(x))
    shift = psi * np.exp(-bdata.eta * np.sqrt(lam))
    return f_minus, f_plus, f_minus - shift, f_plus + shift


def _amplitude_laplacians(bdata: BarrierData, points, h):
    """Five-point Laplacians of ``A_plus`` and ``A_minus`` at ``points``."""
    offsets = [np.zeros(2), np.array([h, 0]), np.array([-h, 0]), np.array([0, h]), np.array([0, -h])]
    vals = []
    for off in offsets:
        tp, _, _ = _tube_points(bdata.boundary, points + off, bdata.delta0 * (1 + 1e-3))
        _, ap, am = amplitudes(tp.kappa, tp.kappa_s, tp.kappa_ss, tp.delta)
        vals.append((ap, am))
    lap_p = (sum(v[0] for v in vals[1:]) - 4 * vals[0][0]) / h ** 2
    lap_m = (sum(v[1] for v in vals[1:]) - 4 * vals[0][1]) / h ** 2
    return lap_p, lap_m


def differential_margins(bdata: BarrierData, lam, h=1e-3):
    """Signs of ``sigma_s Delta f_pm - lambda f_pm`` at the interior tube samples.

    With ``Delta A_pm`` computed by five-point differences, the identity
    ``sigma_s Delta f_pm - lambda f_pm = sigma_s e^{-k delta} (-+2 + Delta A_pm / k)``,
    ``k = sqrt(lambda / sigma_s)``, reduces the check to the bracket.
    Returns ``(plus, minus)``: the plus bracket must be negative and the
    minus bracket positive.
    """
    keep = (bdata.delta > 2 * h) & (bdata.delta < bdata.delta0 - 2 * h)
    pts = bdata.sample_points[keep]
    lap_p, lap_m = _amplitude_laplacians(bdata, pts, h)
    k = np.sqrt(lam / bdata.sigma_s)
    return -2 + lap_p / k, 2 + lap_m / k


def inner_edge_values(bdata: BarrierData, lam, n=64):
    """``max(|f_+|, |f_-|)`` on the inner edge of the tube and the bound ``e^{-eta sqrt(lambda)}``."""
    t = 2 * np.pi * np.arange(n) / n
    sign = bdata.boundary.geometric_sign * bdata.boundary.orientation
    edge = bdata.boundary.point(t) - sign * bdata.delta0 * bdata.boundary.normal(t)
    k = np.sqrt(lam / bdata.sigma_s)
    tp, _, _ = _tube_points(bdata.boundary, edge, bdata.delta0 * (1 + 1e-9), t)
    a0, ap, am = amplitudes(tp.kappa, tp.kappa_s, tp.kappa_ss, tp.delta)
    decay = np.exp(-k * tp.delta)
    return float(np.max(np.abs(np.concatenate([decay * (a0 + ap / k), decay * (a0 + am / k)])))), \
        float(np.exp(-bdata.eta * np.sqrt(lam))), edge


def search_lambda0(bdata: BarrierData, inner_solution=None, start=1.0, factor=2.0, max_steps=40):
    """Smallest ``lambda`` on a geometric grid where the barrier hypotheses hold.

    The hypotheses are the two differential inequalities at the tube samples
    and the inner-edge bound ``max(|f_pm|, w) <= e^{-eta sqrt(lambda)}``;
    ``inner_solution(lam, points)`` supplies ``w`` on the inner edge when given.
    The minus amplitude Laplacian only grows the minus margin with lambda,
    so the first passing grid value is reported.
    """
    lam = start
    for _ in range(max_steps):
        plus, minus = differential_margins(bdata, lam)
        fmax, bound, edge = inner_edge_values(bdata, lam)
        wmax = 0.0 if inner_solution is None else float(np.max(inner_solution(lam, edge)))
        if np.all(plus < 0) and np.all(minus > 0) and max(fmax, wmax) <= bound:
            return bdata.with_lambda0(lam)
        lam *= factor
    raise NumericalError("no lambda0 found on the search grid")


# --------------------------------------------------------------------------
# flux asymptotics and the Cauchy curvature formula
# --------------------------------------------------------------------------

@dataclass
class AsymptoticFit:
    lambdas: np.ndarray
    series: np.ndarray          # d_0/sigma_s - sqrt(lambda/sigma_s), per lambda (and sample)
    constant: np.ndarray        # fitted limit per sample
    coefficients: np.ndarray    # (3, n_samples): constant, 1/sqrt(lambda), 1/lambda
    stderr: np.ndarray
    target: float | None
    flagged: np.ndarray

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("lambda,series,constant,target\n")
            tgt = np.nan if self.target is None else self.target
            for lam, row in zip(self.lambdas, np.atleast_2d(self.series.T).T):
                fh.write(f"{lam:.12e},{float(np.mean(row)):.12e},{float(np.mean(self.constant)):.12e},{tgt:.12e}\n")


def fit_inverse_sqrt(lambdas, series):
    """Least squares ``series = c + a / sqrt(lambda) + b / lambda`` (columns are samples)."""
    lam = np.asarray(lambdas, dtype=float)
    y = np.asarray(series, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    X = np.stack([np.ones_like(lam), lam ** -0.5, 1.0 / lam], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(1, lam.size - 3)
    cov = np.linalg.inv(X.T @ X)
    stderr = np.sqrt(np.sum(resid ** 2, axis=0) / dof * cov[0, 0])
    # a residual pattern that changes sign more than the model allows signals a bad sweep
    flips = np.sum(np.diff(np.sign(resid), axis=0) != 0, axis=0)
    return coef, stderr, resid, flips > lam.size - 1


def flux_asymptotics(sweep, sigma_s=1.0, curvature_sum=None) -> AsymptoticFit:
    """Fit ``d_0(lambda)/sigma_s - sqrt(lambda/sigma_s)`` to ``c + a/sqrt(lambda) + b/lambda``.

    The fitted ``c`` is compared with ``-curvature_sum / 2`` when given.
    """
    if len(sweep) < 4:
        raise ConfigurationError("flux asymptotics need at least 4 lambda values")
    lambdas = np.array([f.lam for f in sweep])
    if np.any(np.diff(lambdas) <= 0):
        raise ConfigurationError("lambda sweep must be increasing")
    d0 = np.stack([np.atleast_1d(f.flux) for f in sweep], axis=0)
    series = d0 / sigma_s - np.sqrt(lambdas / sigma_s)[:, None]
    coef, stderr, _, flagged = fit_inverse_sqrt(lambdas, series)
    target = None if curvature_sum is None else -0.5 * curvature_sum
    return AsymptoticFit(lambdas, series, coef[0], coef, stderr, target, flagged)


def cauchy_curvature_raw(a_tilde, lambdas, cond: Conductivity):
    """``2 (a sqrt(sigma_s) - (1 - a) sqrt(sigma_m)) / (sigma_m (1 - a) + sigma_s a) * sqrt(lambda)``."""
    a = np.asarray(a_tilde, dtype=float)
    lam = np.asarray(lambdas, dtype=float).reshape((-1,) + (1,) * (a.ndim - 1))
    ss, sm = np.sqrt(cond.sigma_s), np.sqrt(cond.sigma_m)
    return 2 * (a * ss - (1 - a) * sm) / (cond.sigma_m * (1 - a) + cond.sigma_s * a) * np.sqrt(lam)


@dataclass
class CurvatureEstimate:
    lambdas: np.ndarray
    raw: np.ndarray
    limit: np.ndarray
    stderr: np.ndarray
    transmission_error: float


def cauchy_curvature_formula(tbd: TransformedBoundaryData, cond: Conductivity, flux_inner=None,
                             flux_outer=None, transmission_tol=1e-6) -> CurvatureEstimate:
    """Mean-curvature estimate from the transformed boundary values.

    ``tbd.values`` may be 1D (one boundary point) or ``(n_lambda, n_points)``.
    When flux traces are given, the transmission identity
    ``sigma_s (d_nu w)_- = sigma_m (d_nu w)_+`` (both supplied already
    multiplied by their conductivity) must hold to ``transmission_tol``
    relative to the flux size.
    """
    err = 0.0
    if flux_inner is not None and flux_outer is not None:
        fi = np.asarray(flux_inner, dtype=float)
        fo = np.asarray(flux_outer, dtype=float)
        err = float(np.max(np.abs(fi - fo)) / max(np.max(np.abs(fi)), 1e-300))
        if err > transmission_tol:
            raise ConfigurationError(f"transmission identity violated (relative error {err:.2e})")
    raw = cauchy_curvature_raw(tbd.values, tbd.lambdas, cond)
    if np.allclose(raw, 0.0, atol=1e-14):
        z = np.zeros(raw.shape[1:] if raw.ndim > 1 else 1)
        return CurvatureEstimate(tbd.lambdas, raw, z, z, err)
    coef, stderr, _, _ = fit_inverse_sqrt(tbd.lambdas, raw)
    return CurvatureEstimate(tbd.lambdas, raw, coef[0], stderr, err)



def planar_curvature_estimates(mesh: fem.Mesh, cond: Conductivity, lambdas, modes=6):
    """Cauchy-formula curvature estimate at every interface node of a planar mesh.

    Returns ``(theta, raw, band)``: the per-node fitted limits and their
    modes ``0..modes`` reconstruction.  The band removes the harmonics of the
    mesh symmetry order, so only the band values are compared across points;
    the absolute level carries the truncation bias of the finite exterior.
    """
    from .parabolic_lab import _band_limited

    s = planar_cauchy_samples(mesh, cond, lambdas)
    zeros = np.zeros(s.lambdas.size)
    tbd = TransformedBoundaryData(s.lambdas, s.values, zeros, zeros)
    est = cauchy_curvature_formula(tbd, cond, s.flux_inner, s.flux_outer)
    raw = np.atleast_1d(est.limit)
    return s.theta, raw, _band_limited(s.theta, raw[None, :], modes)[0]


def radial_cauchy_boundary(geometry: RadialGeometry, cond: Conductivity, lambdas):
    """``a~(lambda) = w(R_outer)`` and the one-sided fluxes from direct radial Cauchy solves.

    Returns ``(TransformedBoundaryData, sigma_s (d_nu w)_-, sigma_m (d_nu w)_+)``.
    """
    vals, fin, fout = [], [], []
    for lam in lambdas:
        w = solve_elliptic_lambda(geometry, cond, lam, kind=CAUCHY)
        at = np.nonzero(np.isclose(w.nodes, geometry.R_outer))[0]
        left, right = at[0], at[-1]
        vals.append(w.values[left])
        fin.append(cond.sigma_s * w.derivative[left])
        fout.append(cond.sigma_m * w.derivative[right])
    lam = np.asarray(lambdas, dtype=float)
    zeros = np.zeros(lam.size)
    return TransformedBoundaryData(lam, np.array(vals), zeros, zeros), np.array(fin), np.array(fout)
