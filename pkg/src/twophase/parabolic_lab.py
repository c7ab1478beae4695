"""Two-phase heat equation experiments and their short-time diagnostics.

Three geometries are supported:

* radial (a ball of radius ``R_outer`` with a concentric core of radius ``R``
  in dimension N, optionally surrounded by an exterior medium for the Cauchy
  problem), solved with a vertex-centred finite-volume scheme;
* a flat interface on the line (Cauchy problem only);
* a planar mesh from :mod:`twophase.shape_newton` (Dirichlet problem only),
  solved with lumped-mass P1 elements.

Time stepping is backward Euler on a geometric grid: each decade
``[10^k t_min, 10^(k+1) t_min]`` is split into the same number of uniform
steps, so the step is small where the short-time diagnostics look.  The
spatial operators are M-matrices in 1D; in 2D every accepted state is
checked against the maximum principle and the whole march is repeated with
halved steps if the check fails.

The diagnostics (flux traces, balance moments, heat contents, interface
limits, decay fits) are read-only post-processing of a :class:`HeatField`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import erfc, erfcinv

from . import fem
from .errors import ConfigurationError, NumericalError
from .kernels import march_backward_euler
from .radial_core import Conductivity

CAUCHY_DIRICHLET = "cauchy_dirichlet"
CAUCHY = "cauchy"
BOX_TOL = 1e-10
BOUND_TOL = 1e-9        # roundoff allowance of the maximum-principle check (dt K / m reaches ~1e7)


# --------------------------------------------------------------------------
# geometry descriptors and grids
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RadialGeometry:
    """Core ``|x| < R``, shell ``R < |x| < R_outer`` in dimension ``dim``.

    For the Cauchy problem the exterior ``|x| > R_outer`` is truncated at
    ``box`` (chosen automatically when ``None``).
    """
    R: float
    R_outer: float = 1.0
    dim: int = 2
    box: float | None = None
    h_fine: float = 2e-4
    h_max: float = 5e-3


@dataclass(frozen=True)
class FlatGeometry:
    """Shell ``x < interface`` and exterior ``x > interface`` on a truncated line."""
    interface: float = 0.0
    half_width: float | None = None
    h_fine: float = 1e-4
    h_max: float = 2e-2


@dataclass(frozen=True)
class PlanarGeometry:
    """A fitted ring mesh of the (perturbed) unit disk with phase tags."""
    mesh: fem.Mesh


def graded_nodes(a, b, cluster_points, h_fine, h_max, growth=1.05):
    """Nodes on ``[a, b]`` with spacing ``h_fine`` at ``cluster_points``.

    The spacing grows geometrically (ratio ``growth``) away from the
    cluster points and is capped at ``h_max``.  Cluster points and the end
    points are always nodes.
    """
    pts = sorted({float(a), float(b), *[float(c) for c in cluster_points if a <= c <= b]})
    nodes = [np.array([pts[0]])]
    slope = growth - 1.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        length = hi - lo
        aux = np.unique(np.concatenate([
            lo + np.geomspace(h_fine * 1e-3, length, 400),
            hi - np.geomspace(h_fine * 1e-3, length, 400),
            np.linspace(lo, hi, 801),
        ]))
        aux = aux[(aux >= lo) & (aux <= hi)]
        dist = np.minimum(aux - lo, hi - aux)
        h = np.minimum(h_max, h_fine + slope * dist)
        inv = 1.0 / h
        xi = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(aux))])
        n = max(2, int(np.ceil(xi[-1])))
        seg = np.interp(np.linspace(0.0, xi[-1], n + 1), xi, aux)
        seg[0], seg[-1] = lo, hi
        nodes.append(seg[1:])
    return np.concatenate(nodes)


def cauchy_box_width(cond: Conductivity, T, tol=BOX_TOL):
    """Distance from the interface at which the free-space bound is ``tol`` at time ``T``.

    A point at distance ``L`` from the initial discontinuity changes by at most
    ``erfc(L / (2 sqrt(sigma_max T)))`` before time ``T``.
    """
    smax = max(cond.sigma_c, cond.sigma_s, cond.sigma_m)
    return float(2.0 * np.sqrt(smax * T) * erfcinv(tol))


def geometric_times(t_min, T, steps_per_decade):
    """``0``, ``t_min`` and uniform sub-steps of every decade up to ``T``."""
    if not (0 < t_min < T):
        raise ConfigurationError("need 0 < t_min < T")
    edges = [t_min]
    while edges[-1] * 10 < T * (1 - 1e-12):
        edges.append(edges[-1] * 10)
    edges.append(T)
    times = [np.array([0.0, t_min])]
    for lo, hi in zip(edges[:-1], edges[1:]):
        n = max(1, int(round(steps_per_decade * np.log10(hi / lo))))
        times.append(np.linspace(lo, hi, n + 1)[1:])
    return np.concatenate(times)


# --------------------------------------------------------------------------
# problem and field
# --------------------------------------------------------------------------

@dataclass
class HeatProblem:
    kind: str
    cond: Conductivity
    geometry: object
    T: float = 1.0
    t_min: float = 1e-6
    steps_per_decade: int = 120
    time_richardson: bool = True
    initial: np.ndarray | None = None     # optional nodal initial data (overrides the default)
    max_halvings: int = 3

    def __post_init__(self):
        if self.kind not in (CAUCHY_DIRICHLET, CAUCHY):
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        g = self.geometry
        if isinstance(g, FlatGeometry) and self.kind != CAUCHY:
            raise ConfigurationError("the flat interface is only set up for the Cauchy problem")
        if isinstance(g, PlanarGeometry) and self.kind != CAUCHY_DIRICHLET:
            raise ConfigurationError("planar meshes are only set up for the Dirichlet problem")
        if isinstance(g, RadialGeometry):
            if not (0 < g.R < g.R_outer):
                raise ConfigurationError("need 0 < R < R_outer")
            if g.dim < 1:
                raise ConfigurationError("dimension must be positive")
        if self.T <= 0:
            raise ConfigurationError("time horizon must be positive")

    def box_width(self):
        """Exterior truncation distance (Cauchy problem), validated against the decay bound."""
        g = self.geometry
        given = g.box - g.R_outer if isinstance(g, RadialGeometry) and g.box else (
            g.half_width if isinstance(g, FlatGeometry) else None)
        needed = cauchy_box_width(self.cond, self.T)
        if given is None:
            return needed
        smax = max(self.cond.sigma_c, self.cond.sigma_s, self.cond.sigma_m)
        bound = erfc(given / (2 * np.sqrt(smax * self.T)))
        if bound > BOX_TOL:
            raise ConfigurationError(
                f"computational box too small: boundary error bound {bound:.2e} > {BOX_TOL:.0e} at T")
        return given


@dataclass
class HeatField:
    problem: HeatProblem
    times: np.ndarray
    values: np.ndarray           # (n_times, n_nodes)
    nodes: np.ndarray | None     # 1D node coordinates (radial or flat)
    mesh: fem.Mesh | None        # planar mesh
    mass: np.ndarray             # lumped control-volume measures
    operator: object             # 1D face coefficients or the 2D stiffness matrix
    fixed: np.ndarray            # Dirichlet node mask
    max_violation: float = 0.0
    halvings: int = 0
    meta: dict = dc_field(default_factory=dict)

    @property
    def dim(self):
        g = self.problem.geometry
        if isinstance(g, RadialGeometry):
            return g.dim
        return 1 if isinstance(g, FlatGeometry) else 2

    @property
    def is_radial(self):
        return isinstance(self.problem.geometry, RadialGeometry)

    def total_heat(self):
        """``int u dx`` per stored time (in the radial case without the sphere-area factor)."""
        return self.values @ self.mass

    def at_time(self, t):
        """Nodal values at time ``t`` (linear interpolation between stored steps)."""
        j = np.searchsorted(self.times, t)
        if j < self.times.size and np.isclose(self.times[j], t, rtol=1e-12, atol=0):
            return self.values[j]
        if j == 0 or j >= self.times.size:
            raise ConfigurationError(f"time {t} outside the stored range")
        a, b = self.times[j - 1], self.times[j]
        s = (t - a) / (b - a)
        return (1 - s) * self.values[j - 1] + s * self.values[j]

    def profile(self, rho, t=None):
        """1D fields: values at coordinates ``rho`` (all times, or at ``t``)."""
        if self.nodes is None:
            raise ConfigurationError("profile() needs a 1D field")
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        if t is not None:
            return np.interp(rho, self.nodes, self.at_time(t))
        return np.stack([np.interp(rho, self.nodes, v) for v in self.values], axis=0)


# --------------------------------------------------------------------------
# 1D finite volumes
# --------------------------------------------------------------------------

def _fv_operator(nodes, cell_sigma, dim):
    """Lumped masses and face conductances of the vertex-centred scheme.

    The control volume of node ``i`` is ``[x_{i-1/2}, x_{i+1/2}]`` with the
    measure ``|x|^(dim-1) dx``; the face between nodes ``i`` and ``i+1``
    carries ``sigma |x_mid|^(dim-1) / h``.
    """
    x = nodes
    mid = 0.5 * (x[1:] + x[:-1])
    h = np.diff(x)
    edges = np.concatenate([[x[0]], mid, [x[-1]]])
    if dim == 1:
        mass = np.diff(edges)
    else:
        mass = (np.abs(edges[1:]) ** dim - np.abs(edges[:-1]) ** dim) / dim
    coef = cell_sigma * np.abs(mid) ** (dim - 1) / h
    return mass, coef


def _setup_1d(problem: HeatProblem):
    g = problem.geometry
    c = problem.cond
    if isinstance(g, RadialGeometry):
        if problem.kind == CAUCHY:
            right = g.R_outer + problem.box_width()
            nodes = graded_nodes(0.0, right, [g.R, g.R_outer], g.h_fine, max(g.h_max, 0.0))
            breaks = [g.R, g.R_outer]
            sigmas = [c.sigma_c, c.sigma_s, c.sigma_m]
        else:
            nodes = graded_nodes(0.0, g.R_outer, [g.R, g.R_outer], g.h_fine, g.h_max)
            breaks = [g.R]
            sigmas = [c.sigma_c, c.sigma_s]
        dim = g.dim
        fixed = np.zeros(nodes.size, dtype=bool)
        fixed[-1] = True
        boundary_value = np.array([1.0])
    else:
        width = problem.box_width()
        nodes = graded_nodes(g.interface - width, g.interface + width, [g.interface], g.h_fine, g.h_max)
        breaks = [g.interface]
        sigmas = [c.sigma_s, c.sigma_m]
        dim = 1
        fixed = np.zeros(nodes.size, dtype=bool)
        fixed[[0, -1]] = True
        boundary_value = np.array([0.0, 1.0])
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    cell_sigma = np.asarray(sigmas)[np.searchsorted(np.asarray(breaks), mid)]
    mass, coef = _fv_operator(nodes, cell_sigma, dim)

    u0 = np.zeros(nodes.size)
    if problem.initial is not None:
        u0 = np.asarray(problem.initial, dtype=float).copy()
        if u0.shape != nodes.shape:
            raise ConfigurationError(f"initial data must have {nodes.size} nodal values")
    elif problem.kind == CAUCHY:
        # cell averages of the exterior indicator
        lo = np.concatenate([[nodes[0]], mid])
        hi = np.concatenate([mid, [nodes[-1]]])
        edge = breaks[-1]
        if dim == 1:
            outside = np.clip(hi - np.maximum(lo, edge), 0, None)
        else:
            outside = np.clip((np.abs(hi) ** dim - np.abs(np.maximum(lo, edge)) ** dim) / dim, 0, None)
        u0 = np.where(mass > 0, outside / mass, 0.0)
    u0[fixed] = boundary_value
    return nodes, mass, coef, fixed, u0


def _march_1d(mass, coef, fixed, u0, times):
    """Backward Euler with the Dirichlet nodes (at the ends) eliminated."""
    free = np.nonzero(~fixed)[0]
    lo, hi = free[0], free[-1]
    if np.any(fixed[lo:hi + 1]):
        raise ConfigurationError("Dirichlet nodes must sit at the ends of the 1D grid")
    n = u0.size
    kd = np.zeros(n)
    kd[:-1] += coef
    kd[1:] += coef
    load = np.zeros(n)
    if lo > 0:
        load[lo] += coef[lo - 1] * u0[lo - 1]
    if hi < n - 1:
        load[hi] += coef[hi] * u0[hi + 1]
    sl = slice(lo, hi + 1)
    inner = march_backward_euler(mass[sl], kd[sl], -coef[lo:hi], load[sl], u0[sl], times,
                                 np.ones(times.size, dtype=bool))
    out = np.tile(u0, (times.size, 1))
    out[:, sl] = inner
    return out


# --------------------------------------------------------------------------
# 2D lumped P1
# --------------------------------------------------------------------------

def _setup_planar(problem: HeatProblem):
    mesh = problem.geometry.mesh
    asm = fem.assemble(mesh, problem.cond.sigma_c, problem.cond.sigma_s, lumped=True)
    fixed = np.zeros(mesh.n_nodes, dtype=bool)
    fixed[mesh.outer_nodes] = True
    u0 = np.zeros(mesh.n_nodes)
    if problem.initial is not None:
        u0 = np.asarray(problem.initial, dtype=float).copy()
    u0[fixed] = 1.0
    return mesh, asm.mass.diagonal(), asm.stiffness.tocsr(), fixed, u0


def _march_planar(mass, K, fixed, u0, times):
    free = ~fixed
    Kff = K[free][:, free]
    Kfb = K[free][:, fixed]
    ub = u0[fixed]
    out = np.empty((times.size, u0.size))
    out[0] = u0
    u = u0.copy()
    solver, last_dt = None, None
    for s in range(times.size - 1):
        dt = times[s + 1] - times[s]
        if solver is None or not np.isclose(dt, last_dt, rtol=1e-9, atol=0):
            solver = spla.splu((sp.diags(mass[free]) + dt * Kff).tocsc())
            last_dt = dt
        u[free] = solver.solve(mass[free] * u[free] - dt * (Kfb @ ub))
        out[s + 1] = u
    return out


def _bound_violation(values, fixed):
    inner = values[1:, ~fixed]
    return float(max(0.0, -inner.min(), inner.max() - 1.0))


def simulate(problem: HeatProblem) -> HeatField:
    """Backward Euler solution on the problem's geometric time grid.

    With ``time_richardson`` the march is repeated with half steps and the
    two runs are combined as ``2 fine - coarse`` (first-order extrapolation).
    The maximum principle is checked on the raw runs.
    """
    g = problem.geometry
    if isinstance(g, PlanarGeometry):
        mesh, mass, op, fixed, u0 = _setup_planar(problem)
        nodes = None

        def march(times):
            return _march_planar(mass, op, fixed, u0, times)
    else:
        nodes, mass, op, fixed, u0 = _setup_1d(problem)
        mesh = None

        def march(times):
            return _march_1d(mass, op, fixed, u0, times)

    per_decade = problem.steps_per_decade
    for halvings in range(problem.max_halvings + 1):
        times = geometric_times(problem.t_min, problem.T, per_decade)
        coarse = march(times)
        violation = _bound_violation(coarse, fixed)
        if problem.time_richardson and violation <= BOUND_TOL:
            fine_times = np.empty(2 * times.size - 1)
            fine_times[::2] = times
            fine_times[1::2] = 0.5 * (times[1:] + times[:-1])
            fine = march(fine_times)
            violation = max(violation, _bound_violation(fine, fixed))
        if violation <= BOUND_TOL:
            break
        per_decade *= 2
    else:
        raise NumericalError(f"maximum principle violated by {violation:.2e} after step halving",
                             residual=violation)
    values = coarse
    limited = 0
    if problem.time_richardson:
        values = 2.0 * fine[::2] - coarse
        values[0] = coarse[0]
        # the extrapolation is not monotone ahead of the diffusion front; where it leaves
        # [0, 1] the half-step run (which obeys the maximum principle) is kept instead
        bad = (values < 0.0) | (values > 1.0)
        values[bad] = fine[::2][bad]
        limited = int(np.count_nonzero(bad))
    return HeatField(problem, times, values, nodes, mesh, mass, op, fixed, violation, halvings,
                     {"steps_per_decade": per_decade, "n_nodes": int(u0.size), "limited_samples": limited})


# --------------------------------------------------------------------------
# flux traces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Circle:
    """Concentric circle (sphere) of the given radius, for radial fields."""
    radius: float
    n_samples: int = 64


@dataclass(frozen=True)
class MeshRing:
    """Ring of a planar mesh, identified by its reference radius (1.0 = outer boundary)."""
    ref_radius: float = 1.0


@dataclass
class FluxTrace:
    surface: object
    points: np.ndarray           # (n_pts, 2)
    theta: np.ndarray
    times: np.ndarray
    values: np.ndarray           # (n_times, n_pts) sigma_s d_nu u
    spread: np.ndarray           # max - min over the surface, per time
    band_spread: np.ndarray      # same for the Fourier modes <= modes reconstruction
    scale: np.ndarray            # |mean flux| per time
    modes: int

    def relative_spread(self, band=True):
        s = self.band_spread if band else self.spread
        return s / np.maximum(self.scale, np.finfo(float).tiny)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,d,spread,band_spread\n")
            for t, d, s, b in zip(self.times, self.values.mean(axis=1), self.spread, self.band_spread):
                fh.write(f"{t:.12e},{d:.12e},{s:.12e},{b:.12e}\n")


def _band_limited(theta, values, modes):
    from .shape_newton import modal_projection

    out = np.empty_like(values)
    for j, row in enumerate(values):
        mean, a, b = modal_projection(theta, row, modes)
        k = np.arange(1, modes + 1)
        out[j] = mean + np.cos(np.outer(theta, k)) @ a + np.sin(np.outer(theta, k)) @ b
    return out


def _radial_flux(field: HeatField, rho):
    g = field.problem.geometry
    x = field.nodes
    if not (g.R - 1e-12 <= rho <= g.R_outer + 1e-12):
        raise ConfigurationError("flux surface must lie in the closure of the shell")
    shell = np.nonzero((x >= g.R - 1e-12) & (x <= g.R_outer + 1e-12))[0]
    near = shell[np.argsort(np.abs(x[shell] - rho))[:3]]
    near.sort()
    xs = x[near]
    # derivative of the quadratic through three shell nodes
    w = np.empty(3)
    for i in range(3):
        o = [j for j in range(3) if j != i]
        w[i] = (2 * rho - xs[o[0]] - xs[o[1]]) / ((xs[i] - xs[o[0]]) * (xs[i] - xs[o[1]]))
    return field.problem.cond.sigma_s * (field.values[:, near] @ w)


def _ring_nodes(mesh: fem.Mesh, ref_radius):
    lay = mesh.layout
    k = int(np.argmin(np.abs(lay.radii - ref_radius)))
    if not np.isclose(lay.radii[k], ref_radius, atol=1e-9):
        raise ConfigurationError(f"no mesh ring at reference radius {ref_radius}")
    return k, np.arange(lay.offsets[k], lay.offsets[k] + lay.counts[k])


def _planar_flux(field: HeatField, surface: MeshRing):
    mesh = field.mesh
    k, ring = _ring_nodes(mesh, surface.ref_radius)
    if k < mesh.layout.interface_ring:
        raise ConfigurationError("flux surface intersects the core")
    inside = np.all(mesh.ref_r[mesh.triangles] <= mesh.layout.radii[k] + 1e-12, axis=1)
    sub = fem.Mesh(mesh.layout, mesh.ref_r, mesh.ref_theta, mesh.points, mesh.triangles[inside],
                   mesh.phase[inside], mesh.outer_nodes, mesh.interface_nodes)
    c = field.problem.cond
    asm = fem.assemble(sub, c.sigma_c, c.sigma_s, lumped=True)
    m = asm.mass.diagonal()[ring]
    K = asm.stiffness.tocsr()[ring]
    dt = np.diff(field.times)
    du = np.diff(field.values[:, ring], axis=0) / dt[:, None]
    react = (K @ field.values[1:].T).T + m[None, :] * du
    p = mesh.points[ring]
    length = 0.5 * (np.linalg.norm(np.roll(p, -1, 0) - p, axis=1) + np.linalg.norm(p - np.roll(p, 1, 0), axis=1))
    return ring, react / length[None, :]


def flux_trace(field: HeatField, surface, modes=6) -> FluxTrace:
    """Sample ``sigma_s d_nu u`` on a surface in the shell at every stored time ``t > 0``.

    For planar fields the flux is variational: the residual of the
    equations of the nodes on the ring, for the sub-problem inside the ring,
    divided by the nodal arc length.  ``band_spread`` measures the spread of
    the Fourier modes ``0..modes`` of the trace, which removes the mesh
    symmetry harmonics (multiples of the rotation order).
    """
    times = field.times[1:]
    if field.is_radial:
        if not isinstance(surface, Circle):
            raise ConfigurationError("radial fields take Circle surfaces")
        theta = 2 * np.pi * np.arange(surface.n_samples) / surface.n_samples
        d = _radial_flux(field, surface.radius)[1:]
        values = np.repeat(d[:, None], theta.size, axis=1)
        points = surface.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    elif field.mesh is not None:
        if not isinstance(surface, MeshRing):
            raise ConfigurationError("planar fields take MeshRing surfaces")
        ring, values = _planar_flux(field, surface)
        theta = field.mesh.ref_theta[ring]
        points = field.mesh.points[ring]
    else:
        raise ConfigurationError("flux traces need a radial or planar field")
    spread = values.max(axis=1) - values.min(axis=1)
    band = _band_limited(theta, values, modes)
    band_spread = band.max(axis=1) - band.min(axis=1)
    scale = np.abs(values.mean(axis=1))
    return FluxTrace(surface, points, theta, times, values, spread, band_spread, scale, modes)


# --------------------------------------------------------------------------
# ball integrals
# --------------------------------------------------------------------------

def _gauss_sqrt_ends(a, b, n):
    """Nodes and weights on [a, b] after s = a + (b-a)(1 - cos phi)/2.

    The substitution removes square-root behaviour at both ends.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    phi = 0.5 * np.pi * (x + 1)
    s = a + 0.5 * (b - a) * (1 - np.cos(phi))
    ws = w * 0.5 * np.pi * 0.5 * (b - a) * np.sin(phi)
    return s, ws


def _spherical_weights(s, d, r, dim, moment):
    """Measure (or first moment along the centre direction) of ``{|y| = s} cap B_r(p)``, ``|p| = d``."""
    if d == 0:
        full = s < r
        if moment:
            return np.zeros_like(s)
        area = 2 * np.pi * s if dim == 2 else 4 * np.pi * s ** 2
        return np.where(full, area, 0.0)
    c = np.clip((s ** 2 + d ** 2 - r ** 2) / (2 * s * d), -1.0, 1.0)
    alpha = np.arccos(c)
    if dim == 2:
        if moment:
            return 2 * s ** 2 * np.sin(alpha) - 2 * s * d * alpha
        return 2 * s * alpha
    if dim == 3:
        if moment:
            return 2 * np.pi * s ** 2 * (0.5 * s * np.sin(alpha) ** 2 - d * (1 - np.cos(alpha)))
        return 2 * np.pi * s ** 2 * (1 - np.cos(alpha))
    raise ConfigurationError("radial ball integrals are implemented for N = 2, 3")


def _radial_ball(field: HeatField, p, r, moment, n_quad=4000):
    d = float(np.linalg.norm(p))
    a, b = max(0.0, d - r), d + r
    cuts = [a, b]
    if r > d:
        cuts.insert(1, r - d)
    s_all, w_all = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi > lo:
            s, w = _gauss_sqrt_ends(lo, hi, n_quad)
            s_all.append(s)
            w_all.append(w)
    s = np.concatenate(s_all)
    w = np.concatenate(w_all) * _spherical_weights(s, d, r, field.dim, moment)
    u = np.stack([np.interp(s, field.nodes, v) for v in field.values], axis=0)
    return u @ w


def _polar_rule(r, n_radial, n_angle):
    rho = (np.arange(n_radial) + 0.5) * r / n_radial
    phi = 2 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
    return rho, phi, (r / n_radial) * (2 * np.pi / n_angle)


def _planar_ball(field: HeatField, p, nu, r, moment, n_radial=48, n_angle=96):
    import matplotlib.tri as mtri

    rho, phi, cell = _polar_rule(r, n_radial, n_angle)
    base = np.arctan2(nu[1], nu[0])
    rr, pp = np.meshgrid(rho, phi + base, indexing="ij")
    x = p[0] + rr * np.cos(pp)
    y = p[1] + rr * np.sin(pp)
    weight = rr * cell * (rr * np.cos(pp - base) if moment else 1.0)
    tri = mtri.Triangulation(field.mesh.points[:, 0], field.mesh.points[:, 1], field.mesh.triangles)
    finder = tri.get_trifinder()
    out = np.empty(field.times.size)
    for j, vals in enumerate(field.values):
        z = mtri.LinearTriInterpolator(tri, vals, trifinder=finder)(x, y)
        if np.ma.is_masked(z) and np.ma.count_masked(z):
            raise ConfigurationError("ball leaves the mesh")
        out[j] = float(np.sum(np.asarray(z) * weight))
    return out


def _distance_to_polyline(points, p):
    a = points
    b = np.roll(points, -1, axis=0)
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0, 1)
    return float(np.min(np.linalg.norm(a + t[:, None] * ab - p, axis=1)))


def _admissible_radii(field: HeatField, p):
    """(distance to the outer boundary, distance to the core or None if p is in the core)."""
    g = field.problem.geometry
    if field.is_radial:
        d = float(np.linalg.norm(p))
        to_core = d - g.R if d > g.R else None
        return g.R_outer - d, to_core
    mesh = field.mesh
    outer = _distance_to_polyline(mesh.points[mesh.outer_nodes], p)
    iface = mesh.points[mesh.interface_nodes]
    import matplotlib.path as mpath

    in_core = mpath.Path(iface).contains_point(p)
    return outer, None if in_core else _distance_to_polyline(iface, p)


@dataclass
class BalanceMoment:
    point: np.ndarray
    nu: np.ndarray
    radius: float
    times: np.ndarray
    values: np.ndarray


def balance_moment(field: HeatField, p, nu, r, **quad) -> BalanceMoment:
    """``int_{B_r(p)} u(y, t) (y - p) . nu dy`` at every stored time.

    The ball must stay inside the domain and, for a point in the shell, away
    from the closure of the core.
    """
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    to_bdry, to_core = _admissible_radii(field, p)
    if r >= to_bdry or (to_core is not None and r >= to_core):
        raise ConfigurationError("inadmissible ball: it leaves the domain or touches the core")
    if field.is_radial:
        d = np.linalg.norm(p)
        along = float(np.dot(p / d, nu)) if d > 0 else 0.0
        vals = along * _radial_ball(field, p, r, moment=True, **quad)
    elif field.mesh is not None:
        vals = _planar_ball(field, p, nu, r, moment=True, **quad)
    else:
        raise ConfigurationError("balance moments need a radial or planar field")
    return BalanceMoment(p, nu, float(r), field.times, vals)


def moment_spread(moments, r=None):
    """Spread of the moments across points, relative to the bound ``|B_r| r``."""
    vals = np.stack([m.values for m in moments], axis=0)
    r = moments[0].radius if r is None else r
    dim = 2 if moments[0].point.size == 2 else 3
    bound = (np.pi * r ** 3) if dim == 2 else (4 / 3 * np.pi * r ** 4)
    return (vals.max(axis=0) - vals.min(axis=0)) / bound


@dataclass
class HeatContent:
    center: np.ndarray
    radius: float
    times: np.ndarray
    content: np.ndarray
    rescaled: np.ndarray         # t^{-(N+1)/4} content (nan at t = 0)
    exponent: float

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,content,rescaled\n")
            for t, c, s in zip(self.times[1:], self.content[1:], self.rescaled[1:]):
                fh.write(f"{t:.12e},{c:.12e},{s:.12e}\n")


def heat_content(field: HeatField, center, r, **quad) -> HeatContent:
    """Ball integrals ``int_{B_r(center)} u`` and the rescaled series ``t^{-(N+1)/4}`` times them."""
    center = np.asarray(center, dtype=float)
    if field.is_radial:
        content = _radial_ball(field, center, r, moment=False, **quad)
    elif field.mesh is not None:
        content = _planar_ball(field, center, np.array([1.0, 0.0]), r, moment=False, **quad)
    else:
        raise ConfigurationError("heat content needs a radial or planar field")
    expo = (field.dim + 1) / 4
    with np.errstate(divide="ignore", invalid="ignore"):
        rescaled = np.where(field.times > 0, content / field.times ** expo, np.nan)
    return HeatContent(center, float(r), field.times, content, rescaled, expo)


# --------------------------------------------------------------------------
# short-time limits
# --------------------------------------------------------------------------

@dataclass
class Extrapolation:
    value: float
    table: list
    monotone: bool


def richardson_to_zero(times, values, power=0.5):
    """Extrapolate ``f(t) = L + a t^p + b t^(2p) + ...`` to ``t = 0``.

    ``times`` must form a geometric sequence (decreasing); every column of the
    Neville table removes one power of ``t^p``.  ``monotone`` is False when the
    successive samples do not approach the limit monotonically (the
    extrapolation is then not trusted).
    """
    t = np.asarray(times, dtype=float)
    f = np.asarray(values, dtype=float)
    q = t[0] / t[1]
    if not np.allclose(t[:-1] / t[1:], q, rtol=1e-9):
        raise ConfigurationError("Richardson extrapolation needs a geometric time sequence")
    factor = q ** power
    table = [f]
    col = f
    for level in range(1, f.size):
        fk = factor ** level
        col = (fk * col[1:] - col[:-1]) / (fk - 1)
        table.append(col)
    diffs = np.diff(f)
    monotone = bool(np.all(diffs > 0) or np.all(diffs < 0) or np.all(diffs == 0))
    return Extrapolation(float(col[-1]), table, monotone)


def similarity_limit(cond: Conductivity):
    """``sqrt(sigma_m) / (sqrt(sigma_s) + sqrt(sigma_m))``."""
    return np.sqrt(cond.sigma_m) / (np.sqrt(cond.sigma_s) + np.sqrt(cond.sigma_m))


@dataclass
class InterfaceLimit:
    points: np.ndarray
    estimates: np.ndarray
    flagged: np.ndarray
    target: float
    samples: np.ndarray          # (n_points, levels) values used


def interface_limit(field: HeatField, points=None, t_ref=1e-2, levels=3, ratio=4.0):
    """Richardson-extrapolated ``t -> 0`` value of ``u`` on the boundary of the shell.

    Samples are taken at ``t_ref, t_ref/ratio, ...`` assuming an expansion
    in powers of ``sqrt(t)``.
    """
    if field.problem.kind != CAUCHY:
        raise ConfigurationError("interface limits are defined for the Cauchy problem")
    g = field.problem.geometry
    if isinstance(g, RadialGeometry):
        default = np.array([g.R_outer])
    else:
        default = np.array([g.interface])
    points = default if points is None else np.atleast_1d(np.asarray(points, dtype=float))
    ts = t_ref / ratio ** np.arange(levels)
    samples = np.stack([field.profile(points, t) for t in ts], axis=1)
    est, flag = [], []
    for row in samples:
        ex = richardson_to_zero(ts, row, 0.5)
        est.append(ex.value)
        flag.append(not ex.monotone)
    return InterfaceLimit(points, np.array(est), np.array(flag), float(similarity_limit(field.problem.cond)),
                          samples)


@dataclass
class DecayFit:
    log_B: float
    b: float
    slope: float
    residual: float


def decay_fit(field: HeatField, point, t_lo, t_hi):
    """Least-squares fit ``log u = log B - b / t`` over the stored times in ``[t_lo, t_hi]``."""
    sel = (field.times >= t_lo) & (field.times <= t_hi)
    if np.count_nonzero(sel) < 3:
        raise ConfigurationError("need at least three stored times in the fit window")
    if field.nodes is not None:
        u = np.array([np.interp(point, field.nodes, v) for v in field.values[sel]])
    else:
        u = np.array([fem.interpolate_p1(field.mesh, v, np.atleast_2d(point))[0] for v in field.values[sel]])
    if np.any(u <= 0):
        raise NumericalError("nonpositive values in the decay window")
    x = 1.0 / field.times[sel]
    slope, intercept = np.polyfit(x, np.log(u), 1)
    resid = float(np.max(np.abs(np.log(u) - (intercept + slope * x))))
    return DecayFit(float(intercept), float(-slope), float(slope), resid)
