"""Radial two-phase elliptic problems on concentric balls.

The workhorse is :func:`solve_radial_ode`, a second-order finite-difference
solver for

    sigma (u'' + (N-1)/r u' - m/r^2 u) - beta u = -source      (per phase)

with piecewise-constant ``sigma``/``source``, interfaces resolved on grid
nodes (duplicated unknowns), prescribed value jumps and flux continuity
across interfaces, regularity at the origin and a Dirichlet value at the
outer end.  Grids are generated from a mapping so that a refined grid
contains the coarse one; this is what makes Richardson extrapolation valid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicHermiteSpline

from .errors import ConfigurationError, NumericalError

DEFAULT_TOL = 1e-10
FLAG_THRESHOLD = 1e-8
K_MAX_CAP = 64


# --------------------------------------------------------------------------
# parameter types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Conductivity:
    sigma_c: float
    sigma_s: float
    sigma_m: float = 1.0

    def __post_init__(self):
        for name in ("sigma_c", "sigma_s", "sigma_m"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigurationError(f"{name} must be positive, got {v!r}")

    @property
    def two_phase(self):
        return self.sigma_c != self.sigma_s

    def require_two_phase(self):
        if not self.two_phase:
            raise ConfigurationError("operation needs sigma_c != sigma_s")


@dataclass(frozen=True)
class EllipticParams:
    beta: float = 0.0
    gamma: float = 1.0
    c_bdry: float = 0.0
    dim: int = 2

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta!r}")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma!r}")
        if int(self.dim) != self.dim or self.dim < 2:
            raise ConfigurationError(f"dim must be an integer >= 2, got {self.dim!r}")


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

def _stretch(xi, s):
    """Map [0,1] -> [0,1]; s > 0 clusters nodes at 1, s < 0 at 0."""
    if s == 0:
        return xi
    return (np.expm1(s * xi)) / np.expm1(s) if s < 0 else 1.0 - np.expm1(s * (1.0 - xi)) / np.expm1(s)


@dataclass(frozen=True)
class RadialGrid:
    """Piecewise mapped grid.  ``breaks`` are segment ends (all grid nodes)."""

    breaks: tuple
    counts: tuple
    cluster: tuple = None

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        if b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ConfigurationError("breaks must start at 0 and increase strictly")
        if len(self.counts) != len(b) - 1 or min(self.counts) < 2:
            raise ConfigurationError("need one count >= 2 per segment")
        if self.cluster is not None and len(self.cluster) != len(self.counts):
            raise ConfigurationError("cluster needs one entry per segment")

    @property
    def nodes(self):
        pieces = [np.zeros(1)]
        cl = self.cluster or (0.0,) * len(self.counts)
        for a, b, n, s in zip(self.breaks[:-1], self.breaks[1:], self.counts, cl):
            xi = np.arange(1, n + 1) / n
            seg = a + (b - a) * _stretch(xi, s)
            seg[-1] = b
            pieces.append(seg)
        return np.concatenate(pieces)

    @property
    def interface_nodes(self):
        return tuple(int(i) for i in np.cumsum(self.counts)[:-1])

    def refined(self, factor=2):
        return RadialGrid(self.breaks, tuple(factor * c for c in self.counts), self.cluster)


@dataclass(frozen=True)
class RadialConfig:
    """Core ``B_R`` inside ``B_{R_outer}`` (``R_outer = 1`` by convention)."""

    R_inner: float
    grid_spec: RadialGrid
    R_outer: float = 1.0

    def __post_init__(self):
        if not (0 < self.R_inner < self.R_outer):
            raise ConfigurationError("need 0 < R_inner < R_outer")
        br = self.grid_spec.breaks
        if len(br) != 3 or br[1] != self.R_inner or br[2] != self.R_outer:
            raise ConfigurationError("interface radius must be a grid node")

    @classmethod
    def uniform(cls, R_inner, n_nodes=4096, R_outer=1.0):
        n_int = n_nodes - 1
        n_core = max(3, int(round(R_inner / R_outer * n_int)))
        return cls(R_inner, RadialGrid((0.0, R_inner, R_outer), (n_core, n_int - n_core)), R_outer)

    @classmethod
    def graded(cls, R_inner, n_nodes=4096, cluster=4.0, R_outer=1.0):
        """Shell nodes clustered toward the outer boundary."""
        n_int = n_nodes - 1
        n_core = max(3, int(round(0.5 * R_inner / R_outer * n_int)))
        spec = RadialGrid((0.0, R_inner, R_outer), (n_core, n_int - n_core), (0.0, cluster))
        return cls(R_inner, spec, R_outer)

    @classmethod
    def from_nodes(cls, R_inner, nodes):
        """Accept an explicit node vector; it must contain ``R_inner`` exactly."""
        nodes = np.asarray(nodes, dtype=float)
        hit = np.nonzero(nodes == R_inner)[0]
        if hit.size != 1:
            raise ConfigurationError(f"R_inner={R_inner} is not a node of the grid")
        if nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ConfigurationError("grid must start at 0 and increase strictly")
        return _ExplicitConfig(R_inner, nodes)

    @property
    def grid(self):
        return self.grid_spec.nodes

    def refined(self):
        return RadialConfig(self.R_inner, self.grid_spec.refined(), self.R_outer)


class _ExplicitConfig:
    """Config built from user nodes; refinement inserts midpoints."""

    def __init__(self, R_inner, nodes):
        self.R_inner = float(R_inner)
        self.R_outer = float(nodes[-1])
        self._nodes = nodes

    @property
    def grid(self):
        return self._nodes

    @property
    def grid_spec(self):
        return self

    @property
    def nodes(self):
        return self._nodes

    @property
    def interface_nodes(self):
        return (int(np.nonzero(self._nodes == self.R_inner)[0][0]),)

    def refined(self):
        mid = 0.5 * (self._nodes[1:] + self._nodes[:-1])
        fine = np.empty(2 * self._nodes.size - 1)
        fine[0::2] = self._nodes
        fine[1::2] = mid
        return _ExplicitConfig(self.R_inner, fine)


# --------------------------------------------------------------------------
# the generic solver
# --------------------------------------------------------------------------

@dataclass
class _RawRadial:
    r: np.ndarray          # nodes
    left: np.ndarray       # value seen from the phase on the left
    right: np.ndarray      # value seen from the phase on the right
    dleft: np.ndarray
    dright: np.ndarray
    iface: tuple
    residual: float
    matrix: object = None


def _weights_centered(hm, hp):
    """Second and first derivative weights at a node (u[i-1], u[i], u[i+1])."""
    d2 = np.array([2.0 / (hm * (hm + hp)), -2.0 / (hm * hp), 2.0 / (hp * (hm + hp))])
    d1 = np.array([-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))])
    return d2, d1


def _weights_backward(h1, h2):
    """u'(x0) from u(x0), u(x0-h1), u(x0-h1-h2)."""
    return np.array([(2 * h1 + h2) / (h1 * (h1 + h2)), -(h1 + h2) / (h1 * h2), h1 / (h2 * (h1 + h2))])


def _weights_forward(h1, h2):
    """u'(x0) from u(x0), u(x0+h1), u(x0+h1+h2)."""
    return -_weights_backward(h1, h2)


def solve_radial_ode(nodes, iface, sigmas, *, dim, beta=0.0, sources=None, k=0,
                     outer_value=0.0, jumps=None, keep_matrix=False):
    """One finite-difference solve on a fixed grid.

    ``iface`` lists node indices carrying interfaces, ``sigmas``/``sources``
    give one value per phase (len(iface)+1), ``jumps[j]`` is the prescribed
    ``u(r+) - u(r-)`` at interface ``j``.  ``k`` is the angular mode: the
    centrifugal coefficient is ``k (k + N - 2)``.
    """
    r = np.asarray(nodes, dtype=float)
    n = r.size - 1
    iface = tuple(iface)
    nph = len(iface) + 1
    sigmas = tuple(float(s) for s in sigmas)
    if len(sigmas) != nph:
        raise ConfigurationError("one conductivity per phase required")
    sources = tuple(float(s) for s in (sources or (0.0,) * nph))
    jumps = tuple(float(j) for j in (jumps or (0.0,) * len(iface)))
    if k > 0 and any(sources):
        raise ConfigurationError("nonzero modes carry no source term")
    if iface and iface[0] < 4:
        raise ConfigurationError("first interface too close to the origin")
    cent = k * (k + dim - 2)

    # unknown numbering; interface nodes own two unknowns
    bounds = (0,) + iface + (n,)
    uid_left = np.empty(n + 1, dtype=np.int64)
    uid_right = np.empty(n + 1, dtype=np.int64)
    count = 0
    iset = set(iface)
    for i in range(n + 1):
        uid_left[i] = count
        if i in iset:
            count += 1
        uid_right[i] = count
        count += 1
    nunk = count

    def uid(i, p):
        # unknown of node i as seen from phase p
        return uid_right[i] if i == bounds[p] else uid_left[i]

    rows, cols, vals = [], [], []
    rhs = np.zeros(nunk)

    def put(row, col, v):
        rows.append(row)
        cols.append(col)
        vals.append(v)

    # origin
    s0 = sigmas[0]
    if k == 0:
        h1 = r[1] - r[0]
        put(0, uid(0, 0), -2.0 * dim * s0 / h1 ** 2 - beta)
        put(0, uid(1, 0), 2.0 * dim * s0 / h1 ** 2)
        rhs[0] = -sources[0]
        first_interior = 1
    else:
        put(0, uid(0, 0), 1.0)
        mu = beta / s0
        a1 = mu / (2.0 * (2 * k + dim))
        ratio = (r[2] / r[1]) ** k * (1 + a1 * r[2] ** 2) / (1 + a1 * r[1] ** 2)
        row = uid(1, 0)
        put(row, uid(2, 0), 1.0)
        put(row, uid(1, 0), -ratio)
        first_interior = 2

    for p in range(nph):
        a, b = bounds[p], bounds[p + 1]
        sig = sigmas[p]
        lo = max(a + 1, first_interior)
        for i in range(lo, b):
            hm = r[i] - r[i - 1]
            hp = r[i + 1] - r[i]
            d2, d1 = _weights_centered(hm, hp)
            w = sig * (d2 + (dim - 1) / r[i] * d1)
            w[1] -= sig * cent / r[i] ** 2 + beta
            row = uid(i, p)
            for off, wt in zip((-1, 0, 1), w):
                put(row, uid(i + off, p), wt)
            rhs[row] = -sources[p]

    for j, i in enumerate(iface):
        pl, pr = j, j + 1
        uL, uR = uid_left[i], uid_right[i]
        # value jump
        put(uL, uR, 1.0)
        put(uL, uL, -1.0)
        rhs[uL] = jumps[j]
        # flux continuity, scaled by the local mesh width
        h = r[i] - r[i - 1]
        wb = _weights_backward(r[i] - r[i - 1], r[i - 1] - r[i - 2]) * sigmas[pl] * h
        wf = _weights_forward(r[i + 1] - r[i], r[i + 2] - r[i + 1]) * sigmas[pr] * h
        for off, wt in zip((0, -1, -2), wb):
            put(uR, uid(i + off, pl), wt)
        for off, wt in zip((0, 1, 2), wf):
            put(uR, uid(i + off, pr), -wt)
        rhs[uR] = 0.0

    last = uid(n, nph - 1)
    put(last, last, 1.0)
    rhs[last] = outer_value

    A = sp.csc_matrix((vals, (rows, cols)), shape=(nunk, nunk))
    try:
        x = spla.spsolve(A, rhs)
    except Exception as exc:  # pragma: no cover - singular systems are a bug
        raise NumericalError(f"radial solve failed: {exc}") from exc
    # normwise backward error: independent of the 1/h^2 scaling of the rows
    anorm = spla.norm(A, np.inf)
    scale = anorm * np.max(np.abs(x)) + np.max(np.abs(rhs))
    res = float(np.max(np.abs(A @ x - rhs)) / scale) if scale > 0 else 0.0
    if not np.all(np.isfinite(x)):
        raise NumericalError("radial solve produced non-finite values", residual=res)

    left = x[uid_left]
    right = x[uid_right]
    dleft = np.empty(n + 1)
    dright = np.empty(n + 1)
    for p in range(nph):
        a, b = bounds[p], bounds[p + 1]
        vals_p = np.array([x[uid(i, p)] for i in range(a, b + 1)])
        rp = r[a:b + 1]
        d = np.empty_like(vals_p)
        hm = rp[1:-1] - rp[:-2]
        hp = rp[2:] - rp[1:-1]
        d[1:-1] = (-hp / (hm * (hm + hp)) * vals_p[:-2] + (hp - hm) / (hm * hp) * vals_p[1:-1]
                   + hm / (hp * (hm + hp)) * vals_p[2:])
        d[0] = _weights_forward(rp[1] - rp[0], rp[2] - rp[1]) @ vals_p[:3]
        d[-1] = _weights_backward(rp[-1] - rp[-2], rp[-2] - rp[-3]) @ vals_p[[-1, -2, -3]]
        if a == 0 and k != 1:
            d[0] = 0.0
        dright[a:b] = d[:-1]
        dleft[a + 1:b + 1] = d[1:]
        if a == 0:
            dleft[0] = d[0]
        if b == n:
            dright[n] = d[-1]
    return _RawRadial(r, left, right, dleft, dright, iface, res, A if keep_matrix else None)


def _richardson(coarse, fine):
    """(4 fine - coarse)/3 on the coarse nodes."""
    def comb(c, f):
        return (4.0 * f[::2] - c) / 3.0
    return _RawRadial(coarse.r, comb(coarse.left, fine.left), comb(coarse.right, fine.right),
                      comb(coarse.dleft, fine.dleft), comb(coarse.dright, fine.dright),
                      coarse.iface, max(coarse.residual, fine.residual), coarse.matrix)


def solve_radial_extrapolated(grid_spec, sigmas, *, richardson=True, **kw):
    """Solve on ``grid_spec`` and, optionally, on its refinement; combine."""
    coarse = solve_radial_ode(grid_spec.nodes, grid_spec.interface_nodes, sigmas, **kw)
    if not richardson:
        return coarse
    kw = dict(kw)
    kw.pop("keep_matrix", None)
    fine_spec = grid_spec.refined()
    fine = solve_radial_ode(fine_spec.nodes, fine_spec.interface_nodes, sigmas, **kw)
    return _richardson(coarse, fine)


def _expand(raw):
    """Node arrays with the interface node duplicated (left copy first)."""
    n = raw.r.size - 1
    bounds = (0,) + raw.iface + (n,)
    r, ph, v, d = [], [], [], []
    for p in range(len(bounds) - 1):
        a, b = bounds[p], bounds[p + 1]
        idx = np.arange(a, b + 1)
        start = raw.right[a:a + 1] if a in raw.iface else raw.left[a:a + 1]
        dstart = raw.dright[a:a + 1] if a in raw.iface else raw.dleft[a:a + 1]
        vals = np.concatenate([start, raw.left[a + 1:b + 1]])
        ders = np.concatenate([dstart, raw.dleft[a + 1:b + 1]])
        r.append(raw.r[idx])
        ph.append(np.full(idx.size, p))
        v.append(vals)
        d.append(ders)
    return np.concatenate(r), np.concatenate(ph), np.concatenate(v), np.concatenate(d)


def _trapz_weighted(raw, weight_power):
    """Integral of u r^p over the whole grid, phase by phase."""
    n = raw.r.size - 1
    bounds = (0,) + raw.iface + (n,)
    total = 0.0
    for p in range(len(bounds) - 1):
        a, b = bounds[p], bounds[p + 1]
        vals = raw.left[a:b + 1].copy()
        if a in raw.iface:
            vals[0] = raw.right[a]
        rr = raw.r[a:b + 1]
        total += np.trapezoid(vals * rr ** weight_power, rr)
    return total


# --------------------------------------------------------------------------
# solution types
# --------------------------------------------------------------------------

PHASE_NAMES = ("core", "shell", "exterior")


@dataclass(frozen=True)
class RadialSolution:
    config: object
    r: np.ndarray
    phase: np.ndarray
    values: np.ndarray
    deriv: np.ndarray
    lambda_serrin: float
    params: EllipticParams
    cond: Conductivity
    residual: float

    def _side(self, p):
        m = self.phase == p
        return self.r[m], self.values[m], self.deriv[m]

    @property
    def u_inner_minus(self):
        return self._side(0)[1][-1]

    @property
    def u_inner_plus(self):
        return self._side(1)[1][0]

    @property
    def du_inner_minus(self):
        return self._side(0)[2][-1]

    @property
    def du_inner_plus(self):
        return self._side(1)[2][0]

    @property
    def du_outer(self):
        return self.deriv[-1]

    def __call__(self, rho):
        """Piecewise cubic Hermite evaluation of u at radii ``rho``."""
        return _hermite_eval(self, rho, self.values, self.deriv)

    def derivative(self, rho):
        return _hermite_eval(self, rho, self.values, self.deriv, nu=1)


@dataclass(frozen=True)
class ModeSolution:
    k: int
    eig: float
    r: np.ndarray
    phase: np.ndarray
    values: np.ndarray
    deriv: np.ndarray
    deriv_at_one: float
    jump: float
    residual: float
    R_inner: float = 0.5

    def __call__(self, rho):
        return _hermite_eval(self, rho, self.values, self.deriv)


def _hermite_eval(sol, rho, values, deriv, nu=0):
    rho = np.asarray(rho, dtype=float)
    out = np.empty(rho.shape)
    R = sol.R_inner if hasattr(sol, "R_inner") and not hasattr(sol, "config") else sol.config.R_inner
    for p, mask in ((0, rho <= R), (1, rho > R)):
        sel = sol.phase == p
        spl = CubicHermiteSpline(sol.r[sel], values[sel], deriv[sel])
        out[mask] = spl(rho[mask], nu)
    return out


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def solve_base_radial(params: EllipticParams, cond: Conductivity, config, *, richardson=True,
                      tol=DEFAULT_TOL) -> RadialSolution:
    """Concentric two-phase solution of ``div(sigma grad u) = beta u - gamma``."""
    if not isinstance(params, EllipticParams) or not isinstance(cond, Conductivity):
        raise ConfigurationError("expected EllipticParams and Conductivity")
    spec = config.grid_spec
    if len(spec.interface_nodes) != 1 or spec.nodes[spec.interface_nodes[0]] != config.R_inner:
        raise ConfigurationError("interface radius is not on the grid")
    raw = solve_radial_extrapolated(
        spec, (cond.sigma_c, cond.sigma_s), richardson=richardson, dim=params.dim,
        beta=params.beta, sources=(params.gamma, params.gamma), outer_value=params.c_bdry)
    if raw.residual > tol:
        raise NumericalError(f"radial base solve residual {raw.residual:.3e} above {tol:.1e}",
                             residual=raw.residual)
    r, ph, v, d = _expand(raw)
    v[-1] = params.c_bdry
    N = params.dim
    Ro = config.R_outer
    if richardson:
        c = solve_radial_ode(spec.nodes, spec.interface_nodes, (cond.sigma_c, cond.sigma_s), dim=N,
                             beta=params.beta, sources=(params.gamma,) * 2, outer_value=params.c_bdry)
        fs = spec.refined()
        f = solve_radial_ode(fs.nodes, fs.interface_nodes, (cond.sigma_c, cond.sigma_s), dim=N,
                             beta=params.beta, sources=(params.gamma,) * 2, outer_value=params.c_bdry)
        integral = (4 * _trapz_weighted(f, N - 1) - _trapz_weighted(c, N - 1)) / 3
    else:
        integral = _trapz_weighted(raw, N - 1)
    lam = params.gamma * Ro / N - params.beta * integral / Ro ** (N - 1)
    return RadialSolution(config, r, ph, v, d, float(lam), params, cond, raw.residual)


def _jump_data(base):
    """u'(R-) - u'(R+), computed through flux continuity so it vanishes for one phase."""
    c = base.cond
    return base.du_inner_plus * (c.sigma_s / c.sigma_c - 1.0)


def solve_mode(k: int, base: RadialSolution, params: EllipticParams = None, cond: Conductivity = None,
               *, jump_scale=1.0, richardson=True, tol=DEFAULT_TOL) -> ModeSolution:
    """Linearized profile s_k for the boundary perturbation mode ``k``."""
    if int(k) != k or k < 1:
        raise ConfigurationError("mode index must be a positive integer (mode 0 is excluded)")
    k = int(k)
    params = params or base.params
    cond = cond or base.cond
    N = params.dim
    spec = base.config.grid_spec
    jump = _jump_data(base) * jump_scale
    raw = solve_radial_extrapolated(
        spec, (cond.sigma_c, cond.sigma_s), richardson=richardson, dim=N, beta=params.beta,
        k=k, outer_value=0.0, jumps=(jump,))
    if raw.residual > tol:
        raise NumericalError(f"mode {k} residual {raw.residual:.3e}", residual=raw.residual)
    r, ph, v, d = _expand(raw)
    v[-1] = 0.0
    return ModeSolution(k, float(k * (N + k - 2)), r, ph, v, d, float(d[-1]), float(jump),
                        raw.residual, base.config.R_inner)


@dataclass(frozen=True)
class ModeReport:
    k: int
    deriv_at_one: float
    flagged: bool
    condition: float


def _condition_estimate(A):
    """1-norm condition estimate of the row-equilibrated matrix."""
    A = A.tocsr()
    A = sp.diags(1.0 / abs(A).max(axis=1).toarray().ravel()) @ A
    lu = spla.splu(A.tocsc())
    n = A.shape[0]
    inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"),
                              dtype=float)
    return float(spla.onenormest(A) * spla.onenormest(inv))


def invertibility_report(base: RadialSolution, k_max: int, *, threshold=FLAG_THRESHOLD,
                         with_condition=True):
    """s_k'(1) for k = 1..k_max with flags for near-zero entries."""
    if k_max < 1:
        raise ConfigurationError("k_max must be >= 1")
    if k_max > K_MAX_CAP:
        raise ConfigurationError(f"k_max capped at {K_MAX_CAP}")
    out = []
    spec = base.config.grid_spec
    for k in range(1, k_max + 1):
        m = solve_mode(k, base)
        cnum = float("nan")
        if with_condition:
            raw = solve_radial_ode(spec.nodes, spec.interface_nodes, (base.cond.sigma_c, base.cond.sigma_s),
                                   dim=base.params.dim, beta=base.params.beta, k=k, jumps=(1.0,),
                                   keep_matrix=True)
            cnum = _condition_estimate(raw.matrix)
        out.append(ModeReport(k, m.deriv_at_one, abs(m.deriv_at_one) < threshold, cnum))
    return out


def write_csv(solution, path):
    """Columns: r, phase, value, derivative (interface rows appear once per side)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "phase", "value", "derivative"])
        for r, p, v, d in zip(solution.r, solution.phase, solution.values, solution.deriv):
            w.writerow([f"{r:.15e}", PHASE_NAMES[int(p)], f"{v:.15e}", f"{d:.15e}"])


def closed_form_torsion(r, R, sigma_c, sigma_s, gamma=1.0, dim=2, c_bdry=0.0):
    """Exact two-phase solution for beta = 0 (used as a test oracle)."""
    r = np.asarray(r, dtype=float)
    shell = c_bdry + gamma * (1 - r ** 2) / (2 * dim * sigma_s)
    uR = c_bdry + gamma * (1 - R ** 2) / (2 * dim * sigma_s)
    core = uR + gamma * (R ** 2 - r ** 2) / (2 * dim * sigma_c)
    return np.where(r <= R, core, shell)
