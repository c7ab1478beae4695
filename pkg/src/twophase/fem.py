"""P1 finite elements on mapped ring meshes of the unit disk.

The reference mesh is built ring by ring: a centre node, then concentric
rings whose node counts are multiples of a rotation order m (8 by default).
Neighbouring rings are zipped together by comparing node angles in exact
integer arithmetic, so the whole triangulation is invariant under rotation
by 2 pi / m.  That symmetry keeps
the discrete flux of a radial problem free of low Fourier modes, which is
what lets the shape iteration reach small relative residuals on a modest
mesh.

The interface circle ``r = R`` is a ring, so the two phases are fitted.  A
perturbed geometry is obtained by moving the nodes with a smooth radial map;
the topology (and hence the sparsity pattern) never changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, NumericalError
from .kernels import p1_local_matrices

CORE, SHELL = 0, 1


@dataclass(frozen=True)
class RingLayout:
    radii: np.ndarray        # ring radii, radii[0] = 0 (the centre)
    counts: np.ndarray       # nodes per ring, counts[0] = 1
    interface_ring: int
    offsets: np.ndarray      # first node index per ring

    @property
    def n_nodes(self):
        return int(self.offsets[-1] + self.counts[-1])


def ring_layout(R, resolution, flat_rings=3, symmetry=8):
    """Uniform radial spacing ``1/resolution`` with ``R`` on a ring.

    Ring node counts are multiples of ``symmetry`` (the mesh is invariant
    under rotation by ``2 pi / symmetry``).  The outermost ``flat_rings``
    rings share the boundary node count so the boundary layer is a regular
    strip.
    """
    if not (0 < R < 1):
        raise ConfigurationError("interface radius must lie in (0, 1)")
    if resolution < 8:
        raise ConfigurationError("resolution must be >= 8")
    if symmetry < 1:
        raise ConfigurationError("symmetry order must be positive")
    m_core = max(2, int(round(R * resolution)))
    m_shell = max(2, int(round((1 - R) * resolution)))
    radii = np.concatenate([np.linspace(0, R, m_core + 1), np.linspace(R, 1, m_shell + 1)[1:]])
    h = 1.0 / resolution
    m = symmetry
    counts = np.array([1] + [m * max(1, int(round(2 * np.pi * r / (m * h)))) for r in radii[1:]])
    counts[-flat_rings:] = counts[-1]
    counts[1:] = np.maximum.accumulate(counts[1:])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return RingLayout(radii, counts, m_core, offsets)


def _zip_rings(off_a, n_a, off_b, n_b):
    """Triangles between an inner ring (a) and an outer ring (b)."""
    tris = []
    i = j = 0
    while i < n_a or j < n_b:
        # advance the ring whose next node comes first in angle; ties go to the outer ring
        advance_a = j >= n_b or (i < n_a and (i + 1) * n_b < (j + 1) * n_a)
        if advance_a:
            tris.append((off_a + i % n_a, off_a + (i + 1) % n_a, off_b + j % n_b))
            i += 1
        else:
            tris.append((off_a + i % n_a, off_b + (j + 1) % n_b, off_b + j % n_b))
            j += 1
    return tris


@dataclass
class Mesh:
    """Triangulated (mapped) disk with phase tags and boundary bookkeeping."""

    layout: RingLayout
    ref_r: np.ndarray            # reference polar coordinates of every node
    ref_theta: np.ndarray
    points: np.ndarray           # current (mapped) coordinates
    triangles: np.ndarray
    phase: np.ndarray            # CORE / SHELL per triangle
    outer_nodes: np.ndarray      # ordered by angle
    interface_nodes: np.ndarray  # ordered by angle
    edge_weights: np.ndarray = field(default=None)    # l_i = half adjacent boundary edge lengths
    outer_normals: np.ndarray = field(default=None)
    jacobian_tau: np.ndarray = field(default=None)    # l_i / (2 pi / n_outer)

    def __post_init__(self):
        self._update_boundary()

    def _update_boundary(self):
        p = self.points[self.outer_nodes]
        nxt = np.roll(p, -1, axis=0)
        prv = np.roll(p, 1, axis=0)
        len_next = np.linalg.norm(nxt - p, axis=1)
        len_prev = np.linalg.norm(p - prv, axis=1)
        self.edge_weights = 0.5 * (len_next + len_prev)
        tang = nxt - prv
        nrm = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
        self.outer_normals = nrm / np.linalg.norm(nrm, axis=1)[:, None]
        self.jacobian_tau = self.edge_weights / (2 * np.pi / self.outer_nodes.size)

    @property
    def n_nodes(self):
        return self.points.shape[0]

    @property
    def outer_theta(self):
        return self.ref_theta[self.outer_nodes]

    def euler_characteristic(self):
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        n_edges = np.unique(edges, axis=0).shape[0]
        return self.n_nodes - n_edges + t.shape[0]

    def signed_areas(self):
        p = self.points
        t = self.triangles
        a = p[t[:, 1]] - p[t[:, 0]]
        b = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def min_angles(self):
        p = self.points[self.triangles]
        ang = []
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            v = p[:, (k + 2) % 3] - p[:, k]
            c = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            ang.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
        return np.min(np.stack(ang, axis=1), axis=1)

    def moved(self, points):
        """Same topology at new node positions."""
        return Mesh(self.layout, self.ref_r, self.ref_theta, np.asarray(points, dtype=float), self.triangles,
                    self.phase, self.outer_nodes, self.interface_nodes)

    def node_phase_mask(self, phase):
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.triangles[self.phase == phase].ravel()] = True
        return mask


def symmetry_for_modes(K):
    """Smallest admissible rotation order (a multiple of 8) exceeding K.

    A mesh with rotation order m only feeds radial-configuration errors into
    modes that are multiples of m, so modes 1..K stay clean when m > K.
    """
    return 8 * (K // 8 + 1)


def reference_mesh(R, resolution, flat_rings=3, symmetry=8) -> Mesh:
    lay = ring_layout(R, resolution, flat_rings, symmetry)
    ref_r = np.empty(lay.n_nodes)
    ref_t = np.empty(lay.n_nodes)
    ref_r[0] = 0.0
    ref_t[0] = 0.0
    for k in range(1, lay.radii.size):
        n = lay.counts[k]
        sl = slice(lay.offsets[k], lay.offsets[k] + n)
        ref_r[sl] = lay.radii[k]
        ref_t[sl] = 2 * np.pi * np.arange(n) / n
    tris = []
    n1 = lay.counts[1]
    for j in range(n1):
        tris.append((0, lay.offsets[1] + j, lay.offsets[1] + (j + 1) % n1))
    phase = [CORE] * n1
    for k in range(1, lay.radii.size - 1):
        new = _zip_rings(lay.offsets[k], lay.counts[k], lay.offsets[k + 1], lay.counts[k + 1])
        tris.extend(new)
        phase.extend([CORE if k < lay.interface_ring else SHELL] * len(new))
    tris = np.array(tris, dtype=np.int64)
    pts = np.stack([ref_r * np.cos(ref_t), ref_r * np.sin(ref_t)], axis=1)
    # orient counter-clockwise
    a = pts[tris[:, 1]] - pts[tris[:, 0]]
    b = pts[tris[:, 2]] - pts[tris[:, 0]]
    neg = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0] < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    last = lay.radii.size - 1
    outer = np.arange(lay.offsets[last], lay.offsets[last] + lay.counts[last])
    ki = lay.interface_ring
    iface = np.arange(lay.offsets[ki], lay.offsets[ki] + lay.counts[ki])
    return Mesh(lay, ref_r, ref_t, pts, tris, np.array(phase, dtype=np.int8), outer, iface)


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

@dataclass
class Assembled:
    stiffness: sp.csr_matrix     # includes sigma
    mass: sp.csr_matrix          # consistent (or lumped) unit mass
    load: np.ndarray             # int source * phi_i
    area: float


def _coo(triangles, blocks, n):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(n, n))


def assemble(mesh: Mesh, sigma_core, sigma_shell, source=(1.0, 1.0), lumped=False) -> Assembled:
    stiff, area, _ = p1_local_matrices(mesh.points, mesh.triangles)
    if np.any(area <= 0):
        raise NumericalError("inverted element in the mesh")
    sig = np.where(mesh.phase == CORE, sigma_core, sigma_shell)
    n = mesh.n_nodes
    K = _coo(mesh.triangles, stiff * sig[:, None, None], n)
    if lumped:
        lm = np.zeros(n)
        np.add.at(lm, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
        M = sp.diags(lm).tocsr()
    else:
        local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
        M = _coo(mesh.triangles, area[:, None, None] * local[None], n)
    src = np.where(mesh.phase == CORE, source[0], source[1])
    F = np.zeros(n)
    np.add.at(F, mesh.triangles.ravel(), np.repeat(src * area / 3.0, 3))
    return Assembled(K, M, F, float(area.sum()))


def solve_dirichlet(A, rhs, fixed_nodes, fixed_values):
    """Solve ``A u = rhs`` with prescribed values on ``fixed_nodes``."""
    n = A.shape[0]
    u = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    fixed[fixed_nodes] = True
    u[fixed_nodes] = fixed_values
    free = ~fixed
    A = A.tocsr()
    Aff = A[free][:, free].tocsc()
    b = rhs[free] - A[free][:, fixed] @ u[fixed]
    try:
        u[free] = spla.spsolve(Aff, b)
    except RuntimeError as exc:  # pragma: no cover - singular stiffness
        raise NumericalError(f"singular finite-element system: {exc}") from exc
    if not np.all(np.isfinite(u)):
        raise NumericalError("finite-element solve produced non-finite values")
    return u


def boundary_reaction(A, rhs, u, nodes):
    """Variational flux: the residual of the unconstrained equations at ``nodes``.

    For the weak form ``a(u, v) = (f, v) + <sigma d_nu u, v>`` this returns
    ``<sigma d_nu u, phi_i>`` for boundary nodes ``i``.
    """
    return (A @ u - rhs)[nodes]


def interpolate_p1(mesh: Mesh, values, xy):
    """Evaluate a P1 field at points (nan outside the mesh)."""
    import matplotlib.tri as mtri

    tri = mtri.Triangulation(mesh.points[:, 0], mesh.points[:, 1], mesh.triangles)
    interp = mtri.LinearTriInterpolator(tri, values)
    out = interp(xy[:, 0], xy[:, 1])
    return np.ma.filled(out.astype(float), np.nan)
