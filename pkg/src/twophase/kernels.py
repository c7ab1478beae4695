"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public function here dispatches on :data:`twophase._accel.USE_NUMBA`;
the ``_nb`` / ``_np`` variants are kept importable so the benchmark and the
tests can run both side by side.
"""

import numpy as np
from scipy.linalg import solve_banded

from . import _accel
from ._accel import njit


# --------------------------------------------------------------------------
# tridiagonal solves
# --------------------------------------------------------------------------

@njit
def _thomas_nb(lower, diag, upper, rhs):
    n = diag.shape[0]
    c = np.empty(n)
    d = np.empty(n)
    x = np.empty(n)
    beta = diag[0]
    c[0] = upper[0] / beta
    d[0] = rhs[0] / beta
    for i in range(1, n):
        beta = diag[i] - lower[i] * c[i - 1]
        c[i] = upper[i] / beta if i < n - 1 else 0.0
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / beta
    x[n - 1] = d[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def _thomas_np(lower, diag, upper, rhs):
    ab = np.zeros((3, diag.shape[0]))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def solve_tridiagonal(lower, diag, upper, rhs):
    """Solve a tridiagonal system.

    ``lower[i]`` multiplies ``x[i-1]`` in row ``i`` (``lower[0]`` unused) and
    ``upper[i]`` multiplies ``x[i+1]`` (``upper[-1]`` unused).
    """
    args = [np.ascontiguousarray(a, dtype=float) for a in (lower, diag, upper, rhs)]
    if _accel.USE_NUMBA:
        return _thomas_nb(*args)
    return _thomas_np(*args)


# --------------------------------------------------------------------------
# backward Euler march for  m du/dt + K u = b  with K symmetric tridiagonal
# --------------------------------------------------------------------------

@njit
def _march_nb(mass, kdiag, koff, load, u0, times, store):
    n = u0.shape[0]
    nstore = 0
    for j in range(store.shape[0]):
        if store[j]:
            nstore += 1
    out = np.empty((nstore, n))
    u = u0.copy()
    lower = np.empty(n)
    upper = np.empty(n)
    diag = np.empty(n)
    rhs = np.empty(n)
    k = 0
    if store[0]:
        out[0, :] = u
        k = 1
    for s in range(times.shape[0] - 1):
        dt = times[s + 1] - times[s]
        for i in range(n):
            diag[i] = mass[i] + dt * kdiag[i]
            rhs[i] = mass[i] * u[i] + dt * load[i]
            upper[i] = dt * koff[i] if i < n - 1 else 0.0
            lower[i] = dt * koff[i - 1] if i > 0 else 0.0
        u = _thomas_nb(lower, diag, upper, rhs)
        if store[s + 1]:
            out[k, :] = u
            k += 1
    return out


def _march_np(mass, kdiag, koff, load, u0, times, store):
    n = u0.shape[0]
    out = np.empty((int(np.count_nonzero(store)), n))
    u = u0.copy()
    k = 0
    if store[0]:
        out[0] = u
        k = 1
    ab = np.zeros((3, n))
    last_dt = None
    for s in range(times.shape[0] - 1):
        dt = times[s + 1] - times[s]
        if dt != last_dt:
            ab[0, 1:] = dt * koff
            ab[1] = mass + dt * kdiag
            ab[2, :-1] = dt * koff
            last_dt = dt
        u = solve_banded((1, 1), ab, mass * u + dt * load, check_finite=False)
        if store[s + 1]:
            out[k] = u
            k += 1
    return out


def march_backward_euler(mass, kdiag, koff, load, u0, times, store):
    """Implicit Euler for ``diag(mass) u' + K u = load`` on the given time grid.

    ``K`` is symmetric tridiagonal with diagonal ``kdiag`` and off-diagonal
    ``koff`` (length n-1).  Returns the states at the steps flagged in
    ``store`` (a boolean array aligned with ``times``).
    """
    mass = np.ascontiguousarray(mass, dtype=float)
    kdiag = np.ascontiguousarray(kdiag, dtype=float)
    koff = np.ascontiguousarray(koff, dtype=float)
    load = np.ascontiguousarray(load, dtype=float)
    u0 = np.ascontiguousarray(u0, dtype=float)
    times = np.ascontiguousarray(times, dtype=float)
    store = np.ascontiguousarray(store, dtype=np.bool_)
    if _accel.USE_NUMBA:
        return _march_nb(mass, kdiag, koff, load, u0, times, store)
    return _march_np(mass, kdiag, koff, load, u0, times, store)


# --------------------------------------------------------------------------
# P1 element matrices
# --------------------------------------------------------------------------

@njit
def _p1_local_nb(points, tris):
    ne = tris.shape[0]
    stiff = np.empty((ne, 3, 3))
    area = np.empty(ne)
    grads = np.empty((ne, 3, 2))
    for e in range(ne):
        i0 = tris[e, 0]
        i1 = tris[e, 1]
        i2 = tris[e, 2]
        x0 = points[i0, 0]
        y0 = points[i0, 1]
        x1 = points[i1, 0]
        y1 = points[i1, 1]
        x2 = points[i2, 0]
        y2 = points[i2, 1]
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        a = 0.5 * det
        area[e] = a
        # gradients of barycentric coordinates
        grads[e, 0, 0] = (y1 - y2) / det
        grads[e, 0, 1] = (x2 - x1) / det
        grads[e, 1, 0] = (y2 - y0) / det
        grads[e, 1, 1] = (x0 - x2) / det
        grads[e, 2, 0] = (y0 - y1) / det
        grads[e, 2, 1] = (x1 - x0) / det
        for i in range(3):
            for j in range(3):
                stiff[e, i, j] = a * (grads[e, i, 0] * grads[e, j, 0]
                                      + grads[e, i, 1] * grads[e, j, 1])
    return stiff, area, grads


def _p1_local_np(points, tris):
    p0 = points[tris[:, 0]]
    p1 = points[tris[:, 1]]
    p2 = points[tris[:, 2]]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    area = 0.5 * det
    grads = np.empty((tris.shape[0], 3, 2))
    grads[:, 0, 0] = p1[:, 1] - p2[:, 1]
    grads[:, 0, 1] = p2[:, 0] - p1[:, 0]
    grads[:, 1, 0] = p2[:, 1] - p0[:, 1]
    grads[:, 1, 1] = p0[:, 0] - p2[:, 0]
    grads[:, 2, 0] = p0[:, 1] - p1[:, 1]
    grads[:, 2, 1] = p1[:, 0] - p0[:, 0]
    grads /= det[:, None, None]
    stiff = area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)
    return stiff, area, grads


def p1_local_matrices(points, tris):
    """Unit-coefficient P1 stiffness blocks, signed areas and basis gradients."""
    points = np.ascontiguousarray(points, dtype=float)
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    if _accel.USE_NUMBA:
        return _p1_local_nb(points, tris)
    return _p1_local_np(points, tris)
