"""Curvature, distance and exterior-ball integrals for smooth boundaries.

Plane curves are stored as trigonometric interpolants of equally spaced
samples, so every derivative is spectrally accurate.  Surfaces of revolution
(spheroids) carry closed-form principal curvatures; they exist to exercise
the ``N >= 3`` branch of the Weingarten quantity.

Sign conventions: curvatures are taken with respect to the inward normal, so
a counter-clockwise circle of radius ``rho`` has ``kappa = 1/rho``.  The
distance ``delta`` is measured inward from the boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError, NumericalError


# --------------------------------------------------------------------------
# boundaries
# --------------------------------------------------------------------------

class CurveBoundary:
    """Closed plane curve ``theta -> x(theta)``, ``theta in [0, 2 pi)``.

    ``orientation`` fixes the outward normal as
    ``orientation * (y', -x') / |x'|``.  By default it is detected from the
    signed area so that the normal points out of the enclosed region.
    """

    dim = 2

    def __init__(self, x, y, orientation=None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.ndim != 1 or x.size < 8:
            raise ConfigurationError("need at least 8 matching samples")
        self.n = x.size
        self._coef = np.fft.fft(x + 1j * y) / self.n
        self._k = np.fft.fftfreq(self.n, 1.0 / self.n)
        self._nyq = self.n // 2 if self.n % 2 == 0 else None
        area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        self.geometric_sign = 1 if area > 0 else -1
        self.orientation = self.geometric_sign if orientation is None else int(np.sign(orientation))
        self._samples = (x, y)

    # construction helpers ------------------------------------------------
    @classmethod
    def from_function(cls, fn, n=257, orientation=None):
        theta = 2 * np.pi * np.arange(n) / n
        x, y = fn(theta)
        return cls(x, y, orientation)

    @classmethod
    def circle(cls, rho=1.0, center=(0.0, 0.0), n=65):
        return cls.from_function(lambda t: (center[0] + rho * np.cos(t), center[1] + rho * np.sin(t)), n)

    @classmethod
    def ellipse(cls, a=2.0, b=1.0, n=257):
        return cls.from_function(lambda t: (a * np.cos(t), b * np.sin(t)), n)

    def reversed(self):
        """Same point set traversed backwards; the orientation flag is kept,
        so the stored normal flips."""
        x, y = self._samples
        idx = (-np.arange(self.n)) % self.n
        return CurveBoundary(x[idx], y[idx], self.orientation)

    # evaluation ------------------------------------------------------------
    def derivative(self, theta, order=0):
        """Complex ``x + i y`` (or its ``order``-th theta derivative)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        ph = np.exp(1j * np.outer(theta, self._k))
        fac = (1j * self._k) ** order
        coef = self._coef * fac
        if self._nyq is not None:
            coef = coef.copy()
            coef[self._nyq] = 0.0
        z = ph @ coef
        if self._nyq is not None:
            m = self._nyq
            z = z + self._coef[m] * np.real((1j * m) ** order * np.exp(1j * m * theta))
        return z

    def point(self, theta):
        z = self.derivative(theta)
        return np.stack([z.real, z.imag], axis=-1)

    def tangent(self, theta):
        z = self.derivative(theta, 1)
        return np.stack([z.real, z.imag], axis=-1)

    def normal(self, theta):
        """Unit normal carrying the orientation flag (outward by default)."""
        z = self.derivative(theta, 1)
        nrm = np.abs(z)
        return self.orientation * np.stack([z.imag / nrm, -z.real / nrm], axis=-1)

    def curvature(self, theta):
        """Curvature with respect to the inward normal ``-normal``."""
        d1 = self.derivative(theta, 1)
        d2 = self.derivative(theta, 2)
        cross = d1.real * d2.imag - d1.imag * d2.real
        return self.orientation * cross / np.abs(d1) ** 3

    def speed(self, theta):
        return np.abs(self.derivative(theta, 1))


class RevolutionBoundary:
    """Spheroid with equatorial semi-axis ``a`` and polar semi-axis ``c``.

    Points are parametrized by the polar angle ``phi`` and the azimuth; by
    symmetry only ``phi`` matters for the curvatures.
    """

    dim = 3

    def __init__(self, a=1.0, c=1.0):
        if a <= 0 or c <= 0:
            raise ConfigurationError("semi-axes must be positive")
        self.a = float(a)
        self.c = float(c)

    @classmethod
    def sphere(cls, rho=1.0):
        return cls(rho, rho)

    def principal_curvatures(self, phi):
        phi = np.asarray(phi, dtype=float)
        a, c = self.a, self.c
        q = a ** 2 * np.cos(phi) ** 2 + c ** 2 * np.sin(phi) ** 2
        meridian = a * c / q ** 1.5
        parallel = c / (a * np.sqrt(q))
        return np.stack([meridian, parallel], axis=-1)

    def point(self, phi, azimuth=0.0):
        phi = np.asarray(phi, dtype=float)
        return np.stack([self.a * np.sin(phi) * np.cos(azimuth), self.a * np.sin(phi) * np.sin(azimuth),
                         self.c * np.cos(phi)], axis=-1)


# --------------------------------------------------------------------------
# curvature data
# --------------------------------------------------------------------------

def weingarten_quantity(kappas):
    """C(p): ``3 kappa^2`` for curves; ``3 sum k_i^2 + 2 sum_{i<j} k_i k_j`` otherwise."""
    kappas = np.atleast_2d(kappas)
    squares = np.sum(kappas ** 2, axis=1)
    total = np.sum(kappas, axis=1)
    mixed = 0.5 * (total ** 2 - squares)
    return 3.0 * squares + 2.0 * mixed


def curvature_product(kappas, r):
    """Pi(r, y) = prod_j (1/r - kappa_j)."""
    kappas = np.atleast_2d(kappas)
    return np.prod(1.0 / r - kappas, axis=1)


@dataclass(frozen=True)
class CurvatureData:
    params: np.ndarray
    points: np.ndarray
    kappa: np.ndarray          # (n, N-1)
    sum_kappa: np.ndarray
    pi_values: np.ndarray      # Pi(r, y) for the requested r (nan when r is None)
    weingarten: np.ndarray
    rejected: np.ndarray       # near-degenerate tangent

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "kappa_sum", "pi", "C"])
            for t, k, p, c in zip(self.params, self.sum_kappa, self.pi_values, self.weingarten):
                w.writerow([f"{t:.12e}", f"{k:.12e}", f"{p:.12e}", f"{c:.12e}"])


def curvatures(boundary, n_samples=64, r=None, params=None, min_speed=1e-8) -> CurvatureData:
    """Curvature samples, Pi(r, y) and the Weingarten quantity C(p)."""
    if isinstance(boundary, CurveBoundary):
        t = np.asarray(params, dtype=float) if params is not None else \
            2 * np.pi * np.arange(n_samples) / n_samples
        pts = boundary.point(t)
        kap = boundary.curvature(t)[:, None]
        rejected = boundary.speed(t) < min_speed
    elif isinstance(boundary, RevolutionBoundary):
        t = np.asarray(params, dtype=float) if params is not None else \
            np.linspace(0, np.pi, n_samples + 2)[1:-1]
        pts = boundary.point(t)
        kap = boundary.principal_curvatures(t)
        rejected = np.zeros(t.size, dtype=bool)
    else:
        raise ConfigurationError("unsupported boundary type")
    kap = np.where(rejected[:, None], np.nan, kap)
    pi = curvature_product(kap, r) if r is not None else np.full(t.size, np.nan)
    return CurvatureData(t, pts, kap, np.sum(kap, axis=1), pi, weingarten_quantity(kap), rejected)


# --------------------------------------------------------------------------
# distance function in the inner tube
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DistanceData:
    x: np.ndarray
    delta: np.ndarray
    grad: np.ndarray
    foot: np.ndarray           # y(x)
    foot_param: np.ndarray
    laplacian: np.ndarray
    kappa_foot: np.ndarray
    flagged: np.ndarray


def nearest_parameter(boundary: CurveBoundary, x, guess=None, tol=1e-14, maxiter=50):
    """Newton on ``(c(t) - x) . c'(t) = 0`` from a dense-sample start."""
    x = np.asarray(x, dtype=float)
    if guess is None:
        ts = 2 * np.pi * np.arange(4 * boundary.n) / (4 * boundary.n)
        pts = boundary.point(ts)
        guess = ts[np.argmin(np.sum((pts - x) ** 2, axis=1))]
    t = float(guess)
    for _ in range(maxiter):
        z0 = boundary.derivative(t)[0]
        z1 = boundary.derivative(t, 1)[0]
        z2 = boundary.derivative(t, 2)[0]
        d = z0 - complex(x[0], x[1])
        g = (d * z1.conjugate()).real
        dg = abs(z1) ** 2 + (d * z2.conjugate()).real
        step = g / dg
        t -= step
        if abs(step) < tol:
            return t % (2 * np.pi), True
    return t % (2 * np.pi), False


def distance_field(boundary: CurveBoundary, delta0, points=None, n_theta=32, n_depth=8) -> DistanceData:
    """Distance, its gradient, the foot point and the Laplacian in the inner tube.

    Without ``points`` a tensor sample ``y(t) - s nu(y(t))`` with
    ``s in (0, delta0]`` is used.
    """
    if not isinstance(boundary, CurveBoundary):
        raise ConfigurationError("distance_field supports plane curves")
    kmax = np.max(boundary.curvature(2 * np.pi * np.arange(4 * boundary.n) / (4 * boundary.n)))
    if kmax >= 1.0 / (2.0 * delta0):
        raise ConfigurationError(f"delta0={delta0} violates max kappa < 1/(2 delta0) (max kappa={kmax:.4g})")
    if points is None:
        t = 2 * np.pi * np.arange(n_theta) / n_theta
        s = delta0 * np.arange(1, n_depth + 1) / n_depth
        T, S = np.meshgrid(t, s, indexing="ij")
        base = boundary.point(T.ravel())
        inward = -boundary.geometric_sign * boundary.orientation * boundary.normal(T.ravel())
        points = base + S.ravel()[:, None] * inward
        guesses = T.ravel()
    else:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        guesses = [None] * points.shape[0]
    m = points.shape[0]
    foot_t = np.empty(m)
    flagged = np.zeros(m, dtype=bool)
    for i in range(m):
        foot_t[i], ok = nearest_parameter(boundary, points[i], guesses[i])
        flagged[i] = not ok
    foot = boundary.point(foot_t)
    inward = -boundary.geometric_sign * boundary.orientation * boundary.normal(foot_t)
    delta = np.sum((points - foot) * inward, axis=1)
    if np.any(delta < -1e-12) or np.any(delta > delta0 * (1 + 1e-12)):
        raise ConfigurationError("sample points must lie in the inner tube")
    # gradient of the inward distance is the inward normal at the foot point
    grad = inward
    kap = boundary.geometric_sign * boundary.orientation * boundary.curvature(foot_t)
    lap = -kap / (1.0 - kap * delta)
    return DistanceData(points, delta, grad, foot, foot_t, lap, kap, flagged)


# --------------------------------------------------------------------------
# exterior-ball integrals (plane curves)
# --------------------------------------------------------------------------

def _crossings(boundary: CurveBoundary, t0, s):
    """Parameters on both sides of ``t0`` where the curve meets the circle of
    radius ``s`` about ``c(t0)``."""
    p = boundary.derivative(t0)[0]
    speed = abs(boundary.derivative(t0, 1)[0])

    def g(t):
        return abs(boundary.derivative(t)[0] - p) ** 2 - s * s

    out = []
    for sign in (1.0, -1.0):
        step = 0.5 * s / speed
        lo = t0
        hi = t0 + sign * step
        while g(hi) < 0:
            lo = hi
            hi = hi + sign * step
            if abs(hi - t0) > np.pi:
                raise NumericalError("radius too large: no boundary crossing found")
        a, b = (lo, hi) if sign > 0 else (hi, lo)
        out.append(brentq(g, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return out


def _exterior_arcs(boundary, t0, radii):
    """Angles (relative to the geometric outward normal) bounding the exterior arc."""
    p = boundary.point(t0)[0]
    n_out = boundary.geometric_sign * boundary.orientation * boundary.normal(t0)[0]
    base = math.atan2(n_out[1], n_out[0])
    lo = np.empty(len(radii))
    hi = np.empty(len(radii))
    for i, s in enumerate(radii):
        tp, tm = _crossings(boundary, t0, s)
        angs = []
        for t in (tp, tm):
            q = boundary.point(t)[0] - p
            a = math.atan2(q[1], q[0]) - base
            angs.append((a + np.pi) % (2 * np.pi) - np.pi)
        lo[i], hi[i] = min(angs), max(angs)
    return lo, hi


def _gauss_radii(r, order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * r * (x + 1), 0.5 * r * w


def exterior_volume(boundary: CurveBoundary, t0, r, order=48):
    """Area of the exterior of the curve inside the disk of radius ``r`` about ``c(t0)``."""
    s, w = _gauss_radii(r, order)
    lo, hi = _exterior_arcs(boundary, t0, s)
    return float(np.sum(w * s * (hi - lo)))


def exterior_moment(boundary: CurveBoundary, t0, r, order=48):
    """``nu(p) . int_{ext and B_r(p)} (x - p) dx`` with the stored normal ``nu``."""
    s, w = _gauss_radii(r, order)
    lo, hi = _exterior_arcs(boundary, t0, s)
    flip = boundary.geometric_sign * boundary.orientation
    return float(flip * np.sum(w * s ** 2 * (np.sin(hi) - np.sin(lo))))


def flat_moment(r, dim=2):
    """Exterior moment for a flat boundary: omega_{N-1} r^{N+1} / (N^2 - 1)."""
    # omega_{N-1}: measure of the unit sphere S^{N-2} (2 for N = 2, 2 pi for N = 3)
    omega = 2 * np.pi ** ((dim - 1) / 2) / math.gamma((dim - 1) / 2)
    return omega * r ** (dim + 1) / (dim ** 2 - 1)


@dataclass(frozen=True)
class MomentFit:
    radii: np.ndarray
    raw_estimates: np.ndarray   # 8(N+3)(1 - M/flat)/r^2 per radius
    extrapolated: float         # C(p) with the r^2 term removed
    residuals: np.ndarray
    flagged: bool


def fit_weingarten(boundary: CurveBoundary, t0, radii, order=48) -> MomentFit:
    """Extract C(p) from the moment expansion over a decreasing radius sequence.

    The raw estimates behave like ``C + D r^2``; a least-squares fit in
    ``r^2`` removes the next term.  The fit is flagged when the distance of
    the raw estimates to the fitted limit does not shrink with ``r``.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.size < 2 or np.any(np.diff(radii) >= 0):
        raise ConfigurationError("radii must be a decreasing sequence of length >= 2")
    dim = 2
    ratio = np.array([exterior_moment(boundary, t0, r, order) for r in radii]) / flat_moment(radii, dim)
    ratio *= boundary.geometric_sign * boundary.orientation
    est = 8 * (dim + 3) * (1 - ratio) / radii ** 2
    A = np.stack([np.ones_like(radii), radii ** 2], axis=1)
    coef, *_ = np.linalg.lstsq(A, est, rcond=None)
    resid = est - A @ coef
    gaps = np.abs(est - coef[0])
    flagged = bool(np.any(np.diff(gaps) > 1e-12 * max(1.0, abs(coef[0]))))
    return MomentFit(radii, est, float(coef[0]), resid, flagged)
