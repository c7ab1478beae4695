"""Batch front-end: every experiment as a subcommand.

Parameters come from built-in defaults, then an optional INI file
(``--config``), then command-line flags.  Each run writes tidy CSV files and a
``manifest.json`` listing the inputs, grid sizes, tolerances, a content hash
of the configuration and a checksum per artifact.

Exit codes: 0 success, 1 numerical failure (a report is still written),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from twophase.errors import ConfigurationError, DivergenceError, NumericalError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


# --------------------------------------------------------------------------
# option tables
# --------------------------------------------------------------------------

def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    items = [s for s in str(text).replace(";", ",").split(",") if s.strip()]
    if not items:
        raise ValueError("empty list")
    return [float(s) for s in items]


@dataclass(frozen=True)
class Option:
    name: str
    kind: object
    default: object
    help: str
    tolerance: bool = False
    choices: tuple | None = None

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")

    def parse(self, raw):
        try:
            value = self.kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{self.name}: {exc}") from None
        if self.choices is not None and value not in self.choices:
            raise ConfigurationError(f"{self.name} must be one of {', '.join(self.choices)}")
        return value


def _cond_options(sigma_c=2.0, sigma_s=1.0):
    return [
        Option("sigma_c", float, sigma_c, "core conductivity"),
        Option("sigma_s", float, sigma_s, "shell conductivity"),
    ]


SUBCOMMANDS = {}


@dataclass
class Subcommand:
    name: str
    section: str
    summary: str
    schemas: str
    options: list
    prepare: object = None
    execute: object = None

    def option(self, name):
        return next(o for o in self.options if o.name == name)


def _register(name, section, summary, schemas, options):
    def wrap(cls):
        SUBCOMMANDS[name] = Subcommand(name, section, summary, schemas, options, cls.prepare, cls.execute)
        return cls
    return wrap


@dataclass
class ExperimentConfig:
    subcommand: str
    params: dict
    out_dir: Path
    tolerances: dict = field(default_factory=dict)

    def content_hash(self):
        """Git-style blob hash (sha1 of ``blob <len>\\0<canonical json>``) of the configuration."""
        body = json.dumps({"subcommand": self.subcommand, "params": self.params, "tolerances": self.tolerances},
                          sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.12e" % float(v)
    return str(v)


class Artifacts:
    """Collects files written by a subcommand for the manifest."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files = []

    def csv(self, name, columns, rows):
        path = self.out_dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)
        return path

    def json(self, name, payload):
        path = self.out_dir / name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        self.files.append(name)
        return path

    def checksums(self):
        out = []
        for name in self.files:
            data = (self.out_dir / name).read_bytes()
            out.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# outer perturbation expressions
# --------------------------------------------------------------------------

_ANGLE_NAMES = ("θ", "theta", "t")
_FUNCS = {"cos": np.cos, "sin": np.sin}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def _check_expr(node):
    if isinstance(node, ast.Expression):
        return _check_expr(node.body)
    if isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
        return _check_expr(node.left) and _check_expr(node.right)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        return _check_expr(node.operand)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return True
    if isinstance(node, ast.Name) and (node.id in _ANGLE_NAMES or node.id == "pi"):
        return True
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
            and len(node.args) == 1 and not node.keywords:
        return _check_expr(node.args[0])
    raise ConfigurationError(f"unsupported element in perturbation expression: {ast.dump(node)[:40]}")


def parse_perturbation(text, K, n_samples=256):
    """Fourier coefficients (modes 1..K) of an expression such as ``0.01*cos(2θ)``.

    Implicit products like ``2θ`` are accepted.  The expression must have zero
    mean and no content above mode ``K``.
    """
    from twophase.shape_newton import Perturbation

    src = str(text).strip()
    # implicit multiplication "2θ" -> "2*θ"
    for name in _ANGLE_NAMES[:2]:
        for digit in "0123456789":
            src = src.replace(digit + name, digit + "*" + name)
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse perturbation {text!r}: {exc.msg}") from None
    _check_expr(tree)
    theta = 2 * np.pi * np.arange(n_samples) / n_samples
    env = {"__builtins__": {}, "pi": np.pi, **_FUNCS, **{n: theta for n in _ANGLE_NAMES}}
    vals = np.broadcast_to(np.asarray(eval(compile(tree, "<g>", "eval"), env), dtype=float), theta.shape)
    coef = np.fft.rfft(vals) / n_samples
    scale = max(np.max(np.abs(vals)), 1e-300)
    if abs(coef[0]) > 1e-12 * scale:
        raise ConfigurationError("perturbation must have zero mean")
    if np.max(np.abs(coef[K + 1:]), initial=0.0) > 1e-12 * scale:
        raise ConfigurationError(f"perturbation has content above mode {K}")
    return Perturbation(2 * coef[1:K + 1].real, -2 * coef[1:K + 1].imag)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

@_register("radial", "radial_core", "concentric base solution, mode profiles and invertibility table",
           "base.csv: r, phase, value, derivative\n"
           "modes.csv: k, s_prime_at_one, flagged, condition",
           [Option("n", int, 2, "space dimension"), *_cond_options(),
            Option("r", float, 0.5, "core radius"),
            Option("beta", float, 0.0, "zeroth-order coefficient"),
            Option("gamma", float, 1.0, "source"),
            Option("c_bdry", float, 0.0, "Dirichlet value on the outer boundary"),
            Option("kmax", int, 8, "largest perturbation mode"),
            Option("nodes", int, 4097, "radial grid nodes"),
            Option("residual_tol", float, 1e-10, "backward-error bound of the radial solves", tolerance=True),
            Option("flag_threshold", float, 1e-8, "modal derivatives below this are flagged", tolerance=True)])
class _Radial:
    @staticmethod
    def prepare(p):
        from twophase.radial_core import Conductivity, EllipticParams, RadialConfig
        if p["nodes"] < 16:
            raise ConfigurationError("nodes must be >= 16")
        return (EllipticParams(p["beta"], p["gamma"], p["c_bdry"], p["n"]),
                Conductivity(p["sigma_c"], p["sigma_s"]), RadialConfig.uniform(p["r"], p["nodes"]))

    @staticmethod
    def execute(p, prepared, art: Artifacts):
        from twophase.radial_core import PHASE_NAMES, invertibility_report, solve_base_radial
        params, cond, config = prepared
        base = solve_base_radial(params, cond, config, tol=p["residual_tol"])
        art.csv("base.csv", ["r", "phase", "value", "derivative"],
                zip(base.r, (PHASE_NAMES[int(q)] for q in base.phase), base.values, base.deriv))
        table = invertibility_report(base, p["kmax"], threshold=p["flag_threshold"])
        art.csv("modes.csv", ["k", "s_prime_at_one", "flagged", "condition"],
                ((m.k, m.deriv_at_one, m.flagged, m.condition) for m in table))
        summary = {"lambda": base.lambda_serrin, "outer_flux": cond.sigma_s * base.du_outer,
                   "residual": base.residual, "flagged_modes": [m.k for m in table if m.flagged]}
        return summary, {"nodes": int(config.grid.size)}, EXIT_OK


@_register("counterexample", "shape_newton", "quasi-Newton solve for the interface f(g)",
           "report.json: converged, iterations, residual_history, coefficients, mode_two_ratio\n"
           "interface.csv: k, kind, coefficient\n"
           "history.csv: iteration, residual, contraction\n"
           "sweep.csv (with --sweep): eps, deviation",
           [Option("g", str, "0.01*cos(2θ)", "outer perturbation, an expression in θ"),
            *_cond_options(),
            Option("beta", float, 0.0, "zeroth-order coefficient"),
            Option("gamma", float, 1.0, "source"),
            Option("r", float, 0.5, "unperturbed interface radius"),
            Option("modes", int, 6, "number of Fourier modes K"),
            Option("resolution", int, 64, "mesh resolution"),
            Option("max_iter", int, 10, "iteration cap"),
            Option("update", str, "broyden", "iteration matrix update", choices=("broyden", "frozen")),
            Option("sweep", _bool, False, "also run the first-order consistency sweep"),
            Option("sweep_eps", _float_list, [0.02, 0.01, 0.005], "amplitudes of the sweep"),
            Option("newton_tol", float, 1e-6, "relative residual target", tolerance=True)])
class _Counterexample:
    @staticmethod
    def prepare(p):
        from twophase.radial_core import Conductivity, EllipticParams
        from twophase.shape_newton import NewtonOptions
        cond = Conductivity(p["sigma_c"], p["sigma_s"])
        cond.require_two_phase()
        if p["modes"] < 2:
            raise ConfigurationError("modes must be >= 2")
        if not 0 < p["r"] < 1:
            raise ConfigurationError("interface radius must lie in (0, 1)")
        g = parse_perturbation(p["g"], p["modes"])
        if not g.is_small():
            raise ConfigurationError("outer perturbation violates sup |g| < 1/4")
        opts = NewtonOptions(K=p["modes"], resolution=p["resolution"], tol=p["newton_tol"],
                             max_iter=p["max_iter"], R=p["r"], update=p["update"])
        return g, cond, EllipticParams(p["beta"], p["gamma"]), opts

    @staticmethod
    def execute(p, prepared, art: Artifacts):
        from twophase import shape_newton as sn
        g, cond, params, opts = prepared
        try:
            f, rep = sn.newton_solve(g, cond, params, opts)
        except DivergenceError as exc:
            f, rep = sn.Perturbation.from_vector(exc.report.f_history[-1], opts.R), exc.report
        coef = f.vector()
        others = np.delete(coef, 1)
        ratio = abs(coef[1]) / max(np.max(np.abs(others)), 1e-300)
        report = {"converged": rep.converged, "iterations": rep.iterations, "message": rep.message,
                  "residual_history": rep.residual_history, "contraction": rep.contraction,
                  "cos": f.cos, "sin": f.sin, "mode_two_ratio": ratio,
                  "small_interface": rep.small_interface, "modal_derivatives": rep.modal_derivs,
                  "g_cos": g.cos, "g_sin": g.sin}
        art.csv("interface.csv", ["k", "kind", "coefficient"],
                [(k + 1, "cos", c) for k, c in enumerate(f.cos)] + [(k + 1, "sin", s) for k, s in enumerate(f.sin)])
        contraction = [float("nan")] + list(rep.contraction)
        art.csv("history.csv", ["iteration", "residual", "contraction"],
                zip(range(len(rep.residual_history)), rep.residual_history, contraction))
        if p["sweep"] and rep.converged:
            unit = g.scaled(1.0 / max(g.sup_norm(), 1e-300))
            sw = sn.consistency_sweep(unit, cond, params, tuple(p["sweep_eps"]), opts)
            art.csv("sweep.csv", ["eps", "deviation"], zip(sw["eps"], sw["deviation"]))
            report["sweep_slope"] = sw["slope"]
        art.json("report.json", report)
        status = EXIT_OK if rep.converged else EXIT_NUMERICAL
        summary = {k: report[k] for k in ("converged", "iterations", "mode_two_ratio")}
        return summary, {"resolution": opts.resolution, "modes": opts.K}, status


def _heat_geometry(p):
    from twophase import parabolic_lab as pl
    extra = {k: p[k] for k in ("h_fine", "h_max") if p[k] is not None}
    if p["geometry"] == "radial":
        return pl.RadialGeometry(p["r"], 1.0, p["n"], **extra)
    if p["geometry"] == "flat":
        return pl.FlatGeometry(**extra)
    from twophase import shape_newton as sn
    if p["n"] != 2:
        raise ConfigurationError("planar meshes are two-dimensional")
    f = sn.Perturbation.single(2, p["eps"], 6, p["r"]) if p["eps"] else sn.Perturbation.zeros(6, p["r"])
    dmap = sn.extend_perturbation(f, sn.Perturbation.zeros(6), R=p["r"])
    return pl.PlanarGeometry(sn.build_mesh(dmap, p["resolution"]))


def _optional_float(text):
    return None if str(text).strip().lower() in ("", "none", "default") else float(text)


@_register("heatsim", "parabolic_lab", "parabolic simulation with flux and interface diagnostics",
           "profile.csv: t, x, y, value (y is 0 for 1D fields)\n"
           "flux.csv (Dirichlet): t, mean_flux, band_spread, raw_spread\n"
           "interface.csv (Cauchy): t, u_interface, similarity_limit",
           [Option("problem", str, "cauchy_dirichlet", "problem kind", choices=("cauchy_dirichlet", "cauchy")),
            Option("geometry", str, "radial", "domain", choices=("radial", "flat", "planar")),
            Option("n", int, 2, "space dimension (radial)"),
            *_cond_options(),
            Option("sigma_m", float, 1.0, "exterior conductivity (Cauchy problem)"),
            Option("r", float, 0.5, "core radius"),
            Option("eps", float, 0.0, "mode-2 amplitude of the interface (planar)"),
            Option("resolution", int, 48, "mesh resolution (planar)"),
            Option("T", float, 1.0, "time horizon"),
            Option("t_min", float, 1e-6, "first time step"),
            Option("steps_per_decade", int, 120, "time steps per decade"),
            Option("time_richardson", _bool, True, "Richardson extrapolation in time"),
            Option("h_fine", _optional_float, None, "finest spacing (1D)"),
            Option("h_max", _optional_float, None, "coarsest spacing (1D)"),
            Option("output_times", _float_list, [1e-3, 1e-2, 1e-1, 1.0], "times written to profile.csv"),
            Option("flux_modes", int, 6, "Fourier band of the flux spread")])
class _HeatSim:
    @staticmethod
    def prepare(p):
        from twophase import parabolic_lab as pl
        from twophase.radial_core import Conductivity
        cond = Conductivity(p["sigma_c"], p["sigma_s"], p["sigma_m"])
        if any(t <= 0 or t > p["T"] for t in p["output_times"]):
            raise ConfigurationError("output times must lie in (0, T]")
        prob = pl.HeatProblem(p["problem"], cond, _heat_geometry(p), T=p["T"], t_min=p["t_min"],
                              steps_per_decade=p["steps_per_decade"], time_richardson=p["time_richardson"])
        if prob.kind == pl.CAUCHY:
            prob.box_width()
        return prob

    @staticmethod
    def execute(p, prob, art: Artifacts):
        from twophase import parabolic_lab as pl
        fld = pl.simulate(prob)
        rows = []
        for t in p["output_times"]:
            vals = fld.at_time(t)
            if fld.mesh is not None:
                rows += [(t, x, y, v) for (x, y), v in zip(fld.mesh.points, vals)]
            else:
                rows += [(t, x, 0.0, v) for x, v in zip(fld.nodes, vals)]
        art.csv("profile.csv", ["t", "x", "y", "value"], rows)
        summary = {"max_violation": fld.max_violation, "halvings": fld.halvings,
                   "stored_times": int(fld.times.size)}
        if prob.kind == pl.CAUCHY_DIRICHLET and not isinstance(prob.geometry, pl.FlatGeometry):
            surface = pl.MeshRing(1.0) if fld.mesh is not None else pl.Circle(prob.geometry.R_outer)
            ft = pl.flux_trace(fld, surface, modes=p["flux_modes"])
            art.csv("flux.csv", ["t", "mean_flux", "band_spread", "raw_spread"],
                    zip(ft.times, ft.values.mean(axis=1), ft.relative_spread(), ft.relative_spread(band=False)))
            summary["max_relative_band_spread"] = float(np.max(ft.relative_spread()))
        if prob.kind == pl.CAUCHY:
            target = pl.similarity_limit(prob.cond)
            at = prob.geometry.R_outer if fld.is_radial else prob.geometry.interface
            art.csv("interface.csv", ["t", "u_interface", "similarity_limit"],
                    ((t, v, target) for t, v in zip(fld.times, fld.profile(at)[:, 0])))
            if not fld.is_radial:
                summary["interface_limit"] = pl.interface_limit(fld).estimates
            summary["similarity_limit"] = target
        grid = {"nodes": int(fld.values.shape[1]), "times": int(fld.times.size)}
        return summary, grid, EXIT_OK


@_register("asymptotics", "parabolic_lab", "heat-content ratio of two tangent balls at a boundary point",
           "content.csv: t, radius, content, rescaled\n"
           "ratio.csv: t, ratio",
           [*_cond_options(),
            Option("n", int, 2, "space dimension"),
            Option("r", float, 0.5, "core radius"),
            Option("radii", _float_list, [0.2, 0.3], "the two ball radii"),
            Option("T", float, 0.01, "time horizon"),
            Option("t_min", float, 1e-9, "first time step"),
            Option("h_fine", float, 2e-5, "finest spacing at the boundary"),
            Option("steps_per_decade", int, 60, "time steps per decade"),
            Option("sample_times", _float_list, [1.6e-3, 4e-4, 1e-4, 2.5e-5],
                   "geometric time sequence for the extrapolation"),
            Option("ratio_tol", float, 0.05, "relative tolerance of the extrapolated ratio", tolerance=True)])
class _Asymptotics:
    @staticmethod
    def prepare(p):
        from twophase import parabolic_lab as pl
        from twophase.radial_core import Conductivity
        if len(p["radii"]) != 2:
            raise ConfigurationError("radii needs exactly two values")
        if max(p["radii"]) >= 1 - p["r"]:
            raise ConfigurationError("balls must stay in the shell")
        ts = np.asarray(p["sample_times"])
        if ts.size < 2 or np.any(np.diff(ts) >= 0) or ts[0] > p["T"]:
            raise ConfigurationError("sample_times must decrease and lie below T")
        geo = pl.RadialGeometry(p["r"], 1.0, p["n"], h_fine=p["h_fine"])
        return pl.HeatProblem(pl.CAUCHY_DIRICHLET, Conductivity(p["sigma_c"], p["sigma_s"]), geo, T=p["T"],
                              t_min=p["t_min"], steps_per_decade=p["steps_per_decade"])

    @staticmethod
    def execute(p, prob, art: Artifacts):
        from twophase import parabolic_lab as pl
        fld = pl.simulate(prob)
        r1, r2 = p["radii"]
        c1 = pl.heat_content(fld, [1 - r1] + [0.0] * (fld.dim - 1), r1)
        c2 = pl.heat_content(fld, [1 - r2] + [0.0] * (fld.dim - 1), r2)
        art.csv("content.csv", ["t", "radius", "content", "rescaled"],
                [(t, r1, c, s) for t, c, s in zip(fld.times, c1.content, c1.rescaled)]
                + [(t, r2, c, s) for t, c, s in zip(fld.times, c2.content, c2.rescaled)])
        ts = np.asarray(p["sample_times"])
        ratio = np.array([np.interp(t, fld.times, c1.rescaled) / np.interp(t, fld.times, c2.rescaled)
                          for t in ts])
        art.csv("ratio.csv", ["t", "ratio"], zip(ts, ratio))
        ext = pl.richardson_to_zero(ts, ratio)
        # unit-sphere boundary: every principal curvature equals 1
        target = ((1 / r2 - 1) / (1 / r1 - 1)) ** ((fld.dim - 1) / 2)
        rel = abs(ext.value - target) / target
        summary = {"extrapolated": ext.value, "target": target, "relative_error": rel,
                   "within_tolerance": rel <= p["ratio_tol"]}
        return summary, {"nodes": int(fld.nodes.size), "times": int(fld.times.size)}, EXIT_OK


@_register("laplace", "laplace_bridge", "Laplace-parameter solves, flux asymptotics, barrier and consistency checks",
           "flux.csv: lambda, flux, series\n"
           "barrier.csv (with --barrier): lambda, lower_gap, upper_gap, plus_margin, minus_margin\n"
           "consistency.csv (with --consistency): r, transformed, direct, difference",
           [*_cond_options(),
            Option("n", int, 2, "space dimension"),
            Option("r", float, 0.5, "core radius"),
            Option("lambdas", _float_list, [100.0, 400.0, 1600.0, 6400.0], "Laplace parameters of the sweep"),
            Option("barrier", _bool, False, "build the tube barrier and check the sandwich (n = 2)"),
            Option("consistency", _bool, False, "compare the transformed simulation with the direct solve at lambda 1"),
            Option("fit_tol", float, 0.02, "relative tolerance of the fitted flux limit", tolerance=True)])
class _Laplace:
    @staticmethod
    def prepare(p):
        from twophase import parabolic_lab as pl
        from twophase.radial_core import Conductivity
        lam = np.asarray(p["lambdas"])
        if lam.size < 4 or np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise ConfigurationError("lambdas must be at least 4 increasing positive values")
        if p["barrier"] and p["n"] != 2:
            raise ConfigurationError("the barrier is built for plane domains (n = 2)")
        return pl.RadialGeometry(p["r"], 1.0, p["n"]), Conductivity(p["sigma_c"], p["sigma_s"])

    @staticmethod
    def execute(p, prepared, art: Artifacts):
        from twophase import laplace_bridge as lb
        from twophase import parabolic_lab as pl
        geo, cond = prepared
        sweep = [lb.solve_elliptic_lambda(geo, cond, lam) for lam in p["lambdas"]]
        fit = lb.flux_asymptotics(sweep, cond.sigma_s, curvature_sum=float(p["n"] - 1))
        art.csv("flux.csv", ["lambda", "flux", "series"],
                ((s.lam, float(np.mean(s.flux)), float(np.mean(row))) for s, row in zip(sweep, fit.series)))
        const = float(np.mean(fit.constant))
        rel = abs(const - fit.target) / abs(fit.target)
        summary = {"limit": const, "target": fit.target, "relative_error": rel,
                   "within_tolerance": rel <= p["fit_tol"]}
        if p["barrier"]:
            from twophase.geometry import CurveBoundary
            bdata = lb.build_barrier(CurveBoundary.circle(1.0), cond.sigma_s)

            def inner(lam, pts):
                return lb.solve_elliptic_lambda(geo, cond, lam)(np.hypot(*pts.T))

            bdata = lb.search_lambda0(bdata, inner)
            rows, holds = [], True
            for lam in bdata.lambda0 * np.array([1.0, 2.0, 4.0, 8.0]):
                _, _, wm, wp = lb.barrier_eval(bdata, bdata.sample_points, lam)
                w = inner(lam, bdata.sample_points)
                plus, minus = lb.differential_margins(bdata, lam)
                rows.append((lam, np.min(w - wm), np.min(wp - w), np.max(plus), np.min(minus)))
                holds = holds and rows[-1][1] >= 0 and rows[-1][2] >= 0
            art.csv("barrier.csv", ["lambda", "lower_gap", "upper_gap", "plus_margin", "minus_margin"], rows)
            summary.update(lambda0=bdata.lambda0, sandwich_holds=holds)
        if p["consistency"]:
            from twophase.radial_core import EllipticParams, RadialConfig, solve_base_radial
            fld = pl.simulate(pl.HeatProblem(pl.CAUCHY_DIRICHLET, cond, geo, T=20.0, t_min=1e-8))
            w = lb.transform_field(fld, 1.0)
            v = solve_base_radial(EllipticParams(beta=1.0, gamma=1.0, dim=p["n"]), cond,
                                  RadialConfig.uniform(p["r"], 4097))
            direct = v(fld.nodes)
            art.csv("consistency.csv", ["r", "transformed", "direct", "difference"],
                    zip(fld.nodes, 1 - w.values, direct, 1 - w.values - direct))
            summary["consistency_error"] = float(np.max(np.abs(1 - w.values - direct)))
        return summary, {"lambdas": len(sweep), "nodes": [int(s.nodes.size) for s in sweep]}, EXIT_OK


@_register("geometry", "geometry", "curvatures and the moment-expansion fit of C(p)",
           "curvature.csv: theta, x, y, kappa\n"
           "moments.csv: theta, radius, raw_estimate\n"
           "fit.csv: theta, extrapolated, finest_raw, flagged",
           [Option("shape", str, "circle", "boundary curve", choices=("circle", "ellipse")),
            Option("rho", float, 1.0, "circle radius"),
            Option("a", float, 2.0, "ellipse semi-axis along x"),
            Option("b", float, 1.0, "ellipse semi-axis along y"),
            Option("samples", int, 8, "boundary points for the C(p) fit"),
            Option("curvature_samples", int, 64, "boundary points for curvature.csv"),
            Option("radii", _float_list, [0.2, 0.1, 0.05], "decreasing ball radii (scaled by rho for a circle)"),
            Option("order", int, 48, "Gauss order of the radial quadrature")])
class _Geometry:
    @staticmethod
    def prepare(p):
        from twophase.geometry import CurveBoundary
        for key in ("rho", "a", "b"):
            if p[key] <= 0:
                raise ConfigurationError(f"{key} must be positive")
        radii = np.asarray(p["radii"]) * (p["rho"] if p["shape"] == "circle" else 1.0)
        if radii.size < 2 or np.any(np.diff(radii) >= 0):
            raise ConfigurationError("radii must decrease")
        if p["shape"] == "circle":
            return CurveBoundary.circle(p["rho"]), radii
        return CurveBoundary.ellipse(p["a"], p["b"]), radii

    @staticmethod
    def execute(p, prepared, art: Artifacts):
        from twophase.geometry import curvatures, fit_weingarten
        boundary, radii = prepared
        cd = curvatures(boundary, p["curvature_samples"])
        art.csv("curvature.csv", ["theta", "x", "y", "kappa"],
                zip(cd.params, cd.points[:, 0], cd.points[:, 1], cd.kappa[:, 0]))
        theta = 2 * np.pi * np.arange(p["samples"]) / p["samples"]
        fits = [fit_weingarten(boundary, t, radii, p["order"]) for t in theta]
        art.csv("moments.csv", ["theta", "radius", "raw_estimate"],
                [(t, r, e) for t, ft in zip(theta, fits) for r, e in zip(ft.radii, ft.raw_estimates)])
        art.csv("fit.csv", ["theta", "extrapolated", "finest_raw", "flagged"],
                ((t, ft.extrapolated, ft.raw_estimates[-1], ft.flagged) for t, ft in zip(theta, fits)))
        vals = np.array([ft.extrapolated for ft in fits])
        summary = {"mean": float(vals.mean()), "relative_variation": float(np.ptp(vals) / abs(vals.mean()))}
        if p["shape"] == "circle":
            target = 3.0 / p["rho"] ** 2
            summary.update(target=target, relative_error=float(np.max(np.abs(vals - target)) / target))
        return summary, {"radii": list(radii), "order": p["order"]}, EXIT_OK


# --------------------------------------------------------------------------
# configuration, dispatch
# --------------------------------------------------------------------------

def _section_options(section):
    """Union of the options of all subcommands reading ``section``."""
    out = {}
    for sub in SUBCOMMANDS.values():
        if sub.section == section:
            out.update({o.name: o for o in sub.options})
    return out


def read_config(path):
    """Parse an INI file; sections are ``run`` or module names, keys must be known."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    sections = {s.section for s in SUBCOMMANDS.values()}
    out = {}
    for name in parser.sections():
        if name == "run":
            allowed = {"out": Option("out", str, "out", "")}
        elif name in sections:
            allowed = _section_options(name)
        else:
            raise ConfigurationError(f"unknown config section [{name}]")
        block = {}
        for key, raw in parser.items(name):
            norm = key.replace("-", "_")
            if norm not in allowed:
                raise ConfigurationError(f"unknown key {key!r} in section [{name}]")
            block[norm] = allowed[norm].parse(raw)
        out[name] = block
    return out


def _schema_epilog(sub):
    return "CSV columns:\n" + "\n".join("  " + line for line in sub.schemas.splitlines())


def build_parser():
    parser = argparse.ArgumentParser(
        prog="twophase", description="Two-phase heat conductor experiments.",
        epilog="Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subs = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", required=True)
    for sub in SUBCOMMANDS.values():
        sp = subs.add_parser(sub.name, help=sub.summary, description=sub.summary, epilog=_schema_epilog(sub),
                             formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help=f"INI file; keys are read from section [{sub.section}]")
        sp.add_argument("--out", help="output directory (default: out)")
        for opt in sub.options:
            sp.add_argument(opt.flag, dest=opt.name, default=None, choices=opt.choices,
                            help=f"{opt.help} (default: {opt.default})")
    return parser


def resolve(args) -> ExperimentConfig:
    """Merge defaults, config file and flags into a validated configuration."""
    sub = SUBCOMMANDS[args.subcommand]
    file_cfg = read_config(args.config) if args.config else {}
    block = file_cfg.get(sub.section, {})
    params = {}
    for opt in sub.options:
        flag_value = getattr(args, opt.name)
        if flag_value is not None:
            params[opt.name] = opt.parse(flag_value)
        elif opt.name in block:
            params[opt.name] = block[opt.name]
        else:
            params[opt.name] = opt.default
    out = args.out or file_cfg.get("run", {}).get("out", "out")
    tol = {o.name: params.pop(o.name) for o in sub.options if o.tolerance}
    return ExperimentConfig(sub.name, params, Path(out), tol)


def _error(kind, message, **extra):
    print(json.dumps(_jsonable({"status": "error", "kind": kind, "message": message, **extra}), sort_keys=True),
          file=sys.stderr)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = SUBCOMMANDS[args.subcommand]
    try:
        cfg = resolve(args)
        prepared = sub.prepare({**cfg.params, **cfg.tolerances})
    except ConfigurationError as exc:
        _error("configuration", str(exc), subcommand=sub.name)
        return EXIT_USAGE
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    art = Artifacts(cfg.out_dir)
    manifest = {"subcommand": cfg.subcommand, "config": cfg.params, "tolerances": cfg.tolerances,
                "config_hash": cfg.content_hash(), "package_version": _version()}
    try:
        summary, grid, status = sub.execute({**cfg.params, **cfg.tolerances}, prepared, art)
    except ConfigurationError as exc:
        _error("configuration", str(exc), subcommand=sub.name)
        return EXIT_USAGE
    except NumericalError as exc:
        report = {"error": type(exc).__name__, "message": str(exc), "residual": exc.residual}
        manifest.update(status="failed", report=report, artifacts=art.checksums())
        (cfg.out_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        _error("numerical", str(exc), subcommand=sub.name, error=type(exc).__name__)
        return EXIT_NUMERICAL
    manifest.update(status="ok" if status == EXIT_OK else "failed", summary=summary, grid=grid,
                    artifacts=art.checksums())
    (cfg.out_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    print(json.dumps(_jsonable({"status": manifest["status"], "out": str(cfg.out_dir), **summary}), sort_keys=True))
    return status


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
