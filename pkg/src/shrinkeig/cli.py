"""Command-line front end.

Subcommands
-----------
mesh      build a canonical mesh and write it as JSON
spectrum  lowest constrained eigenvalues (CSV: index, eigenvalue, residual, constraint_violation)
coupled   alpha sweep of the coupled problem (CSV: alpha, mu, gap, ambient_energy)
verify    identity and inequality checks (JSON reports plus a summary table)
converge  refinement study (CSV: level, h, lambda1, error, order)

Settings come from defaults, then ``--config FILE`` (a JSON object), then
explicit flags.  Exit codes: 0 success, 1 invalid input, 2 numerical
failure, 3 violation of the 1/4 lower bound on a residual-clean mesh.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry as geo
from .spectrum import LAMBDA1_LOWER_BOUND, EigensolverError, spectrum_k

log = logging.getLogger("shrinkeig")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_GATE = 0, 1, 2, 3


class InputError(Exception):
    """Invalid configuration or input file (exit code 1)."""


class NumericalFailure(Exception):
    """Solver breakdown or failed verification (exit code 2)."""


class GateViolation(Exception):
    """Computed value below 1/4 on a residual-clean shrinker (exit code 3)."""


# -- configuration -------------------------------------------------------------

MESH_KEYS = {"kind": "sphere", "dim": 1, "refine": None, "segments": None, "half_length": 8.0,
             "radius": 8.0, "axes": None, "mesh": None}

DEFAULTS = {
    "mesh": dict(MESH_KEYS),
    "spectrum": {**MESH_KEYS, "k": 4, "method": "auto", "shift_invert": False, "vectors": None},
    "coupled": {**MESH_KEYS, "segments": 512, "ball_radius": 6.0,
                "alphas": [1.0, 0.1, 0.01, 0.001], "fields": None, "svg": None},
    "verify": {"suite": "all", "levels": [64, 128, 256, 512]},
    "converge": {"kind": "circle", "levels": None, "svg": None},
}
COMMON = {"out": None, "threads": None, "strict_sequential": False, "tol": None}
KINDS = ("sphere", "cylinder", "plane", "ellipse")
# (kind, n) -> refinement when none is given; n = 0 means any n
DEFAULT_REFINE = {("sphere", 1): 5, ("sphere", 2): 4, ("cylinder", 0): 2, ("plane", 1): 5,
                  ("plane", 2): 3}


def _positive(cfg, key, integer=False, allow_none=True):
    v = cfg.get(key)
    if v is None and allow_none:
        return
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) and v > 0
    if integer:
        ok = ok and float(v).is_integer()
    if not ok:
        raise InputError(f"{key.replace('_', '-')} must be a positive {'integer' if integer else 'number'}, got {v!r}")


def validate(command: str, cfg: dict) -> dict:
    """Range checks for every numeric setting, before any computation."""
    for key in ("half_length", "radius", "ball_radius", "tol"):
        if key in cfg:
            _positive(cfg, key)
    for key in ("segments", "k", "threads", "dim"):
        if key in cfg:
            _positive(cfg, key, integer=True)
    if "refine" in cfg and cfg["refine"] is not None:
        if not isinstance(cfg["refine"], int) or isinstance(cfg["refine"], bool) or cfg["refine"] < 0:
            raise InputError(f"refine must be a nonnegative integer, got {cfg['refine']!r}")
    if "kind" in cfg and command != "converge" and cfg["kind"] not in KINDS:
        raise InputError(f"unknown kind {cfg['kind']!r}; choose from {', '.join(KINDS)}")
    if command == "converge" and cfg["kind"] not in CONVERGE_ORACLES:
        raise InputError(f"converge supports {', '.join(CONVERGE_ORACLES)}")
    if cfg.get("axes") is not None:
        if len(cfg["axes"]) != 2 or min(cfg["axes"]) <= 0:
            raise InputError("axes needs two positive numbers")
    if "alphas" in cfg:
        a = cfg["alphas"]
        if not a or any((not isinstance(x, (int, float))) or not x > 0 for x in a):
            raise InputError("alphas must be a nonempty list of positive numbers")
        if any(y >= x for x, y in zip(a, a[1:])):
            raise InputError("alphas must be strictly descending")
    if command == "verify" and cfg["suite"] not in SUITES:
        raise InputError(f"suite must be one of {', '.join(SUITES)}")
    if cfg.get("levels") is not None:
        lv = cfg["levels"]
        if len(lv) < 2 or any(not isinstance(x, int) or x < 0 for x in lv):
            raise InputError("levels must list at least two nonnegative integers")
    if command == "spectrum" and cfg["method"] not in ("auto", "dense", "lobpcg", "shift-invert"):
        raise InputError(f"unknown method {cfg['method']!r}")
    return cfg


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {**COMMON, **DEFAULTS[command]}
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func")}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise InputError("config file must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(doc)
    cfg.update(explicit)
    return validate(command, cfg)


# -- helpers -------------------------------------------------------------------

def build_surface(cfg: dict) -> geo.ShrinkerMesh:
    if cfg.get("mesh"):
        try:
            doc = json.loads(Path(cfg["mesh"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read mesh {cfg['mesh']}: {exc}") from exc
        return geo.mesh_from_dict(doc)
    kind, n = cfg["kind"], int(cfg["dim"])
    refine = cfg["refine"]
    if refine is None:
        refine = DEFAULT_REFINE.get((kind, n), DEFAULT_REFINE.get((kind, 0), 3))
    if kind == "sphere":
        return geo.make_sphere(n, refine, cfg.get("segments"))
    if kind == "cylinder":
        return geo.make_cylinder(1, 2, cfg["half_length"], refine)
    if kind == "plane":
        return geo.make_plane(n, cfg["radius"], refine)
    a, b = cfg["axes"] or (math.sqrt(2), 2 * math.sqrt(2))
    return geo.make_ellipse(a, b, cfg.get("segments") or 256)


def _gate_applies(mesh: geo.ShrinkerMesh) -> bool:
    return mesh.kind != "custom" and geo.is_residual_clean(mesh)


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _write_svg(path, x, ys: dict, xlabel, ylabel, logx=False, logy=False):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise InputError("SVG output needs matplotlib (install the 'plot' extra)") from exc
    plt.rcParams["svg.hashsalt"] = "shrinkeig"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, y in ys.items():
        ax.plot(x, y, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- commands ------------------------------------------------------------------

def cmd_mesh(cfg: dict) -> int:
    mesh = build_surface(cfg)
    text = geo.mesh_to_json(mesh)
    with _output(cfg["out"]) as fh:
        fh.write(text)
    res = geo.max_residual(mesh)
    print(f"kind={mesh.kind} n={mesh.dim_n} vertices={mesh.n_vertices} simplices={len(mesh.simplices)} "
          f"h={mesh.max_edge_length:.6g} truncation_radius={mesh.truncation_radius} "
          f"max_residual={res:.3e} residual_clean={geo.is_residual_clean(mesh)}",
          file=sys.stderr if cfg["out"] in (None, "-") else sys.stdout)
    return EXIT_OK


def cmd_spectrum(cfg: dict) -> int:
    from .weighted_forms import assemble_surface_forms
    mesh = build_surface(cfg)
    ops = assemble_surface_forms(mesh)
    k = min(int(cfg["k"]), ops.size - 1)
    kw = {"method": cfg["method"], "shift_invert": bool(cfg["shift_invert"])}
    if cfg["tol"] is not None:
        kw["tol"] = cfg["tol"]
    try:
        res = spectrum_k(ops, k, **kw)
    except EigensolverError as exc:
        raise NumericalFailure(str(exc)) from exc
    violation = np.maximum(res.mean_violation, res.norm_violation)
    with _output(cfg["out"]) as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "eigenvalue", "residual", "constraint_violation"])
        for i, lam in enumerate(res.eigenvalues):
            wr.writerow([i + 1, f"{lam:.17g}", f"{res.residuals[i]:.3e}", f"{violation[i]:.3e}"])
    if cfg["vectors"]:
        doc = {"eigenvalues": res.eigenvalues.tolist(), "eigenvectors": res.eigenvectors.T.tolist(),
               "method": res.method}
        Path(cfg["vectors"]).write_text(json.dumps(doc) + "\n")
    print(f"clusters: {', '.join(f'{v:.6g} (x{c})' for v, c in res.clusters())}", file=sys.stderr)
    if _gate_applies(mesh):
        if res.first < LAMBDA1_LOWER_BOUND:
            raise GateViolation(f"lambda_1 = {res.first:.6g} < 1/4 on a residual-clean mesh")
    else:
        print("warning: mesh is not a residual-clean shrinker; lower-bound gate skipped",
              file=sys.stderr)
    return EXIT_OK


def cmd_coupled(cfg: dict) -> int:
    from .coupled import alpha_sweep, assemble_coupled, euler_lagrange_residual, write_sweep_csv
    mesh = build_surface(cfg)
    amb = geo.build_ambient_mesh(mesh, cfg["ball_radius"])
    system = assemble_coupled(mesh, amb, cfg["alphas"][0], parallel=not cfg["strict_sequential"])
    result = alpha_sweep(mesh, amb, cfg["alphas"], system=system)
    with _output(cfg["out"]) as fh:
        write_sweep_csv(result, fh)
    tol = cfg["tol"] or 1e-8
    for sol in result.solutions:
        el = euler_lagrange_residual(system.with_alpha(sol.alpha), sol.f, sol.w, sol.mu)
        if el > tol:
            raise NumericalFailure(f"Euler-Lagrange residual {el:.3e} at alpha={sol.alpha:g}")
    slack = 1e-10
    for r in result.rows:
        if r.gap < -slack or r.gap > r.alpha * r.ambient_energy * (1 + slack) + slack:
            raise NumericalFailure(f"sandwich bound violated at alpha={r.alpha:g}")
    if not result.monotone():
        raise NumericalFailure("mu(alpha) is not monotone along the sweep")
    if cfg["fields"]:
        sol = result.solutions[-1]
        Path(cfg["fields"]).write_text(geo.ambient_to_json(amb, {"w": sol.w}))
    if cfg["svg"]:
        _write_svg(cfg["svg"], [r.alpha for r in result.rows],
                   {"mu(alpha)": [r.mu for r in result.rows],
                    "lambda_1": [result.lambda1] * len(result.rows)},
                   "alpha", "value", logx=True)
    if _gate_applies(mesh) and min(r.mu for r in result.rows) < LAMBDA1_LOWER_BOUND:
        raise GateViolation("mu(alpha) < 1/4 on a residual-clean mesh")
    return EXIT_OK


SUITES = ("lemmas", "reilly", "all")


def suite_tasks(suite: str, levels, tol: Optional[float] = None):
    """Named zero-argument callables, each returning one report."""
    from . import identities as ids
    from .coupled import assemble_coupled, drift_harmonic_interval, mu_of_alpha
    from .weighted_forms import assemble_surface_forms

    ineq = tol if tol is not None else ids.INEQ_TOL
    tasks = []
    if suite in ("lemmas", "all"):
        for fam in ("1d", "radial", "const"):
            for d in (2, 3):
                tasks.append(lambda fam=fam, d=d: ids.check_interior_bochner(fam, dim=d))
        canon = {
            "circle": (lambda: geo.make_sphere(1, segments=256), 1.0),
            "sphere2": (lambda: geo.make_sphere(2, 3), 1.0),
            "cylinder": (lambda: geo.make_cylinder(refine=2), 2.0),
            "plane1": (lambda: geo.make_plane(1, refine=5), 2.0),
            "plane2": (lambda: geo.make_plane(2, refine=3), 2.0),
        }

        def surface_lemmas(name, make, j_in):
            mesh = make()
            ops = assemble_surface_forms(mesh)
            f1 = spectrum_k(ops, 1).vector(0)
            out = []
            for fname, f in (("one", np.ones(mesh.n_vertices)), ("eig", f1)):
                for j in (None, j_in):
                    out.append(ids.check_divergence_lemma_surface(mesh, f, j, ineq,
                                                                  label=f"{name},{fname}"))
            out.append(ids.check_div_xtan(mesh))
            return out

        for name, (make, j_in) in canon.items():
            tasks.append(lambda n=name, mk=make, j=j_in: surface_lemmas(n, mk, j))

        def ambient_lemmas():
            amb = geo.build_ambient_mesh(geo.make_sphere(1, segments=128), 6.0)
            r2 = np.sum(amb.vertices ** 2, axis=1)
            bump = np.where(r2 < 1, np.exp(-1 / np.maximum(1 - r2, 1e-300)), 0.0)
            return [ids.check_divergence_lemma_ambient(amb, w, j, ineq, label=lab)
                    for lab, w in (("one", np.ones(len(r2))), ("bump", bump), ("r2", r2))
                    for j in (None, 2.0)]

        tasks.append(ambient_lemmas)
        tasks.append(lambda: ids.div_xtan_study("sphere", (1, 2, 3, 4)))
        tasks.append(lambda: ids.div_xtan_study("cylinder", (0, 1, 2)))
    if suite in ("reilly", "all"):
        lv = tuple(levels)
        tasks.append(lambda: ids.boundary_hessian_study(lv, region="omega"))
        tasks.append(lambda: ids.boundary_hessian_study(lv, region="omega_tilde"))

        tasks.append(lambda: ids.key_identity_studies(lv, js=(None, 2.0)))

        def interval():
            chk = drift_harmonic_interval()
            return ids.VerificationReport.from_residual(
                "drift_harmonic_interval", f"{chk.n_nodes} nodes on [-3, 3]", chk.weak_residual,
                1e-4, measured={"max_error": chk.max_error})

        tasks.append(interval)
    return tasks


def run_suite(suite: str, levels, workers: int = 1, tol: Optional[float] = None):
    tasks = suite_tasks(suite, levels, tol)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda t: t(), tasks))
    else:
        results = [t() for t in tasks]
    reports = []
    for r in results:
        reports.extend(r if isinstance(r, list) else [r])
    return sorted(reports, key=lambda r: r.name)


def cmd_verify(cfg: dict) -> int:
    from .identities import reports_to_json, summary_table
    workers = 1 if cfg["strict_sequential"] else max(1, int(cfg["threads"] or 2))
    reports = run_suite(cfg["suite"], cfg["levels"], workers, cfg["tol"])
    text = reports_to_json(reports)
    if cfg["out"] in (None, "-"):
        sys.stdout.write(text)
        sys.stderr.write(summary_table(reports))
    else:
        Path(cfg["out"]).write_text(text)
        sys.stdout.write(summary_table(reports))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise NumericalFailure(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return EXIT_OK


# kind -> (builder(level), exact lambda_1, default levels)
CONVERGE_ORACLES = {
    "circle": (lambda N: geo.make_sphere(1, segments=N), 0.5, [64, 128, 256, 512]),
    "sphere": (lambda r: geo.make_sphere(2, r), 0.5, [2, 3, 4, 5]),
    "plane": (lambda r: geo.make_plane(1, 8.0, r), 0.5, [3, 4, 5, 6]),
    "cylinder": (lambda r: geo.make_cylinder(refine=r), 0.5, [0, 1, 2, 3]),
}


def convergence_rows(kind: str, levels=None, tol: Optional[float] = None):
    from .weighted_forms import assemble_surface_forms
    make, exact, default = CONVERGE_ORACLES[kind]
    rows = []
    for lv in levels or default:
        mesh = make(lv)
        ops = assemble_surface_forms(mesh)
        lam = spectrum_k(ops, 1, **({"tol": tol} if tol else {})).first
        rows.append({"level": lv, "h": mesh.max_edge_length, "lambda1": lam,
                     "error": abs(lam - exact), "order": float("nan")})
    for a, b in zip(rows, rows[1:]):
        if a["error"] > 0 and b["error"] > 0:
            b["order"] = math.log(a["error"] / b["error"]) / math.log(a["h"] / b["h"])
    return rows


def cmd_converge(cfg: dict) -> int:
    rows = convergence_rows(cfg["kind"], cfg["levels"], cfg["tol"])
    with _output(cfg["out"]) as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["level", "h", "lambda1", "error", "order"])
        for r in rows:
            wr.writerow([r["level"], f"{r['h']:.17g}", f"{r['lambda1']:.17g}",
                         f"{r['error']:.6e}", "" if math.isnan(r["order"]) else f"{r['order']:.4f}"])
    if cfg["svg"]:
        _write_svg(cfg["svg"], [r["h"] for r in rows], {"|lambda1 - exact|": [r["error"] for r in rows]},
                   "h", "error", logx=True, logy=True)
    if min(r["lambda1"] for r in rows) < LAMBDA1_LOWER_BOUND:
        raise GateViolation("lambda_1 < 1/4 in the refinement study")
    return EXIT_OK


COMMANDS = {"mesh": cmd_mesh, "spectrum": cmd_spectrum, "coupled": cmd_coupled,
            "verify": cmd_verify, "converge": cmd_converge}


# -- parser --------------------------------------------------------------------

def _add_common(p):
    S = argparse.SUPPRESS
    p.add_argument("--out", default=S, help="output file (default: stdout)")
    p.add_argument("--config", default=None, help="JSON file of settings; flags take precedence")
    p.add_argument("--threads", type=int, default=S, help="cap on worker and BLAS threads")
    p.add_argument("--strict-sequential", action="store_true", default=S,
                   help="single-threaded, bitwise reproducible run")
    p.add_argument("--tol", type=float, default=S, help="solver or inequality tolerance")


def _add_mesh_args(p):
    S = argparse.SUPPRESS
    p.add_argument("--mesh", default=S, help="read the surface from a mesh JSON file")
    p.add_argument("--kind", default=S, help="sphere | cylinder | plane | ellipse")
    p.add_argument("--dim", type=int, default=S, help="intrinsic dimension n (1 or 2)")
    p.add_argument("--refine", type=int, default=S, help="refinement level")
    p.add_argument("--segments", type=int, default=S, help="polygon segments (n = 1 spheres, ellipses)")
    p.add_argument("--half-length", type=float, default=S, help="cylinder half length L")
    p.add_argument("--radius", type=float, default=S, help="plane disc radius R")
    p.add_argument("--axes", type=float, nargs=2, default=S, help="ellipse semi-axes a b")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="shrinkeig", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="write a canonical mesh as JSON")
    _add_mesh_args(p)
    _add_common(p)

    p = sub.add_parser("spectrum", help="constrained eigenvalues; CSV columns: "
                       "index, eigenvalue, residual, constraint_violation")
    _add_mesh_args(p)
    p.add_argument("--k", type=int, default=S, help="number of eigenvalues (default 4)")
    p.add_argument("--method", default=S, help="auto | dense | lobpcg | shift-invert")
    p.add_argument("--shift-invert", action="store_true", default=S,
                   help="use shift-invert Lanczos for large meshes")
    p.add_argument("--vectors", default=S, help="also write eigenvectors to this JSON file")
    _add_common(p)

    p = sub.add_parser("coupled", help="alpha sweep; CSV columns: alpha, mu, gap, ambient_energy")
    _add_mesh_args(p)
    p.add_argument("--ball-radius", type=float, default=S, help="ambient truncation radius (default 6)")
    p.add_argument("--alphas", type=float, nargs="+", default=S, help="descending coupling weights")
    p.add_argument("--fields", default=S, help="write the ambient mesh with the minimizer w")
    p.add_argument("--svg", default=S, help="plot mu(alpha) to this SVG file")
    _add_common(p)

    p = sub.add_parser("verify", help="identity checks; JSON reports to --out, summary table")
    p.add_argument("--suite", default=S, help="lemmas | reilly | all")
    p.add_argument("--levels", type=int, nargs="+", default=S,
                   help="circle segment counts for refinement studies")
    _add_common(p)

    p = sub.add_parser("converge", help="refinement study; CSV columns: level, h, lambda1, error, order")
    p.add_argument("--kind", default=S, help="circle | sphere | plane | cylinder")
    p.add_argument("--levels", type=int, nargs="+", default=S, help="refinement levels")
    p.add_argument("--svg", default=S, help="plot error against h to this SVG file")
    _add_common(p)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        threads = 1 if cfg["strict_sequential"] else cfg["threads"]
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
        with limit:
            return COMMANDS[args.command](cfg)
    except (InputError, geo.MeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, EigensolverError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GateViolation as exc:
        print(f"lower-bound violation: {exc}", file=sys.stderr)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
