"""Command line: run, sweep, validate, hausdorff."""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .descent import IterationRecord, OptimizationResult, RunConfig, initial_mesh, optimize
from .fem import SolverError
from .flow import export_vtk
from .functionals import mixed_configuration
from .mesh import TAGS, ChannelGeometry, MeshError, hausdorff_distance, read_gmsh, read_mesh

log = logging.getLogger("vortopt")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 1, 2, 3

ITERATION_COLUMNS = [
    ("iteration", "1"), ("j1", "energy"), ("j2", "energy"), ("perimeter", "length"), ("volume", "area"),
    ("objective", "energy"), ("lagrangian", "energy"), ("t_k", "time"), ("retries", "1"), ("ell", "energy/area"),
    ("b", "energy/area^2"), ("min_angle", "deg"), ("accepted", "bool"), ("remeshed", "bool"),
]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    config: RunConfig
    out_dir: Path
    sweep: list = field(default_factory=list)  # (alpha, gamma1, gamma2) per configuration
    compare: dict = field(default_factory=dict)  # name -> polyline CSV path
    mesh_file: Path | None = None
    gmsh_tags: dict = field(default_factory=dict)
    vtk_every: int = 0  # 0: first and last iterate only


# ---------------------------------------------------------------- config parsing

def gmsh_tags_present(cp: configparser.ConfigParser) -> bool:
    return cp.has_section("gmsh") and len(cp.items("gmsh")) > 0

_RUN_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind in ("float", float):
            return float(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {getattr(kind, '__name__', kind)}") from None


def _floats(section, key, raw, n=None):
    try:
        vals = [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected numbers") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"[{section}] {key}: expected {n} numbers, got {len(vals)}")
    return vals


def _parse_configurations(raw: str) -> list[int]:
    out = []
    for part in raw.replace(",", " ").split():
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


RUN_KEYS = {
    "run": {"algorithm": str, "max_iter": int, "tol": float, "seed": int},
    "objective": {"gamma1": float, "gamma2": float, "alpha": float},
    "descent": {"beta": float, "gamma_smooth": float, "epsilon": float, "max_halvings": int,
                "remesh_angle": float},
    "multipliers": {"ell0": float, "b0": float, "tau_mult": float, "b_bar": float, "m": float},
    "mesh": {"h_min": float, "h_max": float, "adapt_initial": bool},
    "flow": {"nu": float},
}


def parse_config(path, overrides: dict | None = None) -> ExperimentSpec:
    """Read an INI experiment file.

    Sections ``run``, ``objective``, ``descent``, ``multipliers``, ``mesh``,
    ``flow`` and ``geometry`` fill a RunConfig; ``output``, ``sweep`` and
    ``compare`` describe the experiment. ``[mesh] file`` loads a mesh in the
    text format or, with a ``.msh`` suffix and a ``[gmsh]`` id-to-tag map,
    a Gmsh v2 mesh. Unknown keys are errors.
    """
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = set(RUN_KEYS) | {"geometry", "output", "sweep", "compare", "gmsh"}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"{path}: unknown section [{section}]")
    kwargs = {}
    for section, keys in RUN_KEYS.items():
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            if section == "mesh" and key == "file":
                continue
            if key not in keys:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            if key == "epsilon" and raw.strip().lower() in ("", "auto", "none"):
                continue
            kwargs[key] = _convert(section, key, raw, keys[key])
    if cp.has_section("geometry"):
        g = cp["geometry"]
        unknown = set(g) - {"corners", "center", "radius", "segments"}
        if unknown:
            raise ConfigError(f"{path}: unknown key [geometry] {sorted(unknown)[0]}")
        geo = {}
        if "corners" in g:
            c = _floats("geometry", "corners", g["corners"], 8)
            geo["corners"] = tuple(zip(c[0::2], c[1::2]))
        if "center" in g:
            geo["obstacle_center"] = tuple(_floats("geometry", "center", g["center"], 2))
        if "radius" in g:
            geo["obstacle_radius"] = _convert("geometry", "radius", g["radius"], float)
        if "segments" in g:
            geo["obstacle_segments"] = _convert("geometry", "segments", g["segments"], int)
        try:
            kwargs["geometry"] = ChannelGeometry(**geo)
        except (ValueError, MeshError) as exc:
            raise ConfigError(f"{path}: [geometry] {exc}") from None
    kwargs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        config = RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None

    out = cp["output"] if cp.has_section("output") else {}
    name = out.get("name", path.stem)
    out_dir = Path(out.get("dir", Path("runs") / name))
    vtk_every = _convert("output", "vtk_every", out.get("vtk_every", "0"), int)
    mesh_file = Path(cp["mesh"]["file"]) if cp.has_option("mesh", "file") else None
    if mesh_file is not None and mesh_file.suffix == ".msh" and not gmsh_tags_present(cp):
        raise ConfigError(f"{path}: a .msh mesh needs a [gmsh] section mapping physical ids to tags")
    sweep = []
    if cp.has_section("sweep"):
        s = cp["sweep"]
        try:
            for k in _parse_configurations(s.get("configurations", "")):
                p = mixed_configuration(k)
                sweep.append((k, p.alpha, p.gamma1, p.gamma2))
        except ValueError as exc:
            raise ConfigError(f"{path}: [sweep] configurations: {exc}") from None
    compare = {k: Path(v) for k, v in cp.items("compare")} if cp.has_section("compare") else {}
    gmsh_tags = {}
    if cp.has_section("gmsh"):
        for k, v in cp.items("gmsh"):
            if v not in TAGS:
                raise ConfigError(f"{path}: [gmsh] {k} = {v}: tag must be one of {TAGS}")
            gmsh_tags[_convert("gmsh", k, k, int)] = v
    return ExperimentSpec(name, config, out_dir, sweep, compare, mesh_file, gmsh_tags, vtk_every)


# ---------------------------------------------------------------- outputs

def _header(columns) -> list[str]:
    return [f"{name} [{unit}]" for name, unit in columns]


def iteration_row(rec: IterationRecord) -> list:
    bd = rec.breakdown
    return [rec.iteration, f"{bd.j1:.12g}", f"{bd.j2:.12g}", f"{bd.perimeter:.12g}", f"{bd.volume:.12g}",
            f"{bd.objective:.12g}", f"{bd.lagrangian:.12g}", f"{rec.step:.12g}", rec.retries, f"{rec.ell:.12g}",
            f"{rec.b:.12g}", f"{rec.quality.min_angle:.8g}", int(rec.accepted), int(rec.remeshed)]


def write_iterations(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(ITERATION_COLUMNS))
        w.writerows(iteration_row(r) for r in records)


def write_polylines(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header([("iteration", "1"), ("x", "length"), ("y", "length")]))
        for r in records:
            if r.accepted:
                w.writerows([r.iteration, f"{x:.12g}", f"{y:.12g}"] for x, y in r.polyline)


def write_polyline(path, poly) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header([("x", "length"), ("y", "length")]))
        w.writerows([f"{x:.12g}", f"{y:.12g}"] for x, y in poly)


def read_polyline(path) -> np.ndarray:
    """Closed polyline from a CSV with x, y as the last two columns (header optional).

    Files with an iteration column keep only the last iteration.
    """
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise ConfigError(f"{path}: non-numeric row {row}") from None
    if not rows:
        raise ConfigError(f"{path}: empty polyline")
    arr = np.array(rows)
    if arr.shape[1] >= 3:
        arr = arr[arr[:, 0] == arr[-1, 0]]
    return arr[:, -2:]


def svg_trend(path, series: dict, title: str, ylabel: str) -> None:
    """Minimal SVG line chart; each series is normalized by its first value."""
    w, h, pad = 640, 400, 60
    norm = {k: np.asarray(v, float) / v[0] for k, v in series.items() if len(v) and v[0] != 0}
    allv = np.concatenate(list(norm.values())) if norm else np.array([1.0])
    lo, hi = float(allv.min()), float(allv.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5e-3, hi + 0.5e-3
    n = max((len(v) for v in norm.values()), default=1)
    sx = lambda i: pad + (w - 2 * pad) * (i / max(n - 1, 1))  # noqa: E731
    sy = lambda v: h - pad - (h - 2 * pad) * (v - lo) / (hi - lo)  # noqa: E731
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" '
             f'font-size="12">', f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w / 2}" y="{h - 15}" text-anchor="middle">iteration</text>',
             f'<text x="15" y="{h / 2}" transform="rotate(-90 15 {h / 2})" text-anchor="middle">{ylabel}</text>']
    for v in (lo, 0.5 * (lo + hi), hi):
        parts.append(f'<text x="{pad - 5}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.4f}</text>')
    parts.append(f'<text x="{pad}" y="{h - pad + 15}" text-anchor="middle">0</text>')
    parts.append(f'<text x="{w - pad}" y="{h - pad + 15}" text-anchor="middle">{n - 1}</text>')
    for c, (name, v) in enumerate(norm.items()):
        pts = " ".join(f"{sx(i):.1f},{sy(y):.1f}" for i, y in enumerate(v))
        col = colors[c % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{w - pad - 5}" y="{pad + 15 * (c + 1)}" text-anchor="end" fill="{col}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def summarize(spec: ExperimentSpec, result: OptimizationResult) -> dict:
    acc = result.accepted
    first, last = acc[0].breakdown, acc[-1].breakdown
    key = "lagrangian" if spec.config.algorithm == "aL" else "objective"
    summary = {
        "name": spec.name,
        "algorithm": spec.config.algorithm,
        "stop_reason": result.stop_reason,
        "iterations": acc[-1].iteration,
        "initial_objective": first.objective,
        "final_objective": last.objective,
        "objective_change_percent": 100.0 * (last.objective - first.objective) / abs(first.objective),
        f"initial_{key}": getattr(first, key),
        f"final_{key}": getattr(last, key),
        "initial_volume": first.volume,
        "final_volume": last.volume,
        "volume_change_percent": 100.0 * (last.volume - first.volume) / first.volume,
        "initial_perimeter": first.perimeter,
        "final_perimeter": last.perimeter,
        "config": {k: v for k, v in asdict(spec.config).items() if k != "geometry"},
        "geometry": asdict(spec.config.geometry),
    }
    if result.error:
        summary["error"] = result.error
    if spec.compare:
        summary["hausdorff"] = {name: hausdorff_distance(acc[-1].polyline, read_polyline(p))
                                for name, p in spec.compare.items()}
    return summary


def run_experiment(spec: ExperimentSpec) -> int:
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "ERROR").unlink(missing_ok=True)
    mesh = None
    if spec.mesh_file is not None:
        mesh = (read_gmsh(spec.mesh_file, spec.gmsh_tags) if spec.mesh_file.suffix == ".msh"
                else read_mesh(spec.mesh_file))
    vtk_dir = out / "vtk"
    vtk_dir.mkdir(exist_ok=True)
    snapshots = []

    def on_iteration(rec, ev):
        if rec.iteration == 0 or (spec.vtk_every and rec.iteration % spec.vtk_every == 0):
            export_vtk(vtk_dir / f"iter_{rec.iteration:04d}.vtk", ev.state, ev.adjoint)
        snapshots[:] = [(rec.iteration, ev)]

    try:
        result = optimize(spec.config, mesh, on_iteration=on_iteration)
    except (SolverError, MeshError) as exc:
        (out / "ERROR").write_text(f"{type(exc).__name__}: {exc}\n")
        log.error("%s: %s", spec.name, exc)
        return EXIT_SOLVER
    if result.records and result.records[0].accepted and snapshots:
        it, ev = snapshots[-1]
        export_vtk(vtk_dir / f"final_{it:04d}.vtk", ev.state, ev.adjoint)
    write_iterations(out / "iterations.csv", result.records)
    write_polylines(out / "polylines.csv", result.records)
    if result.accepted:
        write_polyline(out / "final_polyline.csv", result.accepted[-1].polyline)
        summary = summarize(spec, result)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        acc = result.accepted
        key = "lagrangian" if spec.config.algorithm == "aL" else "objective"
        svg_trend(out / "objective.svg", {key: [getattr(r.breakdown, key) for r in acc]},
                  f"{spec.name}: normalized {key}", f"{key} / initial")
        svg_trend(out / "volume.svg", {"volume": [r.breakdown.volume for r in acc]},
                  f"{spec.name}: normalized volume", "volume / initial")
    if result.error:
        (out / "ERROR").write_text(result.error + "\n")
        log.error("%s: solver failure: %s", spec.name, result.error)
        return EXIT_SOLVER
    log.info("%s: %s after %d iterations", spec.name, result.stop_reason, len(result.accepted) - 1)
    return EXIT_OK


def _sweep_entry(args):
    spec, k = args
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    return k, run_experiment(spec)


def run_sweep(spec: ExperimentSpec, jobs: int = 1) -> int:
    if not spec.sweep:
        raise ConfigError("sweep needs a [sweep] section with configurations")
    entries = []
    for k, alpha, g1, g2 in spec.sweep:
        cfg = replace(spec.config, alpha=alpha, gamma1=g1, gamma2=g2)
        entries.append((replace(spec, name=f"{spec.name}_config{k:02d}", config=cfg, sweep=[],
                                out_dir=spec.out_dir / f"config_{k:02d}"), k))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            codes = dict(pool.map(_sweep_entry, entries))
    else:
        codes = dict(_sweep_entry(e) for e in entries)
    names = sorted(spec.compare)
    with open(spec.out_dir / "hausdorff_trend.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header([("configuration", "1"), ("alpha", "energy/length"), ("gamma1", "1"), ("gamma2", "1")]
                           + [(f"hausdorff_{n}", "length") for n in names]))
        for (k, alpha, g1, g2), (sub, _) in zip(spec.sweep, entries):
            final = sub.out_dir / "final_polyline.csv"
            row = [k, alpha, g1, g2]
            for n in names:
                row.append(f"{hausdorff_distance(read_polyline(final), read_polyline(spec.compare[n])):.12g}"
                           if final.exists() else "nan")
            w.writerow(row)
    return EXIT_SOLVER if any(c != EXIT_OK for c in codes.values()) else EXIT_OK


# ---------------------------------------------------------------- validate

def validate(quick: bool = False) -> list[tuple[str, bool, str]]:
    """Run the built-in oracles; returns (name, passed, detail) triples."""
    from . import verification as V
    from .descent import solve_deformation
    from .fem import build_dofmap, divergence_matrix, interpolate
    from .functionals import ObjectiveParams
    from .mesh import build_channel_mesh
    from .shapegrad import evaluate_gradient, validate_shape_derivative

    checks = []

    def add(name, ok, detail):
        checks.append((name, bool(ok), detail))

    eu, ep = V.poiseuille_errors()
    add("poiseuille exactness", max(eu, ep) <= 1e-8, f"max velocity error {eu:.2e}, pressure error {ep:.2e}")
    rep = V.mms_convergence((4, 8, 16) if quick else (4, 8, 16, 32))
    vo, po = rep.velocity_orders[-1], rep.pressure_orders[-1]
    add("manufactured solution orders", abs(vo - 2) <= 0.3 and abs(po - 2) <= 0.3,
        f"H1 velocity order {vo:.3f}, L2 pressure order {po:.3f}")
    herr = max(V.h_table_errors())
    add("h table", herr == 0.0, f"max |h(t) - table| = {herr:.1e}; h(2) = 1.6")
    derr = max(V.h_derivative_errors())
    add("h derivatives vs central differences", derr <= 1e-6, f"max relative mismatch {derr:.2e}")

    geo = ChannelGeometry()
    mesh = build_channel_mesh(geo, 1 / 50, 1 / 30)
    dm = build_dofmap(mesh)
    params = ObjectiveParams(gamma1=1.0, gamma2=0.0, alpha=5.0)
    theta = interpolate(dm, V.deformation_fields(geo.obstacle_center)["radial"])
    r = validate_shape_derivative(mesh, params, theta, [1e-4], order_steps=None if quick else [4e-2, 2e-2, 1e-2])
    detail = f"relative error {r.rel_error[0]:.2e}"
    ok = r.rel_error[0] <= 0.02
    if not quick:
        detail += f", observed FD order {r.observed_order:.2f}"
        ok = ok and r.observed_order >= 1.8
    add("shape derivative vs central differences", ok, detail)

    ev = evaluate_gradient(mesh, params)
    th = solve_deformation(mesh, ev.grad, 0.05, 1, dm)
    div = float(np.max(np.abs(divergence_matrix(dm) @ th.coefficients)))
    add("divergence-free deformation", div <= 1e-10, f"max |b(theta, psi_j)| = {div:.2e}")
    return checks


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vortopt", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--out")
        p.add_argument("--max-iter", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--seed", type=int)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("validate")
    p.add_argument("--quick", action="store_true", help="coarser checks, no FD order estimate")
    p = sub.add_parser("hausdorff")
    p.add_argument("a")
    p.add_argument("b")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("run", "sweep") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command in ("run", "sweep"):
            spec = parse_config(args.config, {"max_iter": args.max_iter, "tol": args.tol, "seed": args.seed})
            if args.out:
                spec.out_dir = Path(args.out)
            if args.command == "run":
                return run_experiment(spec)
            return run_sweep(spec, args.jobs)
        if args.command == "validate":
            checks = validate(args.quick)
            for name, ok, detail in checks:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_VALIDATION
        if args.command == "hausdorff":
            d = hausdorff_distance(read_polyline(args.a), read_polyline(args.b))
            print(f"{d:.12g}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, MeshError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_SOLVER
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
