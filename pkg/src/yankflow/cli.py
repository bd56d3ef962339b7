"""Command-line pipeline: template generation, forward simulation, inversion,
and sensitivity sweeps.

Every command reads one JSON config document (flags override file values),
writes its outputs under --out, and drops a manifest echoing the full
effective config so a run is reproducible from its manifest alone.  Exit
codes: 0 success, 1 numerical failure, 2 usage/IO error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from .dynamics import (
    FlowBreakdownError,
    SolverConfig,
    export_trajectory_csv,
    forward_flow,
)
from .elasticity import ElasticParams
from .inverse import OptimizerConfig, solve_free, solve_parametric
from .kernel import FactorizationError, KernelConfig, ValidationError
from .mesh import LayeredMesh, MeshConstructionError, load_mesh, save_mesh
from .templates import make_template
from .varifold import VarifoldConfig, layer_surface, load_surface, save_surface
from .yank import FreeYank, PotentialParams, load_control, save_control

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

DEFAULT_CONFIG = {
    "template": {"name": "sine", "n": 60, "layers": 5},
    "mesh": None,
    "kernel": {"sigma": 0.2, "jitter": 1e-10},
    "elastic": {"model": "isotropic", "lam": 0.0, "mu": 0.5, "beta": 1.0},
    "solver": {"omega": 0.1, "n_steps": 10, "T": 1.0},
    "varifold": {"tau": 0.3},
    "optimizer": {
        "max_iters": 500, "grad_tol": 1e-8, "wolfe_c1": 1e-4, "wolfe_c2": 0.9,
        "lbfgs_memory": 10, "n_starts": 8, "theta_box": None, "rng_seed": 0,
        "n_workers": 1,
    },
    "mode": "parametric",
    "control": None,
    "radius": 0.25,
    "targets": {},
    "extract_layers": [],
    "svg": True,
    "sweep": {"parameter": "radius", "values": []},
}


class UsageError(Exception):
    pass


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc


def effective_config(args):
    cfg = _deep_merge(DEFAULT_CONFIG, load_config(getattr(args, "config", None)))
    if getattr(args, "template", None):
        cfg["template"]["name"] = args.template
    if getattr(args, "n", None):
        cfg["template"]["n"] = args.n
    if getattr(args, "layers", None):
        cfg["template"]["layers"] = args.layers
    if getattr(args, "mesh", None):
        cfg["mesh"] = args.mesh
    if getattr(args, "omega", None):
        cfg["solver"]["omega"] = args.omega
    if getattr(args, "steps", None):
        cfg["solver"]["n_steps"] = args.steps
    if getattr(args, "mode", None):
        cfg["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        cfg["optimizer"]["rng_seed"] = args.seed
    if getattr(args, "workers", None):
        cfg["optimizer"]["n_workers"] = args.workers
    if getattr(args, "control", None):
        cfg["control"] = args.control
    if getattr(args, "target", None):
        cfg["targets"] = {}
        for item in args.target:
            layer, _, path = item.partition("=")
            if not path:
                raise UsageError("--target expects LAYER=FILE")
            cfg["targets"][layer] = path
    if getattr(args, "extract_layers", None):
        cfg["extract_layers"] = [int(s) for s in args.extract_layers.split(",") if s]
    return cfg


def _build_objects(cfg):
    kernel = KernelConfig(**cfg["kernel"])
    elastic = ElasticParams(**cfg["elastic"])
    solver = SolverConfig(kernel=kernel, **cfg["solver"])
    varifold = VarifoldConfig(**cfg["varifold"])
    opt_fields = dict(cfg["optimizer"])
    if opt_fields.get("theta_box") is not None:
        opt_fields["theta_box"] = np.asarray(opt_fields["theta_box"], dtype=float)
    optimizer = OptimizerConfig(**opt_fields)
    return kernel, elastic, solver, varifold, optimizer


def _resolve_mesh(cfg) -> LayeredMesh:
    if cfg.get("mesh"):
        if not os.path.exists(cfg["mesh"]):
            raise UsageError(f"mesh file not found: {cfg['mesh']}")
        return load_mesh(cfg["mesh"])
    tpl = dict(cfg["template"])
    name = tpl.pop("name")
    return make_template(name, **tpl)


def _resolve_control(cfg, mesh, solver):
    entry = cfg.get("control")
    if entry is None:
        return FreeYank.zeros(solver.n_steps, mesh.n_simplices, mesh.d)
    if isinstance(entry, str):
        if not os.path.exists(entry):
            raise UsageError(f"control file not found: {entry}")
        return load_control(entry)
    kind = entry.get("type")
    if kind == "potential":
        return PotentialParams(c=np.asarray(entry["c"], dtype=float),
                               h=float(entry["h"]), r=float(entry["r"]))
    if kind == "free":
        if entry.get("zeros"):
            return FreeYank.zeros(solver.n_steps, mesh.n_simplices, mesh.d)
        return FreeYank(np.asarray(entry["coefficients"], dtype=float))
    raise UsageError(f"unknown inline control type {kind!r}")


def _resolve_targets(cfg, mesh):
    targets = {}
    for key, path in cfg.get("targets", {}).items():
        if not os.path.exists(path):
            raise UsageError(f"target file not found: {path}")
        targets[int(key)] = load_surface(path)
    return targets


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

class OutputDir:
    """Output directory with a lockfile guarding concurrent writes."""

    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.lock = os.path.join(path, ".yankflow.lock")
        try:
            self.fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise UsageError(
                f"output directory {path} is locked by another run "
                f"(remove {self.lock} if stale)"
            ) from exc

    def file(self, name):
        return os.path.join(self.path, name)

    def release(self):
        try:
            os.close(self.fd)
            os.remove(self.lock)
        except OSError:
            pass


def write_manifest(out: OutputDir, command, cfg, outputs, extra=None):
    doc = {"command": command, "effective_config": cfg, "outputs": sorted(outputs)}
    if extra:
        doc.update(extra)
    with open(out.file("manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_svg(path, polylines, stroke_width=0.01):
    """Minimal SVG with one path per polyline (y flipped to screen coords)."""
    pts = np.concatenate(polylines, axis=0)
    lo = pts.min(axis=0) - 0.05
    hi = pts.max(axis=0) + 0.05
    width, height = hi - lo
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width:.4f} {height:.4f}" '
        f'width="640" height="{640 * height / width:.0f}">'
    ]
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    for i, line in enumerate(polylines):
        coords = " ".join(
            f"{x - lo[0]:.5f},{hi[1] - y:.5f}" for x, y in line
        )
        parts.append(
            f'<polyline points="{coords}" fill="none" '
            f'stroke="{colors[i % len(colors)]}" stroke-width="{stroke_width}"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def _emit_frames(out: OutputDir, mesh, traj, cfg):
    names = []
    frame_dir = out.file("frames")
    os.makedirs(frame_dir, exist_ok=True)
    for k in range(len(traj.velocities)):
        q = traj.states[k]
        lines = [q[mesh.layer_vertex_indices(layer)] for layer in range(mesh.layers)]
        name = os.path.join("frames", f"frame_{k:03d}.svg")
        write_svg(os.path.join(frame_dir, f"frame_{k:03d}.svg"), lines)
        names.append(name)
    return names


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_mesh_gen(args):
    cfg = effective_config(args)
    mesh = _resolve_mesh(cfg)
    out = OutputDir(args.out)
    try:
        save_mesh(mesh, out.file("mesh.json"))
        write_manifest(out, "mesh-gen", cfg, ["mesh.json"])
    finally:
        out.release()
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_simplices} simplices, "
          f"{mesh.layers} layers x {mesh.points_per_layer} points")
    return EXIT_OK


def cmd_simulate(args):
    cfg = effective_config(args)
    mesh = _resolve_mesh(cfg)
    _, elastic, solver, _, _ = _build_objects(cfg)
    control = _resolve_control(cfg, mesh, solver)
    out = OutputDir(args.out)
    outputs = []
    try:
        traj = forward_flow(mesh, mesh.vertices, control, elastic, solver)
        export_trajectory_csv(traj, out.file("trajectory.csv"))
        outputs.append("trajectory.csv")
        if cfg.get("svg") and mesh.d == 2:
            outputs.extend(_emit_frames(out, mesh, traj, cfg))
        for layer in cfg.get("extract_layers", []):
            surf = layer_surface(mesh, traj.final, layer)
            name = f"target_layer_{layer}.json"
            save_surface(surf, out.file(name))
            outputs.append(name)
        write_manifest(out, "simulate", cfg, outputs,
                       extra={"n_steps": solver.n_steps})
    finally:
        out.release()
    print(f"simulated {solver.n_steps} steps; final max displacement "
          f"{float(np.abs(traj.final - mesh.vertices).max()):.6g}")
    return EXIT_OK


def cmd_invert(args):
    cfg = effective_config(args)
    mesh = _resolve_mesh(cfg)
    _, elastic, solver, varifold, optimizer = _build_objects(cfg)
    targets = _resolve_targets(cfg, mesh)
    if not targets:
        raise UsageError("invert requires at least one target (--target LAYER=FILE)")
    out = OutputDir(args.out)
    try:
        outputs = ["report.json", "recovered_control.json"]
        if cfg["mode"] == "parametric":
            if optimizer.theta_box is None:
                raise UsageError("parametric inversion requires optimizer.theta_box")
            result = solve_parametric(mesh, targets, elastic, solver, varifold,
                                      optimizer, radius=cfg["radius"])
            report = {
                "per_start": [
                    {
                        "theta0": s.theta0.tolist(),
                        "theta_star": s.theta_star.tolist(),
                        "f_star": s.f_star,
                        "iters": s.iters,
                        "status": s.status,
                    }
                    for s in result.starts
                ],
                "best_index": result.best_index,
                "config_echo": cfg,
            }
            control = PotentialParams.from_theta(result.theta_star, cfg["radius"])
            trace = result.starts[result.best_index].trace
            summary = (f"parametric: theta*={np.round(result.theta_star, 6).tolist()} "
                       f"f*={result.f_star:.6e}")
        elif cfg["mode"] == "free":
            control, f_star, res = solve_free(mesh, targets, elastic, solver,
                                              varifold, optimizer)
            report = {
                "per_start": [{
                    "theta0": None,
                    "f_star": f_star,
                    "iters": res.iters,
                    "status": res.status,
                }],
                "best_index": 0,
                "config_echo": cfg,
            }
            trace = res.trace
            summary = f"free yank: f*={f_star:.6e} after {res.iters} iterations ({res.status})"
        else:
            raise UsageError(f"unknown mode {cfg['mode']!r}")
        with open(out.file("report.json"), "w") as fh:
            json.dump(report, fh, indent=2, default=_json_default)
            fh.write("\n")
        save_control(control, out.file("recovered_control.json"))
        write_manifest(out, "invert", cfg, outputs, extra={"objective_trace": trace})
    finally:
        out.release()
    print(summary)
    return EXIT_OK


def fit_loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    lx = lx - lx.mean()
    return float(np.dot(lx, ly - ly.mean()) / np.dot(lx, lx))


def cmd_sensitivity(args):
    cfg = effective_config(args)
    mesh = _resolve_mesh(cfg)
    _, elastic, solver, varifold, optimizer = _build_objects(cfg)
    targets = _resolve_targets(cfg, mesh)
    if not targets:
        raise UsageError("sensitivity requires targets (--target LAYER=FILE)")
    sweep = cfg["sweep"]
    parameter = sweep.get("parameter", "radius")
    values = sweep.get("values") or []
    if not values:
        raise UsageError("sensitivity requires sweep.values")
    out = OutputDir(args.out)
    rows = []
    warm = None
    try:
        with open(out.file("sensitivity.csv"), "w") as fh:
            fh.write("value,theta_cx,theta_cy,theta_h,f_star,status\n")
            fh.flush()
            for value in values:
                elastic_pt = elastic
                radius_pt = cfg["radius"]
                if parameter == "radius":
                    radius_pt = float(value)
                else:
                    fields = {f: getattr(elastic, f) for f in
                              ("model", "lam", "mu", "lambda_tan", "mu_tan",
                               "mu_tsv", "mu_ang", "beta")}
                    if parameter not in fields:
                        raise UsageError(f"cannot sweep parameter {parameter!r}")
                    fields[parameter] = float(value)
                    elastic_pt = ElasticParams(**fields)
                try:
                    # continuation: the previous sweep point's minimizer joins
                    # the fresh Latin hypercube starts
                    extra = [warm] if warm is not None else []
                    result = solve_parametric(mesh, targets, elastic_pt, solver,
                                              varifold, optimizer, radius=radius_pt,
                                              extra_starts=extra)
                    theta = result.theta_star
                    warm = theta
                    row = (float(value), theta[0], theta[1], theta[2],
                           result.f_star, "ok")
                except (FlowBreakdownError, FactorizationError) as exc:
                    row = (float(value), np.nan, np.nan, np.nan, np.nan,
                           f"failed:{type(exc).__name__}")
                rows.append(row)
                fh.write(",".join(repr(c) if isinstance(c, float) else str(c)
                                  for c in row) + "\n")
                fh.flush()
        extra = {"rows": rows}
        good = [r for r in rows if r[5] == "ok"]
        if parameter == "radius" and len(good) >= 2:
            slope = fit_loglog_slope([r[0] for r in good], [r[3] for r in good])
            extra["loglog_slope_h_vs_radius"] = slope
            print(f"fitted log-log slope of h* vs radius: {slope:.4f}")
        write_manifest(out, "sensitivity", cfg, ["sensitivity.csv"], extra=extra)
    finally:
        out.release()
    print(f"sensitivity sweep over {parameter}: {len(rows)} points "
          f"({sum(1 for r in rows if r[5] == 'ok')} ok)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="yankflow",
        description="Elastic-equilibrium shape flows driven by a yank: "
                    "simulation and inverse problems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override optimizer rng seed")

    p_gen = sub.add_parser("mesh-gen", help="generate a layered template mesh")
    common(p_gen)
    p_gen.add_argument("--template", help="generator name (sine, mixsin, flat, flatbox)")
    p_gen.add_argument("--n", type=int, help="points per layer")
    p_gen.add_argument("--layers", type=int, help="layer count")

    p_sim = sub.add_parser("simulate", help="run the forward flow")
    common(p_sim)
    p_sim.add_argument("--template", help="generator name")
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--layers", type=int)
    p_sim.add_argument("--mesh", help="mesh file (overrides template)")
    p_sim.add_argument("--control", help="control file")
    p_sim.add_argument("--omega", type=float)
    p_sim.add_argument("--steps", type=int)
    p_sim.add_argument("--extract-layers", dest="extract_layers",
                       help="comma-separated layer indices to export at t=T")

    p_inv = sub.add_parser("invert", help="solve an inverse problem")
    common(p_inv)
    p_inv.add_argument("--template")
    p_inv.add_argument("--n", type=int)
    p_inv.add_argument("--layers", type=int)
    p_inv.add_argument("--mesh")
    p_inv.add_argument("--mode", choices=["free", "parametric"])
    p_inv.add_argument("--omega", type=float)
    p_inv.add_argument("--steps", type=int)
    p_inv.add_argument("--workers", type=int)
    p_inv.add_argument("--target", action="append",
                       help="LAYER=FILE target surface (repeatable)")

    p_sens = sub.add_parser("sensitivity", help="sweep a parameter, re-solving the inverse")
    common(p_sens)
    p_sens.add_argument("--template")
    p_sens.add_argument("--n", type=int)
    p_sens.add_argument("--layers", type=int)
    p_sens.add_argument("--mesh")
    p_sens.add_argument("--omega", type=float)
    p_sens.add_argument("--steps", type=int)
    p_sens.add_argument("--workers", type=int)
    p_sens.add_argument("--target", action="append")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "mesh-gen": cmd_mesh_gen,
        "simulate": cmd_simulate,
        "invert": cmd_invert,
        "sensitivity": cmd_sensitivity,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, MeshConstructionError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FlowBreakdownError, FactorizationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
