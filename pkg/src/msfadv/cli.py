"""``msfadv`` command line: scenarios, rendering, attacks, baselines, defenses, printability.

Exit codes: 0 success, 1 error (message on stderr), 2 completed without success.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from importlib import resources

import numpy as np

from . import __version__

EXIT_OK, EXIT_ERROR, EXIT_UNSUCCESSFUL = 0, 1, 2
WEIGHTS_FILE = "surrogate.txt"


class CliError(Exception):
    pass


def _data_path(name: str) -> str:
    return str(resources.files("msfadv").joinpath("data", name))


def _load_scenario(path):
    from .scenario import load_bundle

    return load_bundle(path)


def _load_mesh(path):
    from .geometry import load_obj

    if not os.path.isfile(path):
        raise CliError(f"mesh not found: {path}")
    return load_obj(path)


def _load_weights(args):
    from .surrogates import load_weights

    if getattr(args, "weights", None):
        return load_weights(args.weights)
    local = os.path.join(args.scenario, WEIGHTS_FILE)
    return load_weights(local if os.path.isfile(local) else _data_path(WEIGHTS_FILE))


def _load_config(args):
    from .attack import AttackConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else AttackConfig()
    if getattr(args, "max_iters", None) is not None:
        cfg = cfg.replace(max_iters=args.max_iters)
    return cfg


def _write_json(obj, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _info(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_scenario(args) -> int:
    from .geometry import save_obj
    from .pipeline import calibrate
    from .scenario import default_object, make_scenario, save_bundle
    from .surrogates import save_weights

    scn = make_scenario(args.seed)
    save_bundle(scn, args.out)
    cone = default_object()
    save_obj(cone, os.path.join(args.out, "cone.obj"))
    if not args.no_calibrate:
        save_weights(calibrate(cone, scn), os.path.join(args.out, WEIGHTS_FILE))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .pipeline import calibrate
    from .surrogates import save_weights

    scn = _load_scenario(args.scenario)
    mesh = _load_mesh(args.mesh)
    save_weights(calibrate(mesh, scn), args.out or os.path.join(args.scenario, WEIGHTS_FILE))
    return EXIT_OK


def cmd_attack(args) -> int:
    from .attack import run_attack
    from .geometry import save_obj

    scn = _load_scenario(args.scenario)
    mesh = _load_mesh(args.mesh)
    cfg = _load_config(args)
    weights = _load_weights(args)
    adv, report = run_attack(mesh, scn, cfg, weights, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_obj(adv, os.path.join(args.out, "adv.obj"))
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.out, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(report.objective):
            w.writerow([i, repr(v)])
    _info(f"iterations={report.iterations} success={report.success} wall_time={report.wall_time:.1f}s")
    return EXIT_OK if report.success else EXIT_UNSUCCESSFUL


def cmd_render(args) -> int:
    from .pipeline import SensingOptions
    from .scenario import default_object, place
    from .sensor_sim import render_camera, render_lidar, write_bin, write_ppm, quantize_image, SensorImage
    from .soft_features import bev_aggregate, derive_features, dump_features, roi_filter
    from .surrogates import detection_region

    scn = _load_scenario(args.scenario)
    mesh = _load_mesh(args.mesh)
    posed = mesh.with_vertices(place(mesh.vertices, scn.placement, scn.ground_z)) if not mesh.is_empty() else mesh
    opts = SensingOptions()
    cloud = render_lidar(posed, scn.background, scn.spec, scn.ray_table)
    image = render_camera(posed, scn.image, scn.calib, opts.albedo, opts.blur_sigma)
    if image is not scn.image:
        image = SensorImage(quantize_image(image.data))
    ref = mesh if not mesh.is_empty() else default_object()
    region = detection_region(place(ref.vertices, scn.placement, scn.ground_z), scn.ground_z,
                              scn.calib, scn.image.data.shape)
    pts = roi_filter(cloud.points, region.roi_lo, region.roi_hi)
    bev = bev_aggregate(derive_features(pts, region.grid, opts.mu, opts.eps_div), opts.eps_div)
    os.makedirs(args.out, exist_ok=True)
    write_bin(cloud, os.path.join(args.out, "pc_adv.bin"))
    write_ppm(image, os.path.join(args.out, "image_adv.ppm"))
    dump_features(bev, os.path.join(args.out, "features.txt"))
    return EXIT_OK


def _read_poses(path):
    from .scenario import ObjectPose

    if not os.path.isfile(path):
        raise CliError(f"poses file not found: {path}")
    poses = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].replace(",", " ").split()
            if not line:
                continue
            if len(line) not in (1, 2, 3):
                raise CliError(f"{path}:{lineno}: expected 'x [y [yaw_deg]]'")
            try:
                vals = [float(x) for x in line] + [0.0] * (3 - len(line))
            except ValueError:
                raise CliError(f"{path}:{lineno}: not a number") from None
            poses.append(ObjectPose(vals[0], vals[1], math.radians(vals[2])))
    if not poses:
        raise CliError(f"no poses in {path}")
    return poses


def cmd_evaluate(args) -> int:
    from .attack import AttackConfig
    from .pipeline import region_for, sense

    scn = _load_scenario(args.scenario)
    mesh = _load_mesh(args.mesh)
    benign = _load_mesh(args.benign) if args.benign else mesh
    if benign.vertices.shape != mesh.vertices.shape:
        raise CliError("--benign mesh must share the evaluated mesh's topology")
    weights = _load_weights(args)
    poses = _read_poses(args.poses)
    cfg = AttackConfig()
    print("x,y,yaw_deg,conf_lidar,conf_camera,detected")
    hits = 0
    for p in poses:
        if not (cfg.x_range[0] <= p.x <= cfg.x_range[1] and cfg.y_range[0] <= p.y <= cfg.y_range[1]):
            warnings.warn(f"pose ({p.x}, {p.y}) is outside the sampling ranges; evaluating anyway")
        s = sense(mesh.vertices, mesh.faces, scn, p, region_for(benign.vertices, scn, p), weights)
        cl, cc = s.confidences()
        det = s.detected(weights)
        hits += det
        print(f"{p.x!r},{p.y!r},{math.degrees(p.yaw)!r},{cl!r},{cc!r},{int(det)}")
    print(f"# detection_rate={hits / len(poses)!r} attack_success_rate={1 - hits / len(poses)!r}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .attack import objective
    from .baselines import GaConfig, ga_attack, gn_attack
    from .geometry import save_obj

    mesh = _load_mesh(args.mesh)
    os.makedirs(args.out, exist_ok=True)
    if args.method == "gn":
        adv = gn_attack(mesh, args.sigma, args.seed)
        save_obj(adv, os.path.join(args.out, "gn.obj"))
        summary = {"method": "gn", "sigma": args.sigma, "seed": args.seed}
        if args.scenario:
            scn = _load_scenario(args.scenario)
            summary["objective"] = objective(adv, mesh, scn, _load_config(args), _load_weights(args), args.seed)
        _write_json(summary, os.path.join(args.out, "gn.json"))
        return EXIT_OK
    if not args.scenario:
        raise CliError("baseline ga needs --scenario")
    scn = _load_scenario(args.scenario)
    ga = GaConfig(population=args.population, generations=args.generations, bound=args.bound)
    res = ga_attack(mesh, scn, _load_config(args), _load_weights(args), ga, args.seed)
    save_obj(res.mesh, os.path.join(args.out, "ga.obj"))
    res.write_trace(os.path.join(args.out, "ga_trace.csv"))
    _write_json({"method": "ga", "seed": args.seed, "population": ga.population, "generations": ga.generations,
                 "bound": ga.bound, "best_fitness": res.best_fitness}, os.path.join(args.out, "ga.json"))
    return EXIT_OK


def _parse_sweep(text):
    items = [t for t in text.replace(",", " ").split() if t]
    try:
        return [int(t) for t in items]
    except ValueError:
        raise CliError(f"sweep values must be integers: {text!r}") from None


def cmd_defense(args) -> int:
    from .defenses import evaluate_defense, write_sweep

    if args.bits is not None:
        defense, sweep = "bits", [args.bits]
    elif args.kernel is not None:
        defense, sweep = "median", [args.kernel]
    else:
        if not args.defense:
            raise CliError("give --bits, --kernel, or --defense with --sweep")
        defense, sweep = args.defense, _parse_sweep(args.sweep or "")
    if not sweep:
        raise CliError("empty parameter sweep")
    scn = _load_scenario(args.scenario)
    benign = _load_mesh(args.mesh)
    adv = _load_mesh(args.adv) if args.adv else benign
    rows = evaluate_defense(adv, benign, scn, _load_weights(args), defense, sweep, args.modality)
    out = args.out or "-"
    if out == "-":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["parameter", "benign_rate", "attack_rate"])
        for r in rows:
            w.writerow([r.parameter, repr(r.benign_rate), repr(r.attack_rate)])
    else:
        write_sweep(rows, out)
    return EXIT_OK


def cmd_printability(args) -> int:
    from .geometry import (angle_deficits, mean_gaussian_curvature, qecd_simplify, save_obj,
                           self_intersection_ratio, watertightness)

    mesh = _load_mesh(args.mesh)
    if args.decimate:
        res = qecd_simplify(mesh, args.decimate)
        mesh = res.mesh
        if args.out:
            save_obj(mesh, args.out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        curv = mean_gaussian_curvature(mesh)
    report = {
        "faces": int(len(mesh.faces)),
        "watertight": bool(watertightness(mesh)),
        "self_intersection_ratio": float(self_intersection_ratio(mesh)),
        "mean_gaussian_curvature": float(curv.mean),
        "angle_deficit_sum": float(np.sum(angle_deficits(mesh))),
        "curvature_skipped_vertices": int(len(curv.skipped)),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msfadv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"msfadv {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp, mesh=True, weights=True):
        sp.add_argument("--scenario", required=True, help="scenario bundle directory")
        if mesh:
            sp.add_argument("--mesh", required=True, help="OBJ mesh (object frame, base on z=0)")
        if weights:
            sp.add_argument("--weights", help=f"surrogate weights (default: <scenario>/{WEIGHTS_FILE} or shipped)")

    sp = sub.add_parser("make-scenario", help="write the synthetic road scenario bundle")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-calibrate", action="store_true", help="skip fitting surrogate weights")
    sp.set_defaults(func=cmd_make_scenario)

    sp = sub.add_parser("calibrate", help="fit surrogate weights for a scenario and benign mesh")
    scenario_args(sp, weights=False)
    sp.add_argument("--out", help=f"weights path (default <scenario>/{WEIGHTS_FILE})")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("attack", help="run the PGD attack")
    scenario_args(sp)
    sp.add_argument("--config", help="attack config (key = value)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-iters", type=int, dest="max_iters")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("render", help="render a mesh at the scenario placement")
    scenario_args(sp, weights=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("evaluate", help="detection at listed poses")
    scenario_args(sp)
    sp.add_argument("--poses", required=True, help="file of 'x y yaw_deg' lines")
    sp.add_argument("--benign", help="benign mesh fixing the detection region (default: --mesh)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("baseline", help="Gaussian-noise or genetic baseline")
    sp.add_argument("method", choices=("gn", "ga"))
    sp.add_argument("--scenario")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--config")
    sp.add_argument("--max-iters", type=int, dest="max_iters", help=argparse.SUPPRESS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sigma", type=float, default=0.021, help="gn: noise std (m)")
    sp.add_argument("--population", type=int, default=50)
    sp.add_argument("--generations", type=int, default=40)
    sp.add_argument("--bound", type=float, default=0.02, help="ga: per-coordinate bound (m)")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("defense", help="sweep an input-transformation defense")
    scenario_args(sp)
    sp.add_argument("--adv", help="adversarial mesh (default: the benign mesh)")
    sp.add_argument("--defense", choices=("bits", "median"))
    sp.add_argument("--sweep", help="comma-separated parameter values")
    sp.add_argument("--bits", type=int)
    sp.add_argument("--kernel", type=int)
    sp.add_argument("--modality", choices=("image", "lidar", "both"), default="both")
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_defense)

    sp = sub.add_parser("printability", help="watertightness, self-intersection, curvature")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--decimate", type=int, help="simplify to this many faces first")
    sp.add_argument("--out", help="write the simplified mesh here")
    sp.set_defaults(func=cmd_printability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are errors (1), not "completed without success" (2)
        return EXIT_ERROR if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"msfadv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
