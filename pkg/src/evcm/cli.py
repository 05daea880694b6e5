"""Command-line entry point: ``evcm <subcommand> [options]``.

Exit codes: 0 success, 1 domain error (bad data, failed check, divergence),
2 usage error (unknown flag, missing or malformed argument).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BackendDisagreementError, run_bench
from .control import ControllerParams, Scene, corridor_scene, navsim
from .core import (
    CameraIntrinsics, EventFileError, read_depth, read_events, write_csv, write_depth, write_events,
    write_flow,
)
from .gradcheck import check_flow_gradient, check_predictor_gradient, random_instance, random_predictor_instance
from .metrics import EmptySelectionError, evaluate
from .optimize import (
    LOG_COLUMNS, DivergenceError, GradientCheckError, OptimizerConfig, optimize_depth, optimize_flow_only,
)
from .synth import SceneSpec, generate
from .warp import BACKENDS, get_backend

FLOW_TOL = 1e-4
PREDICTOR_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _parse_config(factory, data, what, keys):
    """Build a config object; schema problems are usage errors with the accepted keys listed."""
    try:
        return factory(data)
    except (ValueError, TypeError, KeyError, AttributeError) as exc:
        raise UsageError(f"invalid {what} config: {exc}\naccepted keys: {', '.join(sorted(keys))}") from None


def _counts(text):
    try:
        values = [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("need at least one count")
    return values


def _backend(args):
    if args.backend == "parallel":
        return get_backend("parallel", workers=args.threads)
    return get_backend(args.backend)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_log(log, out: Path):
    """Train log without wall time (kept byte-stable); wall time goes to timing.csv."""
    stable = [c for c in LOG_COLUMNS if c != "wall_time_s"]
    write_csv(out / "train_log.csv", log.rows, stable)
    write_csv(out / "timing.csv", log.rows, ("update", "wall_time_s"))


# --- subcommands ------------------------------------------------------------------


def cmd_synth(args):
    spec = _parse_config(SceneSpec.from_dict, _read_json(args.spec, "scene"), "scene", SceneSpec._KEYS)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    events, depth, flows = generate(spec)
    out = _out_dir(args)
    write_events(events, out / "events.evt1")
    write_depth(out / "depth.pfm", depth)
    write_flow(out / "flow", flows)
    spec.save(out / "scene.json")
    print(f"{len(events)} events, {spec.bins} bins -> {out}")
    return 0


def _load_intrinsics(args, width, height):
    if args.scene:
        data = _read_json(args.scene, "scene")
        return _parse_config(SceneSpec.from_dict, data, "scene", SceneSpec._KEYS).intrinsics
    if args.intrinsics:
        try:
            fx, fy, cx, cy = (float(v) for v in args.intrinsics.split(","))
        except ValueError:
            raise UsageError("--intrinsics expects fx,fy,cx,cy") from None
        return CameraIntrinsics(fx, fy, cx, cy)
    raise UsageError("depth mode needs --scene or --intrinsics")


def cmd_optimize(args):
    cfg = OptimizerConfig()
    if args.config:
        keys = {f.name for f in fields(OptimizerConfig)} | {"preset"}
        cfg = _parse_config(OptimizerConfig.from_dict, _read_json(args.config, "optimizer"), "optimizer", keys)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend_given:
        overrides["backend"] = args.backend
    cfg = replace(cfg, **overrides)
    backend = _backend(argparse.Namespace(backend=cfg.backend, threads=args.threads))
    events = read_events(args.events, args.t_start, args.t_end)
    if len(events) == 0:
        raise ValueError(f"{args.events} holds no events in the requested window")
    run_cfg = replace(cfg, backend=backend)
    out = _out_dir(args)
    if args.mode == "flow":
        flows, log = optimize_flow_only(events, cfg.bins, run_cfg, return_log=True)
        write_flow(out / "flow", flows)
    else:
        k = _load_intrinsics(args, events.width, events.height)
        k.check_sensor(events.width, events.height)
        pred, log = optimize_depth(events, k, run_cfg, return_log=True)
        depth, _ = pred.decode()
        write_depth(out / "depth.pfm", depth)
        pred.save(out / "predictor")
    _write_log(log, out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    print(f"{args.mode}: {len(log)} updates -> {out}")
    return 0


def cmd_eval(args):
    pred = read_depth(args.pred)
    gt = read_depth(args.gt)
    events = read_events(args.events) if args.events else None
    align = None if args.align == "none" else args.align
    report = evaluate(pred, gt, tuple(args.cutoffs), events, align, args.focal, args.baseline)
    out = _out_dir(args)
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    for row in report.rows:
        if np.isinf(row["cutoff"]):
            print(f"{row['mode']}: mae={row['mae']:.4f} abs_rel={row['abs_rel']:.4f} scale={row['scale']:.4f}")
    return 0


def cmd_bench(args):
    report = run_bench(args.counts, args.padding, args.reps, budget_s=args.budget,
                       seed=0 if args.seed is None else args.seed, workers=args.threads)
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    for n in report.counts:
        print(f"n={n}: speedup parallel/naive {report.speedup(n):.1f}x, peak parallel "
              f"{report.peak_bytes('parallel', n)} B vs padded {report.peak_bytes('padded', n)} B")
    return 0


def cmd_navsim(args):
    params = ControllerParams()
    if args.params:
        keys = {f.name for f in fields(ControllerParams)}
        params = _parse_config(ControllerParams.from_dict, _read_json(args.params, "controller"), "controller", keys)
    if args.zero_gain:
        params = params.zero_gain()
    out = _out_dir(args)
    base = 0 if args.seed is None else args.seed
    rows = []
    for seed in range(base, base + args.seeds):
        if args.scene == "corridor":
            scene = corridor_scene(seed)
        else:
            scene = Scene.from_pgm(args.scene, args.resolution, tuple(args.start), args.heading)
        result = navsim(scene, params, args.speed, args.steps, depth_noise=args.noise, seed=seed)
        result.to_csv(out / f"trajectory_{seed:03d}.csv")
        rows.append({"seed": seed, "interventions": result.interventions,
                     "total_distance": result.total_distance,
                     "mean_distance_between": result.mean_distance_between,
                     "distances": " ".join(f"{d:.6g}" for d in result.distances)})
    write_csv(out / "summary.csv", rows)
    mean = float(np.mean([r["mean_distance_between"] for r in rows]))
    print(f"{args.seeds} runs, mean distance between interventions {mean:.3f} m")
    return 0


def cmd_gradcheck(args):
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    backend = _backend(args)
    flow_err = max(check_flow_gradient(random_instance(rng), backend) for _ in range(args.instances))
    pred_err = max(check_predictor_gradient(*random_predictor_instance(rng), backend=backend)
                   for _ in range(args.predictor_instances))
    ok = flow_err < FLOW_TOL and pred_err < PREDICTOR_TOL
    print(f"{'PASS' if ok else 'FAIL'} gradcheck max_rel_err flow={flow_err:.3e} (< {FLOW_TOL:g}) "
          f"predictor={pred_err:.3e} (< {PREDICTOR_TOL:g})")
    return 0 if ok else 1


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config or 0)")
    common.add_argument("--threads", type=int, default=None, help="parallel backend workers (default: all cores)")
    common.add_argument("--backend", choices=sorted(BACKENDS), default=None)
    common.add_argument("--out", default=".", help="output directory (bench also accepts a .csv path)")

    parser = _Parser(prog="evcm", description="Contrast-maximization toolkit for event cameras.")
    parser.add_argument("--version", action="version", version=f"evcm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--spec", required=True, help="scene JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", parents=[common], help="recover flow or depth from events")
    p.add_argument("--events", required=True, help="EVT1 file")
    p.add_argument("--config", help="optimizer JSON")
    p.add_argument("--mode", choices=("flow", "depth"), default="flow")
    p.add_argument("--scene", help="scene JSON to take intrinsics from (depth mode)")
    p.add_argument("--intrinsics", help="fx,fy,cx,cy (depth mode)")
    p.add_argument("--t-start", type=int, default=None)
    p.add_argument("--t-end", type=int, default=None)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", parents=[common], help="score a depth map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--events", help="EVT1 file for event-masked metrics")
    p.add_argument("--align", choices=("approx", "best", "none"), default="approx")
    p.add_argument("--cutoffs", type=float, nargs="+", default=[10.0, 20.0, 30.0])
    p.add_argument("--focal", type=float)
    p.add_argument("--baseline", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="benchmark the warp backends")
    p.add_argument("--counts", type=_counts, default=[100, 1000, 10_000, 100_000])
    p.add_argument("--padding", type=float, default=0.10)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--budget", type=float, default=10.0, help="seconds of timed runs per backend and count")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("navsim", parents=[common], help="closed-loop avoidance simulation")
    p.add_argument("--scene", default="corridor", help="'corridor' or a PGM occupancy map")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--params", help="controller JSON")
    p.add_argument("--zero-gain", action="store_true")
    p.add_argument("--noise", type=float, default=0.0, help="depth scale noise fraction")
    p.add_argument("--speed", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--resolution", type=float, default=0.1, help="PGM metres per cell")
    p.add_argument("--start", type=float, nargs=2, default=[1.0, 1.0])
    p.add_argument("--heading", type=float, default=0.0)
    p.set_defaults(func=cmd_navsim)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--predictor-instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


DOMAIN_ERRORS = (ValueError, EventFileError, EmptySelectionError, DivergenceError, GradientCheckError,
                 BackendDisagreementError, FileNotFoundError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.backend_given = args.backend is not None
        if args.backend is None:
            args.backend = "parallel"
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except DOMAIN_ERRORS as exc:
        print(f"evcm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
