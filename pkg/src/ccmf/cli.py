"""Command-line entry point: ``ccmf <command> [options]``.

Exit codes::

    0  success
    2  invalid parameters (bad flag values, impossible geometry)
    3  missing or unreadable input
    4  solver did not converge (best-effort outputs are still written)

Every run writes ``manifest.json`` into ``--out`` with the resolved
parameters, SHA-256 digests of the inputs, the output paths, timing and
exit status.

CSV outputs (all with a header row):

``segment``  ``trace.csv``: iter, r_d, r_p, gap, step per interior-point iteration.
``compare``  ``compare.csv``: method, energy, ctv, dice, iterations, wall_time,
             max_axis_run (longest straight boundary run, 2d only).
``catenoid`` ``catenoid.csv``: z, analytic, ccmf, at_cmf per-slice radii.
``perimeter`` ``perimeter.csv``: kind, size, perimeter, ccmf_energy, gc_cost, iterations.
``karate``   ``karate.csv``: node, truth, nu, label.
``duality-check`` ``strong.csv``: one row per random instance; ``weak.csv``: lhs, rhs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, datasets, experiments, imageio
from .graph import GraphError
from .solver import ConvergenceError, SolverError, preset

EXIT_OK = 0
EXIT_PARAM = 2
EXIT_INPUT = 3
EXIT_CONVERGENCE = 4

log = logging.getLogger("ccmf")


class ParameterError(ValueError):
    pass


class InputError(RuntimeError):
    pass


class CheckFailed(RuntimeError):
    """A verification command ran to completion but some checks failed."""


class _Run:
    """Collects manifest fields while a command runs."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.inputs = {}
        self.outputs = []
        self.extra = {}
        self.config = None
        self.t0 = time.perf_counter()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"input file not found: {p}")
        self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def trace_path(self, command) -> Path:
        if self.args.trace:
            p = Path(self.args.trace)
        elif os.environ.get("CCMF_TRACE_DIR"):
            p = Path(os.environ["CCMF_TRACE_DIR"]) / f"{command}-trace.csv"
        else:
            p = self.out / "trace.csv"
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p))
        return p

    def manifest(self, status: str, code: int):
        params = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "command": self.args.command,
            "version": __version__,
            "parameters": params,
            "preset": getattr(self.args, "preset", None),
            "solver_config": None if self.config is None else {
                k: getattr(self.config, k) for k in self.config.__dataclass_fields__},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time": time.perf_counter() - self.t0,
            "status": status,
            "exit_code": code,
            **self.extra,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _config(args, run, default_preset):
    name = args.preset or default_preset
    try:
        cfg = preset(name, mu=args.mu, max_iters=args.max_iters)
    except (ValueError, TypeError) as exc:
        raise ParameterError(str(exc)) from exc
    run.config = cfg
    return cfg


def _check_common(args):
    if getattr(args, "beta", 0.0) < 0:
        raise ParameterError("--beta must be non-negative")
    thr = getattr(args, "threshold", 0.5)
    if not 0.0 < thr < 1.0:
        raise ParameterError("--threshold must lie strictly between 0 and 1")
    if getattr(args, "parallel", 1) < 1:
        raise ParameterError("--parallel must be at least 1")


def _write_csv(path, rows, header):
    """Rows are dicts keyed by the header or plain sequences in header order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return v


def _load_image_any(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"ccmf-vol"):
        vol = imageio.load_volume(path)
        if vol.dtype == np.uint8:
            return vol.astype(float) / 255.0
        if vol.dtype == np.uint16:
            return vol.astype(float) / 65535.0
        return vol.astype(float)
    return imageio.load_intensity(path)


def _save_mask(run, name, mask):
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim == 3:
        imageio.save_volume(run.path(name + ".vol"), mask)
    else:
        imageio.save_image(run.path(name + ".pgm"), mask * 255)


def _save_field(run, name, field):
    field = np.asarray(field, dtype=float)
    if field.ndim == 3:
        imageio.save_volume(run.path(name + ".vol"), field.astype(np.float32))
    else:
        p = run.path(name + ".pgm")
        imageio.save_field(p, field)
        run.outputs.append(str(p) + ".range")


def _load_inputs(args, run):
    if not args.seed_mask:
        raise InputError("--seed-mask is required")
    image = _load_image_any(run.input(args.image))
    fg, bg = imageio.load_seeds(run.input(args.seed_mask), image.shape)
    return image, fg, bg


# --- commands ---------------------------------------------------------------------

def cmd_segment(args, run):
    _check_common(args)
    cfg = _config(args, run, "paper-practical")
    image, fg, bg = _load_inputs(args, run)
    seg = experiments.segment_image(image, fg, bg, args.beta, cfg, args.threshold)
    run.out.mkdir(parents=True, exist_ok=True)
    _save_mask(run, "mask", seg.mask)
    _save_field(run, "nu", seg.nu)
    _save_field(run, "lambda", seg.lam)
    seg.report.write_trace(run.trace_path("segment"))
    run.extra.update(iterations=seg.report.iterations, energy=seg.energy,
                     solver_status=seg.report.status)
    print(f"{seg.report.status}: {seg.report.iterations} iterations, energy {seg.energy:.6g}, "
          f"{int(seg.mask.sum())} foreground pixels")
    seg.report.raise_for_status()


def cmd_compare(args, run):
    _check_common(args)
    if args.at_iters < 1:
        raise ParameterError("--at-iters must be at least 1")
    cfg = _config(args, run, "paper-practical")
    image, fg, bg = _load_inputs(args, run)
    truth = None
    if args.truth:
        truth = imageio.load_image(run.input(args.truth)) > 0
        if truth.shape != image.shape:
            raise InputError("ground-truth mask does not match the image")
    rows, masks = experiments.compare_methods(image, fg, bg, args.beta, cfg, truth,
                                              args.at_iters, args.threshold)
    run.out.mkdir(parents=True, exist_ok=True)
    header = ["method", "energy", "ctv", "dice", "iterations", "wall_time", "max_axis_run"]
    _write_csv(run.path("compare.csv"), rows, header)
    for name, mask in masks.items():
        _save_mask(run, f"mask_{name}", mask)
    for r in rows:
        print(f"{r['method']:10s} energy {r['energy']:.6g}  ctv {r['ctv']:.6g}  dice {r['dice']:.4f}  "
              f"iters {r['iterations']}  axis-run {r['max_axis_run']}")


def cmd_catenoid(args, run):
    if args.at_iters < 1:
        raise ParameterError("--at-iters must be at least 1")
    _check_common(args)
    cfg = _config(args, run, "paper-practical")
    try:
        datasets.catenoid_parameter(args.R, args.h)
        res = experiments.catenoid_experiment(args.N, args.R, args.h, cfg, args.at_iters, args.threshold)
    except (ValueError, GraphError) as exc:
        raise ParameterError(str(exc)) from exc
    run.out.mkdir(parents=True, exist_ok=True)
    rows = zip(res["z"], res["analytic"], res["ccmf_radius"], res["at_radius"])
    _write_csv(run.path("catenoid.csv"), rows, ["z", "analytic", "ccmf", "at_cmf"])
    imageio.save_volume(run.path("nu.vol"), res["nu"].astype(np.float32))
    imageio.save_volume(run.path("mask.vol"), (res["nu"] >= args.threshold).astype(np.uint8))
    res["report"].write_trace(run.trace_path("catenoid"))
    run.extra.update(c=res["phantom"].c, ccmf_rmse=res["ccmf_rmse"], at_cmf_rmse=res["at_rmse"],
                     iterations=res["report"].iterations, solver_status=res["report"].status)
    print(f"c = {res['phantom'].c:.10f}")
    print(f"CCMF RMSE {res['ccmf_rmse']:.4f} voxels ({res['report'].status}, "
          f"{res['report'].iterations} iterations)")
    print(f"AT-CMF RMSE {res['at_rmse']:.4f} voxels ({args.at_iters} iterations)")
    res["report"].raise_for_status()


def cmd_perimeter(args, run):
    _check_common(args)
    cfg = _config(args, run, "strict")
    try:
        scales = [float(s) for s in args.scales.split(",")]
    except ValueError as exc:
        raise ParameterError(f"bad --scales: {args.scales}") from exc
    if min(scales) < 2:
        raise ParameterError("shape sizes must be at least 2 pixels")
    rows = datasets.perimeter_study(datasets.default_shapes(scales), cfg, workers=args.parallel)
    run.out.mkdir(parents=True, exist_ok=True)
    header = ["kind", "size", "perimeter", "ccmf_energy", "gc_cost", "iterations"]
    _write_csv(run.path("perimeter.csv"), rows, header)
    fits = {key: datasets.perimeter_fits(rows, key) for key in ("ccmf_energy", "gc_cost")}
    for key, fit in fits.items():
        parts = "  ".join(f"{k}: slope {v.slope:.4f} R2 {v.r2:.5f}" for k, v in fit.items())
        print(f"{key:12s} {parts}")
    run.extra["fits"] = {key: {k: asdict(v) for k, v in fit.items()} for key, fit in fits.items()}


def cmd_karate(args, run):
    _check_common(args)
    cfg = _config(args, run, "strict")
    res = experiments.karate_experiment(cfg, args.threshold)
    run.out.mkdir(parents=True, exist_ok=True)
    rows = zip(range(res["graph"].n), res["truth"], res["nu"], res["labels"])
    _write_csv(run.path("karate.csv"), rows, ["node", "truth", "nu", "label"])
    wrong = [int(i) + 1 for i in res["misclassified"]]
    run.extra.update(misclassified_1based=wrong, solver_status=res["report"].status)
    print(f"{len(wrong)} misclassified member(s) (1-indexed): {wrong}")
    res["report"].raise_for_status()


def cmd_duality_check(args, run):
    _check_common(args)
    if args.count < 1 or args.weak_count < 1:
        raise ParameterError("counts must be positive")
    cfg = _config(args, run, "strict")
    rows = experiments.strong_duality_suite(args.count, args.seed, cfg)
    lhs, rhs = experiments.weak_duality_suite(args.weak_count, args.seed)
    run.out.mkdir(parents=True, exist_ok=True)
    header = ["instance", "n", "m", "status", "iterations", "primal", "dual", "rel_gap",
              "divergence", "capacity_excess"]
    _write_csv(run.path("strong.csv"), rows, header)
    _write_csv(run.path("weak.csv"), zip(lhs, rhs), ["lhs", "rhs"])
    strong_ok = sum(r["status"] == "converged" and r["rel_gap"] <= 1e-4 for r in rows)
    feas_ok = sum(r["divergence"] <= 1e-6 and r["capacity_excess"] <= 1e-6 for r in rows)
    weak_ok = int(np.sum(lhs <= rhs + 1e-9))
    table = [("strong duality (rel gap <= 1e-4)", strong_ok, len(rows)),
             ("feasibility (<= 1e-6)", feas_ok, len(rows)),
             ("weak duality (F.Au <= CTV(u))", weak_ok, len(lhs))]
    for name, ok, total in table:
        print(f"{'PASS' if ok == total else 'FAIL'}  {name:36s} {ok}/{total}")
    run.extra["table"] = [{"check": n, "passed": ok, "total": t} for n, ok, t in table]
    if any(ok != total for _, ok, total in table):
        raise CheckFailed("duality suite reported failures")


# --- parser -----------------------------------------------------------------------

def _add_solver_flags(p, default_preset):
    p.add_argument("--preset", choices=["strict", "paper-practical"], default=None,
                   help=f"solver tolerance preset (default {default_preset})")
    p.add_argument("--mu", type=float, default=None, help="barrier update factor (default 10)")
    p.add_argument("--max-iters", type=int, default=None, help="interior-point iteration cap (default 200)")
    p.add_argument("--threshold", type=float, default=0.5, help="threshold on nu for the mask")
    p.add_argument("--trace", default=None,
                   help="solver trace CSV path (fallback: $CCMF_TRACE_DIR/<command>-trace.csv)")
    p.add_argument("--out", default="ccmf-out", help="output directory")
    p.add_argument("--parallel", type=int, default=1, help="worker processes for independent instances")


def _add_image_flags(p):
    p.add_argument("image", help="input image (PGM) or volume (ccmf-vol)")
    p.add_argument("--seed-mask", required=False,
                   help="seed labels, same size as the image: 0 unlabeled, 1 background, 2 foreground")
    p.add_argument("--beta", type=float, default=100.0,
                   help="contrast parameter on intensities scaled to [0,1] (default 100)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccmf", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", "-v", action="store_true", help="log solver iterations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="seeded CCMF segmentation")
    _add_image_flags(p)
    _add_solver_flags(p, "paper-practical")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("compare", help="CCMF vs graph cuts vs AT-CMF on one image")
    _add_image_flags(p)
    p.add_argument("--truth", default=None, help="ground-truth mask (PGM, nonzero = foreground)")
    p.add_argument("--at-iters", type=int, default=1000, help="AT-CMF iteration budget")
    _add_solver_flags(p, "paper-practical")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("catenoid", help="minimal surface between two coaxial rings")
    p.add_argument("--N", type=int, default=32, help="grid size")
    p.add_argument("--R", type=float, default=10.0, help="ring radius")
    p.add_argument("--h", type=float, default=4.0, help="half the ring separation")
    p.add_argument("--at-iters", type=int, default=2000, help="AT-CMF iteration budget")
    _add_solver_flags(p, "paper-practical")
    p.set_defaults(func=cmd_catenoid)

    p = sub.add_parser("perimeter", help="energy vs analytic perimeter for discs, squares and diamonds")
    p.add_argument("--scales", default="5,7,9,11,13", help="comma-separated radii / half-sides")
    _add_solver_flags(p, "strict")
    p.set_defaults(func=cmd_perimeter)

    p = sub.add_parser("karate", help="two-way split of the karate-club network")
    _add_solver_flags(p, "strict")
    p.set_defaults(func=cmd_karate)

    p = sub.add_parser("duality-check", help="randomized strong and weak duality suites")
    p.add_argument("--count", type=int, default=100, help="random instances for strong duality")
    p.add_argument("--weak-count", type=int, default=1000, help="random pairs for weak duality")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    _add_solver_flags(p, "strict")
    p.set_defaults(func=cmd_duality_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args)
    code, status = EXIT_OK, "ok"
    try:
        args.func(args, run)
    except (InputError, FileNotFoundError, IsADirectoryError, imageio.ImageFormatError) as exc:
        code, status = EXIT_INPUT, f"input error: {exc}"
    except GraphError as exc:
        # invalid seeds or graph files are input problems
        code, status = EXIT_INPUT, f"input error: {exc}"
    except ParameterError as exc:
        code, status = EXIT_PARAM, f"parameter error: {exc}"
    except (ConvergenceError, SolverError, CheckFailed) as exc:
        code, status = EXIT_CONVERGENCE, f"convergence failure: {exc}"
    except ValueError as exc:
        code, status = EXIT_PARAM, f"parameter error: {exc}"
    if code:
        print(f"ccmf: {status}", file=sys.stderr)
    try:
        run.manifest(status, code)
    except OSError as exc:
        print(f"ccmf: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_INPUT
    return code


if __name__ == "__main__":
    sys.exit(main())
