"""``mar`` command line.

Each command reads a JSON config (``--config``), applies trailing ``--key=value``
overrides (dotted keys such as ``--solver.alpha=0.5``) and works inside one
output directory, so the stages can be chained::

    mar simulate --config exp.json --out run1
    mar weights --config exp.json --out run1
    mar reconstruct --config exp.json --out run1
    mar metrics --out run1

Exit codes: 0 ok, 2 bad config or inputs, 3 no metal found, 4 solver diverged.
"""

import argparse
import csv
import json
import logging
import math
import os
from pathlib import Path
import sys

import numpy as np
from PIL import Image

from . import config as cfgmod
from . import pipeline
from .config import ConfigError
from .raster import read_raster, write_raster
from .solvers import SolverDivergence
from .weights import NoMetalFound

log = logging.getLogger("mar")

EXIT_CONFIG, EXIT_NO_METAL, EXIT_DIVERGED = 2, 3, 4

SWEEPABLE = {
    "lam": "solver", "alpha": "solver", "eta": "solver", "c": "solver", "gamma": "solver",
    "tau": "solver", "beta": "solver", "rho": "solver", "sigma1": "solver",
    "sigma2": "solver", "max_iters": "solver", "tol": "solver",
    "t": "weight", "eps": "weight", "cap": "weight", "metal_threshold": "weight",
}


class InputError(ValueError):
    pass


def _out_dir(args, cfg):
    out = Path(args.out) if args.out else Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read(out, name):
    path = out / f"{name}.json"
    if not path.exists():
        raise InputError(f"missing {path}; run the earlier pipeline stage first")
    return read_raster(path)


def _load(args):
    return cfgmod.load_config(args.config, args.overrides)


def cmd_simulate(args):
    cfg, base = _load(args)
    out = _out_dir(args, cfg)
    sim = pipeline.simulate(cfg, base)
    g = sim["geometry"]
    noise_meta = {"S0": cfg["noise"]["S0"], "seed": cfg["noise"]["seed"]}
    write_raster(out / "Y0", sim["Y0"], "sinogram", g, {"noise": None})
    write_raster(out / "Y", sim["Y"], "sinogram", g, {"noise": noise_meta})
    write_raster(out / "reference", sim["reference"], "image", g,
                 {"energy_kev": cfg["reference_energy_kev"]})
    for name, m in sim["materials"].items():
        write_raster(out / f"material_{name}", m > 0, "mask", g, {"material": name})
    _write_json(out / "simulate.json", {"config": cfg, "noise": noise_meta,
                                        "geometry": g.to_dict()})
    log.info("wrote sinograms %s to %s", sim["Y"].shape, out)
    return 0


def cmd_weights(args):
    cfg, _ = _load(args)
    out = _out_dir(args, cfg)
    Y = _read(out, "Y")
    wts = pipeline.weights(cfg, Y.data, Y.geometry)
    g = Y.geometry
    write_raster(out / "initial", wts["initial"], "image", g, {"method": cfg["weight"]["initial_recon"]})
    write_raster(out / "labels", wts["labels"].astype(float), "image", g, {})
    for k, m in wts["masks"].items():
        write_raster(out / f"mask_{k}", m, "mask", g, {})
    write_raster(out / "W", wts["W"], "sinogram", g, dict(cfg["weight"]))
    write_raster(out / "W_binary", wts["W_binary"], "sinogram", g, {})
    _write_json(out / "weights.json", wts["summary"])
    print(json.dumps(wts["summary"], sort_keys=True))
    return 0


def cmd_reconstruct(args):
    cfg, _ = _load(args)
    out = _out_dir(args, cfg)
    Y = _read(out, "Y")
    W = _read(out, "W")
    Wb = _read(out, "W_binary")
    u, rec, meta = pipeline.reconstruct(cfg, Y.data, W.data, Wb.data, Y.geometry)
    write_raster(out / "u", u, "image", Y.geometry,
                 {"iterations": meta["iterations"], "algorithm": meta["algorithm"]})
    rec.to_csv(out / "convergence.csv")
    _write_json(out / "run.json", meta)
    log.info("%s: %d iterations, converged=%s, %.2f s", meta["algorithm"], meta["iterations"],
             meta["converged"], meta["wall_s"])
    return 0


def cmd_metrics(args):
    out = Path(args.out) if args.out else Path(".")
    u = read_raster(args.u) if args.u else _read(out, "u")
    ref = read_raster(args.ref) if args.ref else _read(out, "reference")
    mask = read_raster(args.mask).data if args.mask else None
    if u.data.shape != ref.data.shape:
        raise InputError(f"shape mismatch {u.data.shape} vs {ref.data.shape}")
    rep = pipeline.evaluate(u.data, ref.data, mask)
    text = rep.to_json()
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(text + "\n")
    print(text)
    return 0


def ladder(c0, k0, r0, count):
    """``c0 * 2**(k0 + r0*l)`` for ``l = 0 .. count-1``."""
    return [c0 * 2.0 ** (k0 + r0 * l) for l in range(count)]


def _sweep_values(args):
    if args.values:
        return [json.loads(v) for v in args.values.split(",")]
    if args.ladder:
        parts = args.ladder.split(",")
        if len(parts) != 4:
            raise InputError("--ladder takes c0,k0,r0,count")
        return ladder(float(parts[0]), float(parts[1]), float(parts[2]), int(parts[3]))
    raise InputError("sweep needs --values or --ladder")


def cmd_sweep(args):
    cfg, base = _load(args)
    if args.param not in SWEEPABLE:
        raise InputError(f"unknown sweep parameter {args.param!r}; choose from {sorted(SWEEPABLE)}")
    values = _sweep_values(args)
    out = _out_dir(args, cfg)
    section = SWEEPABLE[args.param]
    sim = pipeline.simulate(cfg, base)
    wts = pipeline.weights(cfg, sim["Y"], sim["geometry"])
    rows = []
    for v in values:
        c = json.loads(json.dumps(cfg))
        c[section][args.param] = v
        c = cfgmod.materialize(c)
        if section == "weight":
            wv = pipeline.weights(c, sim["Y"], sim["geometry"])
        else:
            wv = wts
        u, rec, meta = pipeline.reconstruct(c, sim["Y"], wv["W"], wv["W_binary"], sim["geometry"])
        rep = pipeline.evaluate(u, sim["reference"])
        rows.append([v, rep.psnr_db, rep.ssim, rep.rel_error, rec.iterations, 1e3 * meta["wall_s"]])
        log.info("%s=%s psnr=%.3f iters=%d", args.param, v, rep.psnr_db, rec.iterations)
    path = out / f"sweep_{args.param}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "psnr", "ssim", "rel_error", "iters", "wall_ms"])
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    print(path)
    return 0


def cmd_check_params(args):
    cfg, base = _load(args)
    out = Path(args.out) if args.out else Path(cfg["output_dir"])
    try:
        Y = _read(out, "Y")
        W = _read(out, "W").data
        Wb = _read(out, "W_binary").data
        geom = Y.geometry
    except InputError:
        sim = pipeline.simulate(cfg, base)
        wts = pipeline.weights(cfg, sim["Y"], sim["geometry"])
        W, Wb, geom = wts["W"], wts["W_binary"], sim["geometry"]
    report = pipeline.condition_report(cfg, W, Wb, geom)
    print(json.dumps(report, indent=2, sort_keys=True))
    for name, clause in report.items():
        if isinstance(clause, dict) and clause.get("ok") is not True:
            log.warning("condition %s not satisfied: %s", name, clause)
    return 0


def window_to_u8(x, center, width):
    if not width > 0:
        raise ValueError("window width must be positive")
    lo = center - width / 2.0
    t = np.clip((np.asarray(x, dtype=float) - lo) / width, 0.0, 1.0)
    return np.floor(t * 255.0 + 0.5).astype(np.uint8)


def export_png(raster, path, center, width, mu_water=None):
    """Write an 8-bit grayscale PNG with a linear display window.

    With ``mu_water`` the window is given in HU, ``1000 (mu - mu_water) / mu_water``.
    """
    data = np.asarray(raster.data, dtype=float)
    if mu_water is not None:
        data = 1000.0 * (data - mu_water) / mu_water
    Image.fromarray(window_to_u8(data, center, width), mode="L").save(path, format="PNG")
    return path


def cmd_export(args):
    r = read_raster(args.raster)
    if r.kind == "mask":
        raise InputError("export handles images and sinograms only")
    if args.center is None or args.width is None:
        lo, hi = float(r.data.min()), float(r.data.max())
        center = (lo + hi) / 2 if args.center is None else args.center
        width = (hi - lo if hi > lo else 1.0) if args.width is None else args.width
    else:
        center, width = args.center, args.width
    try:
        export_png(r, args.png, center, width, args.mu_water)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    print(args.png)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="mar", description="Metal artifact reduction for fan-beam CT.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.set_defaults(func=fn)
        return p

    with_config("simulate", cmd_simulate, "simulate noisy polychromatic sinograms")
    with_config("weights", cmd_weights, "segment metal and build masks and weights")
    with_config("reconstruct", cmd_reconstruct, "run Pre-PDHG or FS-PDHG")
    with_config("check-params", cmd_check_params, "report the step-size conditions")
    p = with_config("sweep", cmd_sweep, "reconstruct over a range of one parameter")
    p.add_argument("--param", required=True)
    p.add_argument("--values", help="comma separated values")
    p.add_argument("--ladder", help="c0,k0,r0,count for c0*2^(k0+r0*l)")

    p = sub.add_parser("metrics", help="PSNR, SSIM and relative error")
    p.add_argument("--out", help="directory holding u/reference (default .)")
    p.add_argument("--u")
    p.add_argument("--ref")
    p.add_argument("--mask")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export", help="windowed 8-bit PNG of a raster")
    p.add_argument("--raster", required=True)
    p.add_argument("--png", required=True)
    p.add_argument("--center", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--mu-water", type=float, dest="mu_water")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        ap.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    if not hasattr(args, "config"):
        if extra:
            ap.error(f"{args.command} takes no config overrides")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MAR_THREADS")
    if threads and not threads.isdigit():
        log.warning("ignoring non-integer MAR_THREADS=%r", threads)
    try:
        return args.func(args)
    except (ConfigError, InputError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoMetalFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_METAL
    except SolverDivergence as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
