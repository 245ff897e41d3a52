"""Pipeline stages shared by the command line and the experiment scripts.

Every stage takes the materialized config dict. Arrays that cross a stage
boundary are rounded to float32 first so an in-memory run gives exactly the
numbers a run through the on-disk raster files would.
"""

from dataclasses import replace
import math
import time

import numpy as np

from . import metrics
from .config import resolve_path
from .grid_ops import SQRT8
from .projector import FanBeamGeometry, FanBeamProjector, cgls, fbp, weighted_op_norm
from .simulate import (MaterialTable, NoiseParams, PhantomSpec, Spectrum, add_poisson,
                       material_maps, poly_project, rasterize)
from .solvers import (FsPdhgParams, ModelParams, PrePdhgParams, check_conditions_fs,
                      check_conditions_pre, default_gamma, preset, run_fs_pdhg,
                      run_pre_pdhg)
from .weights import binary_complement, build_masks, build_weight, segment_metal

OPNORM_ITERS = 50


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def load_inputs(cfg, base_dir="."):
    ph = PhantomSpec.load(resolve_path(cfg["phantom"], base_dir))
    mt = MaterialTable.load(resolve_path(cfg["materials"], base_dir), metals=ph.metal_materials)
    sp = Spectrum.load(resolve_path(cfg["spectrum"], base_dir))
    return ph, mt, sp


def make_geometry(cfg, pixel_size):
    g = cfg["geometry"]
    n = cfg["image_size"]
    if g["bin_width"] == "fit":
        geom = FanBeamGeometry.fitted(n, pixel_size, num_views=g["num_views"],
                                      num_bins=g["num_bins"],
                                      source_to_detector=g["source_to_detector"],
                                      source_to_iso=g["source_to_iso"])
    else:
        geom = FanBeamGeometry(source_to_detector=g["source_to_detector"],
                               source_to_iso=g["source_to_iso"], bin_width=g["bin_width"],
                               num_views=g["num_views"], num_bins=g["num_bins"],
                               image_pixel_size=pixel_size)
    return replace(geom, angular_range=g["angular_range"], start_angle=g["start_angle"])


_OPS = {}


def projector_for(geom, n):
    """Projector for ``(geom, n)``, cached because assembly dominates short runs."""
    key = (geom, n)
    if key not in _OPS:
        if len(_OPS) > 4:
            _OPS.clear()
        _OPS[key] = FanBeamProjector(geom, n)
    return _OPS[key]


def simulate(cfg, base_dir="."):
    """Noise-free and noisy sinograms, the reference image and material maps."""
    ph, mt, sp = load_inputs(cfg, base_dir)
    n = cfg["image_size"]
    geom = make_geometry(cfg, ph.pixel_size(n))
    op = projector_for(geom, n)
    Y0 = poly_project(ph, op, sp, mt)
    S0 = cfg["noise"]["S0"]
    if S0 is None:
        Y = Y0.copy()
    else:
        Y = add_poisson(Y0, NoiseParams(S0=S0, seed=cfg["noise"]["seed"]))
    return {
        "geometry": geom,
        "Y0": f32(Y0),
        "Y": f32(Y),
        "reference": f32(rasterize(ph, n, cfg["reference_energy_kev"], mt)),
        "materials": material_maps(ph, n),
        "metal_pixels": sum(m for name, m in material_maps(ph, n).items()
                            if name in ph.metal_materials),
    }


def initial_image(cfg, Y, geom):
    w = cfg["weight"]
    n = cfg["image_size"]
    if w["initial_recon"] == "cgls":
        return cgls(projector_for(geom, n), Y, iters=w["cgls_iters"])
    return fbp(Y, geom, n)


def weights(cfg, Y, geom):
    """Segmentation, trace masks and both weightings.

    Raises :class:`aitvmar.weights.NoMetalFound` when nothing exceeds the
    metal threshold.
    """
    w = cfg["weight"]
    n = cfg["image_size"]
    op = projector_for(geom, n)
    ua = initial_image(cfg, Y, geom)
    labels, count = segment_metal(ua, w["metal_threshold"])
    masks = build_masks(Y, labels, op, t=w["t"], tol=w["trace_tol"])
    W = f32(build_weight(Y, masks["Omega_t"], eps=w["eps"], cap=w["cap"]))
    summary = {"components": count, **{k: int(v.sum()) for k, v in masks.items()},
               "sinogram_size": int(Y.size), "w_max": float(W.max())}
    return {"initial": f32(ua), "labels": labels, "masks": masks, "W": W,
            "W_binary": binary_complement(masks["Omega"]), "summary": summary}


def solver_params(cfg):
    """``(params, weight_kind)`` for the configured algorithm, preset applied."""
    s = dict(cfg["solver"])
    overrides, kind = preset(s["preset"])
    s.update(overrides)
    model = ModelParams(lam=s["lam"], alpha=s["alpha"], eta=s["eta"], c=s["c"])
    common = dict(model=model, tau=s["tau"], beta=s["beta"], max_iters=s["max_iters"],
                  tol=s["tol"], projection=s["projection"])
    if s["algorithm"] == "pre":
        return PrePdhgParams(gamma=s["gamma"], **common), kind
    return FsPdhgParams(rho=s["rho"], sigma1=s["sigma1"], sigma2=s["sigma2"], **common), kind


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def reconstruct(cfg, Y, W, W_binary, geom, callback=None):
    """Run the configured solver. Returns ``(u, record, run_meta)``.

    The weight actually used follows the preset: the adaptive ``W`` or the
    binary complement of the metal trace.
    """
    n = cfg["image_size"]
    op = projector_for(geom, n)
    params, kind = solver_params(cfg)
    Wuse = W if kind == "adaptive" else W_binary
    init = cfg["solver"]["init"]
    t0 = time.perf_counter()
    report = _conditions(params, op, Wuse)
    if isinstance(params, PrePdhgParams):
        u, rec = run_pre_pdhg(Y, Wuse, op, params, init=init, gamma=report["gamma"],
                              opnorm=report["opnorm"], K=SQRT8, callback=callback)
    else:
        u, rec = run_fs_pdhg(Y, Wuse, op, params, init=init, callback=callback)
    wall = time.perf_counter() - t0
    meta = {
        "config": cfg,
        "algorithm": cfg["solver"]["algorithm"],
        "weight_kind": kind,
        "effective_params": {k: v for k, v in _params_flat(params).items()},
        "conditions": report,
        "iterations": rec.iterations,
        "converged": rec.meta["converged"],
        "wall_s": wall,
    }
    if "gamma" in rec.meta:
        meta["gamma"] = rec.meta["gamma"]
        meta["opnorm"] = rec.meta["opnorm"]
    return f32(u), rec, _json_safe(meta)


def _conditions(params, op, Wuse):
    if isinstance(params, PrePdhgParams):
        opnorm = weighted_op_norm(op, Wuse, iters=OPNORM_ITERS)
        gamma = params.gamma if params.gamma is not None else default_gamma(params.model, opnorm, SQRT8)
        return check_conditions_pre(params, SQRT8, opnorm, gamma)
    return check_conditions_fs(params, SQRT8, float(np.max(Wuse)))


def condition_report(cfg, W, W_binary, geom):
    """Clause-by-clause step-size report for the configured solver."""
    params, kind = solver_params(cfg)
    op = projector_for(geom, cfg["image_size"])
    rep = _conditions(params, op, W if kind == "adaptive" else W_binary)
    rep["algorithm"] = cfg["solver"]["algorithm"]
    rep["eta_zero"] = params.model.eta == 0
    return _json_safe(rep)


def _params_flat(params):
    d = {k: getattr(params, k) for k in params.__dataclass_fields__ if k != "model"}
    d.update({k: getattr(params.model, k) for k in params.model.__dataclass_fields__})
    return d


def evaluate(u, ref, mask=None):
    return metrics.report(u, ref, mask=mask)


def run_all(cfg, base_dir="."):
    """simulate -> weights -> reconstruct -> metrics, all in memory."""
    sim = simulate(cfg, base_dir)
    wts = weights(cfg, sim["Y"], sim["geometry"])
    u, rec, meta = reconstruct(cfg, sim["Y"], wts["W"], wts["W_binary"], sim["geometry"])
    rep = evaluate(u, sim["reference"])
    return {"sim": sim, "weights": wts, "u": u, "record": rec, "meta": meta, "metrics": rep}
