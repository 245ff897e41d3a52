"""Metal segmentation, metal-trace masks and the adaptive fidelity weight."""

import warnings

import numpy as np
from scipy import ndimage


class NoMetalFound(RuntimeError):
    pass


def segment_metal(u_a, threshold=None):
    """Threshold ``u_a`` and label 4-connected metal components.

    Returns ``(labels, count)`` with labels numbered 1..count in raster-scan
    order. ``threshold=None`` uses ``0.5 * max(u_a)``.
    """
    u_a = np.asarray(u_a, dtype=float)
    if threshold is None:
        threshold = 0.5 * float(u_a.max())
    if not threshold > 0:
        raise NoMetalFound("no metal found (non-positive threshold)")
    labels, count = ndimage.label(u_a >= threshold)
    if count == 0:
        raise NoMetalFound(f"no metal found above threshold {threshold:g}")
    return labels, int(count)


def _component_traces(labels, op, tol):
    count = int(labels.max()) if labels.size else 0
    return [op.forward((labels == k).astype(float)) > tol for k in range(1, count + 1)]


def metal_trace(labels, op, tol=0.0):
    """Sinogram entries whose ray meets any metal pixel."""
    omega = np.zeros(op.sino_shape, dtype=bool)
    if np.any(labels > 0):
        omega = op.forward((labels > 0).astype(float)) > tol
    return omega


def overlap_region(labels, op, tol=0.0):
    """Union over metal pairs of the intersection of their individual traces."""
    traces = _component_traces(labels, op, tol)
    out = np.zeros(op.sino_shape, dtype=bool)
    for k in range(len(traces)):
        for l in range(k + 1, len(traces)):
            out |= traces[k] & traces[l]
    return out


def high_atten_region(Y, omega, t=0.94):
    if not 0 < t:
        raise ValueError("threshold level t must be positive")
    Y = np.asarray(Y, dtype=float)
    return omega & (Y >= t * np.abs(Y).max())


def build_weight(Y, omega_t, eps=1e-16, cap=None):
    """``1 / max(sqrt(Y), eps)`` outside ``omega_t``, zero inside.

    Negative entries of ``Y`` are clamped to zero first. ``cap`` optionally
    limits the weight from above (off by default).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    Y = np.asarray(Y, dtype=float)
    if np.any(Y < 0):
        warnings.warn(f"clamping {int((Y < 0).sum())} negative sinogram entries to 0",
                      RuntimeWarning, stacklevel=2)
        Y = np.maximum(Y, 0.0)
    W = 1.0 / np.maximum(np.sqrt(Y), eps)
    if cap is not None:
        W = np.minimum(W, cap)
    W[np.asarray(omega_t, dtype=bool)] = 0.0
    return W


def binary_complement(omega):
    return 1.0 - np.asarray(omega, dtype=bool).astype(float)


def build_masks(Y, labels, op, t=0.94, tol=0.0):
    """All sinogram masks for one measurement, as a dict of boolean arrays."""
    omega = metal_trace(labels, op, tol)
    o_m = overlap_region(labels, op, tol)
    o_t = high_atten_region(Y, omega, t)
    return {"Omega": omega, "O_m": o_m, "O_t": o_t, "Omega_t": o_m | o_t}
