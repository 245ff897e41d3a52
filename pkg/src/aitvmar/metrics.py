"""Image quality metrics: relative error, PSNR and SSIM."""

from dataclasses import asdict, dataclass
import json
import math

import numpy as np
from skimage.metrics import structural_similarity

SSIM_SIGMA = 1.5
SSIM_WIN = 11


def _pair(u, ref, mask=None):
    u = np.asarray(u, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if u.shape != ref.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {ref.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != ref.shape:
            raise ValueError("mask shape does not match the images")
        if not mask.any():
            raise ValueError("mask selects no pixels")
    return u, ref, mask


def rel_error(u, ref, mask=None):
    """``|u - ref| / |ref|`` in the Euclidean norm."""
    u, ref, mask = _pair(u, ref, mask)
    if mask is not None:
        u, ref = u[mask], ref[mask]
    nr = np.linalg.norm(ref)
    if nr == 0:
        raise ValueError("reference image is all zero")
    return float(np.linalg.norm(u - ref) / nr)


def psnr(u, ref, peak="auto", mask=None):
    """Peak signal-to-noise ratio in dB; ``inf`` when the images agree exactly.

    ``peak="auto"`` takes ``max(ref)`` over the whole reference.
    """
    u, ref, mask = _pair(u, ref, mask)
    if peak == "auto":
        peak = float(ref.max())
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = (u - ref) if mask is None else (u - ref)[mask]
    mse = float(np.mean(err ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def ssim(u, ref, mask=None):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03).

    The dynamic range is ``max(ref) - min(ref)``. Windows that would leave the
    image are dropped from the mean, as are pixels outside ``mask``.
    """
    u, ref, mask = _pair(u, ref, mask)
    if min(ref.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN} pixels on each side")
    rng = float(ref.max() - ref.min())
    if rng == 0:
        if np.array_equal(u, ref):
            return 1.0
        raise ValueError("reference image is constant, SSIM range undefined")
    _, smap = structural_similarity(ref, u, data_range=rng, gaussian_weights=True,
                                    sigma=SSIM_SIGMA, use_sample_covariance=False,
                                    K1=0.01, K2=0.03, full=True)
    pad = (SSIM_WIN - 1) // 2
    inner = np.zeros(ref.shape, dtype=bool)
    inner[pad:-pad, pad:-pad] = True
    if mask is not None:
        inner &= mask
        if not inner.any():
            raise ValueError("mask has no pixels away from the border")
    return float(smap[inner].mean())


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    rel_error: float

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        p = d["psnr_db"]
        return cls(math.inf if p == "inf" else float(p), float(d["ssim"]), float(d["rel_error"]))


def report(u, ref, mask=None, peak="auto"):
    return MetricReport(psnr(u, ref, peak=peak, mask=mask), ssim(u, ref, mask=mask),
                        rel_error(u, ref, mask=mask))
