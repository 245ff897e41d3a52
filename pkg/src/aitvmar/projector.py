"""Fan-beam projector, its exact transpose, FBP and CGLS.

The system matrix is assembled once with Joseph's ray-driven interpolation
(one sample per pixel column or row along each ray, linearly interpolated
between the two neighbouring pixel centres) and stored in CSR form. The
back-projector is the transpose of the same matrix, so the pair is adjoint
up to floating point summation order.
"""

from dataclasses import asdict, dataclass
import math

import numpy as np
import scipy.sparse as sp

from .grid_ops import power_iteration


@dataclass(frozen=True)
class FanBeamGeometry:
    """Equiangular fan-beam scanner on a circular orbit (lengths in mm)."""

    source_to_detector: float = 949.075
    source_to_iso: float = 541.0
    bin_width: float = 1.024
    num_views: int = 984
    num_bins: int = 888
    angular_range: float = 2 * math.pi
    image_pixel_size: float = 1.0
    start_angle: float = 0.0

    def __post_init__(self):
        if not self.source_to_detector > self.source_to_iso > 0:
            raise ValueError("need source_to_detector > source_to_iso > 0")
        if self.num_views < 1 or self.num_bins < 1:
            raise ValueError("num_views and num_bins must be >= 1")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if not self.image_pixel_size > 0:
            raise ValueError("image_pixel_size must be positive")
        if not self.angular_range > 0:
            raise ValueError("angular_range must be positive")

    @classmethod
    def fitted(cls, n, pixel_size=1.0, num_views=180, num_bins=None,
               source_to_detector=949.075, source_to_iso=541.0, margin=1.05):
        """Geometry whose fan just covers an ``n x n`` image (corners included)."""
        if num_bins is None:
            num_bins = int(math.ceil(1.5 * n))
        half_diag = margin * n * pixel_size / math.sqrt(2.0)
        gamma_max = math.asin(min(half_diag / source_to_iso, 1.0))
        dgamma = 2 * gamma_max / num_bins
        return cls(source_to_detector=source_to_detector,
                   source_to_iso=source_to_iso,
                   bin_width=dgamma * source_to_detector,
                   num_views=num_views, num_bins=num_bins,
                   image_pixel_size=pixel_size)

    @property
    def shape(self):
        return (self.num_views, self.num_bins)

    @property
    def dgamma(self):
        return self.bin_width / self.source_to_detector

    @property
    def angles(self):
        return self.start_angle + np.arange(self.num_views) * (self.angular_range / self.num_views)

    @property
    def fan_angles(self):
        return (np.arange(self.num_bins) - (self.num_bins - 1) / 2.0) * self.dgamma

    @property
    def fov_radius(self):
        gamma_max = min(self.num_bins * self.dgamma / 2.0, math.pi / 2)
        return self.source_to_iso * math.sin(gamma_max)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class MatrixOperator:
    """Linear map between an image and a sinogram backed by a matrix."""

    def __init__(self, matrix, image_shape, sino_shape):
        self.matrix = sp.csr_matrix(matrix) if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
        self.matrix_t = self.matrix.T.tocsr() if sp.issparse(matrix) else self.matrix.T.copy()
        self.image_shape = tuple(image_shape)
        self.sino_shape = tuple(sino_shape)
        if self.matrix.shape != (int(np.prod(self.sino_shape)), int(np.prod(self.image_shape))):
            raise ValueError("matrix shape does not match image/sinogram shapes")

    def forward(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != self.image_shape:
            raise ValueError(f"image shape {u.shape} != {self.image_shape}")
        return np.asarray(self.matrix @ u.ravel()).reshape(self.sino_shape)

    def adjoint(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != self.sino_shape:
            raise ValueError(f"sinogram shape {y.shape} != {self.sino_shape}")
        return np.asarray(self.matrix_t @ y.ravel()).reshape(self.image_shape)

    def dense(self):
        return self.matrix.toarray() if sp.issparse(self.matrix) else self.matrix.copy()

    @classmethod
    def identity(cls, n):
        return cls(sp.identity(n * n, format="csr"), (n, n), (n, n))


def _view_entries(geom, n, iv, beta):
    d = geom.image_pixel_size
    half = (n - 1) / 2.0
    sx, sy = geom.source_to_iso * math.cos(beta), geom.source_to_iso * math.sin(beta)
    phi = beta + math.pi + geom.fan_angles
    dx, dy = np.cos(phi), np.sin(phi)
    ray = iv * geom.num_bins + np.arange(geom.num_bins)
    axis = (np.arange(n) - half) * d
    rows, cols, vals = [], [], []

    horiz = np.abs(dx) >= np.abs(dy)
    if horiz.any():
        hx, hy, hr = dx[horiz], dy[horiz], ray[horiz]
        t = (axis[None, :] - sx) / hx[:, None]
        f = half - (sy + t * hy[:, None]) / d
        i0 = np.floor(f).astype(np.int64)
        w = f - i0
        step = (d / np.abs(hx))[:, None]
        jj = np.broadcast_to(np.arange(n), f.shape)
        rr = np.broadcast_to(hr[:, None], f.shape)
        for ii, ww in ((i0, (1 - w) * step), (i0 + 1, w * step)):
            ok = (ii >= 0) & (ii < n)
            rows.append(rr[ok]); cols.append(ii[ok] * n + jj[ok]); vals.append(ww[ok])

    vert = ~horiz
    if vert.any():
        vx, vy, vr = dx[vert], dy[vert], ray[vert]
        y_axis = -axis  # row i sits at y = (half - i) * d
        t = (y_axis[None, :] - sy) / vy[:, None]
        g = (sx + t * vx[:, None]) / d + half
        j0 = np.floor(g).astype(np.int64)
        w = g - j0
        step = (d / np.abs(vy))[:, None]
        ii = np.broadcast_to(np.arange(n), g.shape)
        rr = np.broadcast_to(vr[:, None], g.shape)
        for jj, ww in ((j0, (1 - w) * step), (j0 + 1, w * step)):
            ok = (jj >= 0) & (jj < n)
            rows.append(rr[ok]); cols.append(ii[ok] * n + jj[ok]); vals.append(ww[ok])
    return rows, cols, vals


def system_matrix(geom, n):
    """Sparse ``(m1*m2, n*n)`` ray-driven system matrix for an ``n x n`` image."""
    rows, cols, vals = [], [], []
    for iv, beta in enumerate(geom.angles):
        r, c, v = _view_entries(geom, n, iv, beta)
        rows += r; cols += c; vals += v
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = vals != 0
    m = geom.num_views * geom.num_bins
    A = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m, n * n))
    A.sum_duplicates()
    return A


class FanBeamProjector(MatrixOperator):
    """Discrete fan-beam Radon transform for an ``n x n`` image."""

    def __init__(self, geom, n):
        if n < 1:
            raise ValueError("image size must be positive")
        if n * geom.image_pixel_size / 2.0 > geom.fov_radius * (1 + 1e-12):
            raise ValueError(
                f"image FOV radius {n * geom.image_pixel_size / 2.0:.2f} mm exceeds "
                f"scanner FOV radius {geom.fov_radius:.2f} mm")
        self.geometry = geom
        self.n = n
        super().__init__(system_matrix(geom, n), (n, n), geom.shape)


def forward(u, geom):
    u = np.asarray(u, dtype=float)
    return FanBeamProjector(geom, u.shape[0]).forward(u)


def adjoint(y, geom, n):
    return FanBeamProjector(geom, n).adjoint(y)


def _fan_filter(geom, filter):
    m2 = geom.num_bins
    a = geom.dgamma
    size = 1 << int(math.ceil(math.log2(2 * m2 - 1)))
    k = np.fft.fftfreq(size, d=1.0 / size).astype(int)  # 0, 1, ..., -1 wrap-around order
    kern = np.zeros(size)
    kern[k == 0] = 1.0 / (8 * a * a)
    odd = (k % 2) != 0
    kern[odd] = -1.0 / (2 * math.pi ** 2 * np.sin(k[odd] * a) ** 2)
    H = np.fft.fft(kern).real
    if filter == "hann":
        f = np.abs(np.fft.fftfreq(size))
        H = H * (0.5 + 0.5 * np.cos(2 * math.pi * f))
    elif filter != "ramlak":
        raise ValueError(f"unknown filter {filter!r}")
    return H, size


def fbp(y, geom, n, filter="ramlak"):
    """Weighted filtered back projection for equiangular fan-beam data."""
    y = np.asarray(y, dtype=float)
    if geom.num_views < 2:
        raise ValueError("FBP needs at least two views")
    if y.shape != geom.shape:
        raise ValueError(f"sinogram shape {y.shape} != {geom.shape}")
    R = geom.source_to_iso
    gam = geom.fan_angles
    H, size = _fan_filter(geom, filter)
    pw = y * (R * np.cos(gam))[None, :]
    q = np.fft.ifft(np.fft.fft(pw, n=size, axis=1) * H[None, :], axis=1).real[:, :geom.num_bins]
    q *= geom.dgamma

    d = geom.image_pixel_size
    half = (n - 1) / 2.0
    x = (np.arange(n) - half) * d
    X, Y = np.meshgrid(x, -x)
    out = np.zeros((n, n))
    dbeta = geom.angular_range / geom.num_views
    centre = (geom.num_bins - 1) / 2.0
    for beta, row in zip(geom.angles, q):
        sx, sy = R * math.cos(beta), R * math.sin(beta)
        vx, vy = X - sx, Y - sy
        L2 = vx * vx + vy * vy
        gp = np.angle(np.exp(1j * (np.arctan2(vy, vx) - beta - math.pi)))
        out += np.interp(gp / geom.dgamma + centre, np.arange(geom.num_bins), row,
                         left=0.0, right=0.0) / L2
    return out * dbeta


def cgls(op, y, iters=20, x0=None, return_history=False):
    """Conjugate gradient on the normal equations of ``min 0.5 |A x - y|^2``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    y = np.asarray(y, dtype=float)
    x = np.zeros(op.image_shape) if x0 is None else np.array(x0, dtype=float)
    r = y - op.forward(x)
    s = op.adjoint(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    history = [0.5 * float(np.vdot(r, r))]
    for _ in range(iters):
        if gamma == 0:
            break
        q = op.forward(p)
        qq = float(np.vdot(q, q))
        if qq == 0:
            break
        a = gamma / qq
        x += a * p
        r -= a * q
        history.append(0.5 * float(np.vdot(r, r)))
        s = op.adjoint(r)
        gamma_new = float(np.vdot(s, s))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    if return_history:
        return x, history
    return x


def weighted_op_norm(op, W=None, iters=50, seed=0, return_history=False):
    """Largest eigenvalue of ``u -> A^T (W^2 * A u)`` (``W=None`` means ones)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if W is None:
        apply = lambda u: op.adjoint(op.forward(u))
    else:
        W2 = np.asarray(W, dtype=float) ** 2
        apply = lambda u: op.adjoint(W2 * op.forward(u))
    return power_iteration(apply, op.image_shape, iters=iters, seed=seed,
                           return_history=return_history)
