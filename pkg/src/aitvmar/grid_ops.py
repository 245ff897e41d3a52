"""Discrete gradient/divergence, TV norms and the projections used by the solvers.

Gradient fields are stored as arrays of shape ``(2, n, n)`` with ``p[0]`` the
horizontal component (differences along columns) and ``p[1]`` the vertical
component (differences along rows).
"""

import numpy as np

SQRT8 = np.sqrt(8.0)


def grad(u):
    """Forward differences with Neumann boundary and unit spacing."""
    u = np.asarray(u, dtype=float)
    p = np.zeros((2,) + u.shape)
    p[0, :, :-1] = u[:, 1:] - u[:, :-1]
    p[1, :-1, :] = u[1:, :] - u[:-1, :]
    return p


def div(p):
    """Divergence, defined as the exact negative adjoint of :func:`grad`."""
    px, py = p[0], p[1]
    d = np.zeros(px.shape)
    d[:, 0] = px[:, 0]
    d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    d[:, -1] = -px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] -= py[-2, :]
    return d


def norm_l1(p):
    return float(np.abs(p).sum())


def norm_l21(p):
    return float(np.sqrt(p[0] ** 2 + p[1] ** 2).sum())


def aitv(u, alpha):
    """Anisotropic minus isotropic TV, ``|grad u|_1 - alpha |grad u|_{2,1}``."""
    g = grad(u)
    return norm_l1(g) - alpha * norm_l21(g)


def proj_box(u, c):
    """Clamp pixel values into ``[0, c]``."""
    if not c > 0:
        raise ValueError(f"box bound must be positive, got {c}")
    return np.minimum(np.maximum(u, 0.0), c)


def proj_disk(q):
    """Per-pixel projection onto the Euclidean unit disk."""
    mag = np.sqrt(q[0] ** 2 + q[1] ** 2)
    return q / np.maximum(1.0, mag)


def proj_box_pair(p, mode="paper"):
    """Map each pixel pair into ``[-1, 1]^2``.

    ``mode="paper"`` divides both components by ``max(1, |px|, |py|)``, which
    keeps the direction of the pair. ``mode="euclidean"`` clamps each component
    independently, the true nearest point in the box.
    """
    if mode == "paper":
        scale = np.maximum(1.0, np.maximum(np.abs(p[0]), np.abs(p[1])))
        return p / scale
    if mode == "euclidean":
        return np.clip(p, -1.0, 1.0)
    raise ValueError(f"unknown projection mode {mode!r}")


def power_iteration(apply, shape, iters=100, seed=0, return_history=False):
    """Largest eigenvalue of a symmetric PSD operator by power iteration.

    The estimate is the Rayleigh quotient of the current iterate, which is
    non-decreasing in the iteration count for PSD operators.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    x /= np.linalg.norm(x)
    history = []
    est = 0.0
    for _ in range(iters):
        y = apply(x)
        est = float(np.vdot(x, y).real)
        history.append(est)
        ny = np.linalg.norm(y)
        if ny == 0:
            break
        x = y / ny
    if return_history:
        return est, history
    return est


def grad_norm_bound(n, mode="analytic", iters=200):
    """Bound ``K`` on the operator norm of :func:`grad` for an ``n x n`` grid."""
    if n < 2:
        raise ValueError("grid size must be at least 2")
    if mode == "analytic":
        return float(SQRT8)
    if mode == "power":
        lam = power_iteration(lambda x: -div(grad(x)), (n, n), iters=iters)
        return float(np.sqrt(max(lam, 0.0)))
    raise ValueError(f"unknown mode {mode!r}")
