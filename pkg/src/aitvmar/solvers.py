"""Primal-dual solvers for the box-constrained weighted AITV model

    min_u  1/(2 lam) |W * (P u - Y)|^2 + |grad u|_1 - alpha |grad u|_{2,1},  0 <= u <= c

written as the penalized saddle problem

    min_{u,q} max_p  G(u) + <grad u, p + alpha q> - eta/2 |p|^2 + I_Q(q) - I_S(p).

``run_pre_pdhg`` uses a preconditioned u-step with metric
``M = gamma I - (1/lam) P^T W^2 P`` so that the u-update is a single projection.
``run_fs_pdhg`` splits ``v = P u`` with a multiplier and never inverts
anything. Both record the auxiliary energy whose monotone decrease is the
convergence certificate for the respective scheme.
"""

from dataclasses import asdict, dataclass, field, replace
import csv
import math
import time

import numpy as np

from .grid_ops import SQRT8, div, grad, proj_box, proj_box_pair, proj_disk

FEAS_TOL = 1e-12


class SolverDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelParams:
    lam: float = 1.0
    alpha: float = 0.75
    eta: float = 1e-4
    c: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if not self.c > 0:
            raise ValueError("box bound c must be positive")


@dataclass(frozen=True)
class PrePdhgParams:
    model: ModelParams = field(default_factory=ModelParams)
    gamma: float = None  # None: pick the smallest value passing the sufficient check, +5%
    tau: float = 0.01
    beta: float = 5.0
    max_iters: int = 3000
    tol: float = 9e-5
    projection: str = "paper"

    def __post_init__(self):
        for name in ("tau", "beta", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class FsPdhgParams:
    model: ModelParams = field(default_factory=ModelParams)
    rho: float = 0.003
    sigma1: float = 0.001
    sigma2: float = 300.0
    tau: float = 0.01
    beta: float = 50.0
    max_iters: int = 3000
    tol: float = 9e-5
    projection: str = "paper"

    def __post_init__(self):
        for name in ("rho", "sigma1", "sigma2", "tau", "beta", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolverState:
    u: np.ndarray
    q: np.ndarray
    p: np.ndarray
    u_prev: np.ndarray = None
    ubar: np.ndarray = None
    v: np.ndarray = None
    v_prev: np.ndarray = None
    Lam: np.ndarray = None
    Pu: np.ndarray = None
    Pu_prev: np.ndarray = None
    k: int = 0

    @classmethod
    def zeros(cls, image_shape, sino_shape=None):
        s = cls(u=np.zeros(image_shape), q=np.zeros((2,) + tuple(image_shape)),
                p=np.zeros((2,) + tuple(image_shape)))
        s.u_prev = s.u.copy()
        if sino_shape is not None:
            s.v = np.zeros(sino_shape)
            s.v_prev = s.v.copy()
            s.Lam = np.zeros(sino_shape)
        return s


@dataclass
class ConvergenceRecord:
    energy: list = field(default_factory=list)
    rel_err: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, energy, rel_err, fidelity, wall_ms):
        self.energy.append(float(energy))
        self.rel_err.append(float(rel_err))
        self.fidelity.append(float(fidelity))
        self.wall_ms.append(float(wall_ms))

    def __len__(self):
        return len(self.energy)

    @property
    def iterations(self):
        return len(self.energy)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "energy", "rel_err", "fidelity", "wall_ms"])
            for k in range(len(self)):
                w.writerow([k + 1, repr(self.energy[k]), repr(self.rel_err[k]),
                            repr(self.fidelity[k]), repr(self.wall_ms[k])])


# ---------------------------------------------------------------- conditions

def default_gamma(model, opnorm, K=SQRT8):
    """``1.05 * (opnorm/lam + 2K^2/eta + K alpha)``; the eta term is dropped when eta = 0."""
    extra = 2 * K * K / model.eta if model.eta > 0 else 0.0
    return 1.05 * (opnorm / model.lam + extra + K * model.alpha)


def check_conditions_pre(pp, K, opnorm, gamma=None):
    m = pp.model
    gamma = pp.gamma if gamma is None else gamma
    if gamma is None:
        gamma = default_gamma(m, opnorm, K)
    a_val = 2 - K * pp.tau * m.alpha
    if m.eta > 0:
        need = 2 * K * K / m.eta + K * m.alpha
        b_val = gamma - opnorm / m.lam - need
        b_ok = b_val > 0
    else:
        need, b_val, b_ok = math.inf, -math.inf, False
    return {
        "a_step": {"value": a_val, "ok": bool(a_val > 0)},
        "b_metric": {"value": b_val, "required": need, "ok": bool(b_ok)},
        "c_psd": {"value": gamma * m.lam - opnorm, "ok": bool(gamma * m.lam > opnorm)},
        "gamma": gamma,
        "K": K,
        "opnorm": opnorm,
    }


def check_conditions_fs(fp, K, w_max):
    m = fp.model
    c1 = 2 - K * fp.tau * m.alpha
    denom = 1 - K * m.alpha
    if denom <= 0:
        c2 = {"value": None, "ok": "inapplicable as written"}
    else:
        lhs, rhs = K * fp.sigma1 / denom, m.eta / (2 * K)
        c2 = {"value": lhs - rhs, "ok": bool(lhs < rhs)}
    c3 = 1 / (2 * fp.sigma2) - (4 / fp.rho) * (w_max ** 4 / m.lam ** 2 + 1 / fp.sigma2 ** 2)
    return {
        "clause1": {"value": c1, "ok": bool(c1 > 0)},
        "clause2": c2,
        "clause3": {"value": c3, "ok": bool(c3 > 0)},
        "K": K,
        "w_max": w_max,
    }


# ------------------------------------------------------------------- updates

def update_u_pre(state, pp, W, Y, op, gamma, rhs=None):
    """Preconditioned u-step: ``Proj(z / gamma; U)`` with
    ``z = (1/lam) P^T(W^2 Y) + div(p + alpha q) + M u``.
    """
    m = pp.model
    W2 = W * W
    if rhs is None:
        rhs = op.adjoint(W2 * Y) / m.lam
    Pu = state.Pu if state.Pu is not None else op.forward(state.u)
    Mu = gamma * state.u - op.adjoint(W2 * Pu) / m.lam
    z = rhs + div(state.p + m.alpha * state.q) + Mu
    return proj_box(z / gamma, m.c)


def update_q(q, ubar, tau, alpha):
    return proj_disk(q - tau * alpha * grad(ubar))


def update_p(p, ubar, beta, eta, mode="paper"):
    return proj_box_pair((p + beta * grad(ubar)) / (1 + eta * beta), mode)


def update_lambda(Lam, v, Pu, rho):
    return Lam + rho * (v - Pu)


def update_u_fs(state, fp, op, Lam_new):
    m = fp.model
    z = state.u + fp.sigma1 * div(state.p + m.alpha * state.q) + fp.sigma1 * op.adjoint(Lam_new)
    return proj_box(z, m.c)


def update_v(v, Lam_new, W, Y, sigma2, lam):
    W2 = W * W
    return (v / sigma2 - Lam_new + Y * W2 / lam) / (1 / sigma2 + W2 / lam)


# ------------------------------------------------------------------ energies

def _check_feasible(u, q, p, c):
    if u.min() < -FEAS_TOL or u.max() > c + FEAS_TOL:
        raise ValueError("u outside the box [0, c]: energy is +inf")
    if np.sqrt(q[0] ** 2 + q[1] ** 2).max(initial=0.0) > 1 + FEAS_TOL:
        raise ValueError("q outside the unit-disk set: energy is +inf")
    if np.abs(p).max(initial=0.0) > 1 + FEAS_TOL:
        raise ValueError("p outside [-1, 1]^2: energy is -inf")


def fidelity(Pu, W, Y, lam):
    r = W * (Pu - Y)
    return float(np.vdot(r, r)) / (2 * lam)


def energy_L_lambda(state, pp, W, Y, op, gamma):
    """Auxiliary energy of the preconditioned scheme at ``(u, q, p, u_prev)``."""
    m = pp.model
    u, q, p, ut = state.u, state.q, state.p, state.u_prev
    _check_feasible(u, q, p, m.c)
    Pu = state.Pu if state.Pu is not None else op.forward(u)
    Put = state.Pu_prev if state.Pu_prev is not None else op.forward(ut)
    d = u - ut
    Wd = W * (Pu - Put)
    metric = gamma * float(np.vdot(d, d)) - float(np.vdot(Wd, Wd)) / m.lam
    return (fidelity(Pu, W, Y, m.lam)
            - 0.5 * m.eta * float(np.vdot(p, p))
            + float(np.vdot(grad(u), p + m.alpha * q))
            + 0.5 * metric)


def energy_L_sigma(state, fp, W, Y, op):
    """Auxiliary energy of the fully split scheme at ``(Lam, u, v, q, p, u_prev, v_prev)``."""
    m = fp.model
    u, q, p = state.u, state.q, state.p
    _check_feasible(u, q, p, m.c)
    Pu = state.Pu if state.Pu is not None else op.forward(u)
    du = u - state.u_prev
    dv = state.v - state.v_prev
    return (fidelity(state.v, W, Y, m.lam)
            - 0.5 * m.eta * float(np.vdot(p, p))
            + float(np.vdot(grad(u), p + m.alpha * q))
            + float(np.vdot(state.Lam, state.v - Pu))
            + float(np.vdot(du, du)) / (2 * fp.sigma1)
            + float(np.vdot(dv, dv)) / (2 * fp.sigma2))


# ------------------------------------------------------------------- drivers

def _rel_change(new, old, others=()):
    """Successive relative change of u.

    ``0/0`` counts as converged only when every other block in ``others``
    (pairs of new/old arrays) is unchanged too, i.e. at a genuine fixed point.
    """
    num = np.linalg.norm(new - old)
    den = np.linalg.norm(new)
    if den == 0:
        if num != 0:
            return math.inf
        return 0.0 if all(np.array_equal(a, b) for a, b in others) else math.inf
    return float(num / den)


class _Guard:
    """Aborts on NaN or on a sustained energy increase (>1% for 10 steps)."""

    def __init__(self, ratio=0.01, patience=10):
        self.ratio, self.patience = ratio, patience
        self.last = None
        self.count = 0

    def __call__(self, energy, k):
        if not math.isfinite(energy):
            raise SolverDivergence(f"non-finite energy at iteration {k}")
        if self.last is not None and energy > self.last + self.ratio * abs(self.last):
            self.count += 1
            if self.count >= self.patience:
                raise SolverDivergence(
                    f"energy rose by more than {self.ratio:.0%} for {self.patience} "
                    f"consecutive iterations (iteration {k}, energy {energy:.6g})")
        else:
            self.count = 0
        self.last = energy


def _initial_image(init, op, Y):
    if isinstance(init, np.ndarray):
        return np.array(init, dtype=float), "array"
    if init == "zero":
        return np.zeros(op.image_shape), "zero"
    if init == "fbp":
        geom = getattr(op, "geometry", None)
        if geom is None:
            return np.zeros(op.image_shape), "zero"
        from .projector import fbp
        return fbp(Y, geom, op.image_shape[0]), "fbp"
    raise ValueError(f"unknown initialisation {init!r}")


def run_pre_pdhg(Y, W, op, pp, init="zero", gamma=None, opnorm=None, K=SQRT8, callback=None):
    """Preconditioned PDHG. Returns ``(u, record)``.

    ``gamma`` defaults to :func:`default_gamma` using ``opnorm``, the largest
    eigenvalue of ``P^T W^2 P`` (estimated by power iteration if not given).
    The initial image is clipped to the box.
    """
    from .projector import weighted_op_norm

    m = pp.model
    Y = np.asarray(Y, dtype=float)
    W = np.asarray(W, dtype=float)
    if Y.shape != op.sino_shape or W.shape != op.sino_shape:
        raise ValueError("Y and W must have the sinogram shape of the operator")
    gamma = gamma if gamma is not None else pp.gamma
    if gamma is None:
        if opnorm is None:
            opnorm = weighted_op_norm(op, W, iters=100)
        gamma = default_gamma(m, opnorm, K)

    u0, init_name = _initial_image(init, op, Y)
    state = SolverState.zeros(op.image_shape)
    state.u = proj_box(u0, m.c)
    state.Pu = op.forward(state.u)
    rhs = op.adjoint(W * W * Y) / m.lam

    rec = ConvergenceRecord(meta={"algorithm": "pre", "init": init_name, "gamma": gamma,
                                  "opnorm": opnorm, "converged": False})
    guard = _Guard()
    t0 = time.perf_counter()
    for k in range(pp.max_iters):
        u_new = update_u_pre(state, pp, W, Y, op, gamma, rhs=rhs)
        ubar = 2 * u_new - state.u
        q_new = update_q(state.q, ubar, pp.tau, m.alpha)
        p_new = update_p(state.p, ubar, pp.beta, m.eta, pp.projection)
        Pu_new = op.forward(u_new)
        rel = _rel_change(u_new, state.u, ((q_new, state.q), (p_new, state.p)))
        state = SolverState(u=u_new, q=q_new, p=p_new, u_prev=state.u, ubar=ubar,
                            Pu=Pu_new, Pu_prev=state.Pu, k=k + 1)
        energy = energy_L_lambda(state, pp, W, Y, op, gamma)
        rec.append(energy, rel, fidelity(Pu_new, W, Y, m.lam), 1e3 * (time.perf_counter() - t0))
        if callback is not None:
            callback(state)
        guard(energy, k + 1)
        if rel <= pp.tol:
            rec.meta["converged"] = True
            break
    rec.meta["iterations"] = len(rec)
    rec.meta["final_state"] = state
    return state.u, rec


def run_fs_pdhg(Y, W, op, fp, init="zero", callback=None):
    """Fully split PDHG. Returns ``(u, record)``.

    All variables start at zero unless ``init`` overrides ``u``. The record's
    meta holds the largest ``|v^k|`` seen, which should stay bounded.
    """
    m = fp.model
    Y = np.asarray(Y, dtype=float)
    W = np.asarray(W, dtype=float)
    if Y.shape != op.sino_shape or W.shape != op.sino_shape:
        raise ValueError("Y and W must have the sinogram shape of the operator")
    u0, init_name = _initial_image(init, op, Y)
    state = SolverState.zeros(op.image_shape, op.sino_shape)
    state.u = proj_box(u0, m.c)
    state.u_prev = state.u.copy()
    state.Pu = op.forward(state.u)

    rec = ConvergenceRecord(meta={"algorithm": "fs", "init": init_name, "converged": False})
    guard = _Guard()
    vmax = 0.0
    t0 = time.perf_counter()
    for k in range(fp.max_iters):
        Lam_new = update_lambda(state.Lam, state.v, state.Pu, fp.rho)
        u_new = update_u_fs(state, fp, op, Lam_new)
        ubar = 2 * u_new - state.u
        v_new = update_v(state.v, Lam_new, W, Y, fp.sigma2, m.lam)
        q_new = update_q(state.q, ubar, fp.tau, m.alpha)
        p_new = update_p(state.p, ubar, fp.beta, m.eta, fp.projection)
        Pu_new = op.forward(u_new)
        rel = _rel_change(u_new, state.u, ((q_new, state.q), (p_new, state.p),
                                           (v_new, state.v), (Lam_new, state.Lam)))
        state = SolverState(u=u_new, q=q_new, p=p_new, u_prev=state.u, ubar=ubar,
                            v=v_new, v_prev=state.v, Lam=Lam_new, Pu=Pu_new,
                            Pu_prev=state.Pu, k=k + 1)
        if not np.all(np.isfinite(u_new)) or not np.all(np.isfinite(v_new)):
            raise SolverDivergence(f"NaN/inf in iterates at iteration {k + 1}")
        vmax = max(vmax, float(np.linalg.norm(v_new)))
        energy = energy_L_sigma(state, fp, W, Y, op)
        rec.append(energy, rel, fidelity(Pu_new, W, Y, m.lam), 1e3 * (time.perf_counter() - t0))
        if callback is not None:
            callback(state)
        guard(energy, k + 1)
        if rel <= fp.tol:
            rec.meta["converged"] = True
            break
    rec.meta["iterations"] = len(rec)
    rec.meta["max_v_norm"] = vmax
    rec.meta["final_state"] = state
    return state.u, rec


def kkt_residuals(state, fp, W, Y, op):
    """Relative fixed-point residual of each block of the split saddle system."""
    m = fp.model

    def rel(a, b):
        return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-30))

    Pu = op.forward(state.u)
    u_fix = proj_box(state.u + fp.sigma1 * (div(state.p + m.alpha * state.q) + op.adjoint(state.Lam)), m.c)
    v_fix = update_v(state.v, state.Lam, W, Y, fp.sigma2, m.lam)
    g = grad(state.u)
    q_fix = proj_disk(state.q - fp.tau * m.alpha * g)
    p_fix = proj_box_pair((state.p + fp.beta * g) / (1 + m.eta * fp.beta), fp.projection)
    return {
        "u": rel(state.u, u_fix),
        "v": rel(state.v, v_fix),
        "q": rel(state.q, q_fix),
        "p": rel(state.p, p_fix),
        "feasibility": rel(state.v, Pu),
    }


# ------------------------------------------------------------------- presets

PRESETS = {
    "proposed": ({}, "adaptive"),  # alpha comes from the config (default 0.75)
    "tv_mar": ({"alpha": 0.0, "eta": 0.0}, "binary"),
    "aitv_binary": ({"alpha": 0.75}, "binary"),
}


def preset(name):
    """Model overrides and weight source (``"adaptive"`` or ``"binary"``) for a named model."""
    try:
        overrides, weight = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return dict(overrides), weight


def apply_preset(params, name):
    overrides, weight = preset(name)
    return replace(params, model=replace(params.model, **overrides)), weight


def params_dict(params):
    return asdict(params)
