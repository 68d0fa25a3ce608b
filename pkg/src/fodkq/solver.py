"""Constrained least-squares FOD recovery.

The data-fidelity term is minimized by FISTA with projections: the fiber
block onto the positive weighted-l1 ball, the isotropic blocks onto the
positive orthant. The outer loop re-solves with weights derived from a
spatio-angular blur of the previous fiber estimate, progressively
suppressing peaks that are isolated in their neighborhood.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, UsageError
from .forward import FodField, meas_norm2, meas_sub, spectral_norm


@dataclass
class SolverConfig:
    kappa: float = math.inf  # weighted-l1 radius
    gamma: float | None = None  # stepsize; None = 0.95 / (2 ||A||^2)
    inner_tol: float = 1e-5
    inner_max_iter: int = 2000
    reweight_cycles: int = 10
    reweight_tol: float = 1e-3
    tau_floor: float | None = None  # None = 1e-6 * max(1, Var(B1))

    def __post_init__(self):
        if self.kappa < 0:
            raise UsageError("kappa must be nonnegative")
        if self.reweight_cycles < 1:
            raise UsageError("need at least one reweighting cycle")


@dataclass(frozen=True)
class WeightMatrix:
    w: np.ndarray  # (n, N1), strictly positive

    def __post_init__(self):
        if np.any(self.w <= 0):
            raise UsageError("weights must be strictly positive")


@dataclass(frozen=True)
class ReweightState:
    b: np.ndarray | None = None
    tau: float | None = None
    tau_floor: float | None = None
    cycle: int = 0


def project_positive(x):
    """Elementwise projection onto the nonnegative orthant."""
    return np.maximum(x, 0.0)


def _weighted_threshold(xp, wp, kappa):
    """Solve sum_i w_i * max(x_i - theta*w_i, 0) = kappa for theta > 0.

    `xp`, `wp` hold the strictly positive entries only. Exact piecewise
    linear solve over the sorted breakpoints x_i / w_i.
    """
    ratios = xp / wp
    order = np.argsort(ratios)[::-1]
    r = ratios[order]
    wx = (wp * xp)[order]
    w2 = (wp * wp)[order]
    cum_wx = np.cumsum(wx)
    cum_w2 = np.cumsum(w2)
    theta = (cum_wx - kappa) / cum_w2
    # active set = largest prefix whose breakpoint exceeds its theta
    valid = r > theta
    k = int(np.max(np.flatnonzero(valid))) if np.any(valid) else 0
    return max(theta[k], 0.0)


def project_weighted_l1_positive(x, w, kappa):
    """Euclidean projection onto {y >= 0, sum w*y <= kappa}.

    Clips to the orthant first; if the weighted-l1 budget still exceeds
    kappa, shrinks by the exact KKT threshold: y = max(x - theta*w, 0).
    Works elementwise on arrays of any shape; `w` must match `x`.
    """
    if kappa < 0:
        raise UsageError("kappa must be nonnegative")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    z = np.maximum(x, 0.0)
    if kappa == math.inf:
        return z
    mass = float(np.sum(w * z))
    if mass <= kappa:
        return z
    if kappa == 0.0:
        return np.zeros_like(z)
    pos = z > 0
    theta = _weighted_threshold(x[pos], w[pos], kappa)
    return np.maximum(x - theta * w, 0.0)


@dataclass(frozen=True)
class NeighborhoodIndex:
    """Spatio-angular adjacency for the blur of the fiber block.

    `spatial` is the (N1, N1) 0/1 matrix of white-matter voxels sharing a
    face, edge or vertex (self included); `angular` the (n, n) cone
    adjacency over dictionary directions.
    """

    spatial: np.ndarray
    angular: "object"  # AngularNeighborhood
    spatial_sizes: np.ndarray  # |N(v)| per WM voxel


def build_neighborhood_index(layout, volume_shape, angular):
    """26-connectivity among white-matter voxels plus the angular cones."""
    nx, ny, nz = volume_shape
    wm = layout.wm_voxels
    n1 = len(wm)
    pos = {int(v): i for i, v in enumerate(wm)}
    coords = np.stack(np.unravel_index(wm, (nx, ny, nz)), axis=1)
    spatial = np.zeros((n1, n1))
    offsets = [(di, dj, dk) for di in (-1, 0, 1) for dj in (-1, 0, 1)
               for dk in (-1, 0, 1)]
    for i, (ci, cj, ck) in enumerate(coords):
        for di, dj, dk in offsets:
            ni, nj, nk = ci + di, cj + dj, ck + dk
            if 0 <= ni < nx and 0 <= nj < ny and 0 <= nk < nz:
                flat = int(np.ravel_multi_index((ni, nj, nk), (nx, ny, nz)))
                j = pos.get(flat)
                if j is not None:
                    spatial[i, j] = 1.0
    return NeighborhoodIndex(spatial, angular, spatial.sum(axis=1))


def compute_blur(s1, idx):
    """Spatio-angular blur of |s1|: sum over neighbor directions, average
    over neighbor voxels."""
    ang = idx.angular.adjacency.astype(float)
    sp = idx.spatial / idx.spatial_sizes[None, :]
    return ang @ np.abs(s1) @ sp


def update_weights(state, b_new, cfg):
    """Weights 1/(tau + B) with the decaying stability parameter tau.

    The first call sets tau to the variance of the blur entries (floored);
    later calls divide tau by 10 down to the floor.
    """
    if np.any(b_new < 0):
        raise UsageError("blur must be nonnegative")
    if state.tau is None:
        var = float(np.var(b_new))
        floor = cfg.tau_floor if cfg.tau_floor is not None \
            else 1e-6 * max(1.0, var)
        tau = max(var, floor)
    else:
        floor = state.tau_floor
        tau = max(state.tau / 10.0, floor)
    w = 1.0 / (tau + b_new)
    new_state = ReweightState(b=b_new, tau=tau, tau_floor=floor,
                              cycle=state.cycle + 1)
    return WeightMatrix(w), new_state


class ReconstructionProblem:
    """Measurement operator plus data: objective and gradient."""

    def __init__(self, operator, data):
        self.operator = operator
        self.data = data

    @property
    def layout(self):
        return self.operator.layout

    def residual(self, field):
        return meas_sub(self.operator.apply(field), self.data)

    def objective(self, field):
        return meas_norm2(self.residual(field))

    def gradient(self, field):
        """Gradient of ||A(Z(S)) - Y||^2, including the factor 2."""
        return 2.0 * self.operator.adjoint(self.residual(field))


def _project_field(field, w, kappa):
    return FodField(project_weighted_l1_positive(field.s1, w, kappa),
                    project_positive(field.s2),
                    project_positive(field.s3),
                    field.layout)


def default_stepsize(operator, seed=0):
    """0.95 / (2 ||A||^2): the Lipschitz bound for the factor-2 gradient,
    with a safety margin against power-iteration underestimates."""
    est = spectral_norm(operator.apply, operator.adjoint,
                        operator.zeros_field(), tol=1e-4, max_iter=300,
                        seed=seed)
    if est.value == 0:
        raise NumericalError("operator has zero norm")
    return 0.95 / (2.0 * est.value**2)


def fista_solve(problem, w, cfg, init, gamma=None):
    """Accelerated projected-gradient descent on the data-fidelity term.

    Momentum follows the standard accelerated scheme; when the objective
    increases the momentum is reset and the step recomputed from the last
    accepted iterate, which keeps the objective non-increasing. Stops
    when the relative iterate change drops below cfg.inner_tol.

    Returns (field, info dict).
    """
    if gamma is None:
        gamma = cfg.gamma
    if gamma is None or gamma <= 0:
        raise UsageError("stepsize gamma must be set and positive")
    ww = w.w if isinstance(w, WeightMatrix) else w
    x = _project_field(init, ww, cfg.kappa)
    y = x.copy()
    f_x = problem.objective(x)
    zeta = 1.0
    iters = 0
    for j in range(1, cfg.inner_max_iter + 1):
        iters = j
        cand = _project_field(y - gamma * problem.gradient(y), ww, cfg.kappa)
        if not cand.isfinite():
            raise NumericalError("divergence: check stepsize")
        f_cand = problem.objective(cand)
        if f_cand > f_x:
            # restart: plain projected-gradient step from the last accepted
            # iterate cannot increase the objective for gamma <= 1/L
            zeta = 1.0
            cand = _project_field(x - gamma * problem.gradient(x), ww,
                                  cfg.kappa)
            if not cand.isfinite():
                raise NumericalError("divergence: check stepsize")
            f_cand = problem.objective(cand)
        zeta_next = (1.0 + math.sqrt(1.0 + 4.0 * zeta**2)) / 2.0
        y = cand + ((zeta - 1.0) / zeta_next) * (cand - x)
        step = (cand - x).norm()
        ref = x.norm()
        x, f_x, zeta = cand, f_cand, zeta_next
        if step < cfg.inner_tol * ref:
            break
    return x, {"iterations": iters, "objective": f_x}


def reweighted_solve(problem, cfg, nbh, seed=0, init=None, log_cb=None):
    """Sequence of weighted solves that mimics an l0 penalty.

    Starts from unit weights; each cycle warm-starts from the previous
    solution, blurs the fiber block over its spatio-angular neighborhood
    and reweights. Stops early when successive fiber estimates differ by
    less than cfg.reweight_tol in relative l2 norm.
    """
    op = problem.operator
    gamma = cfg.gamma if cfg.gamma is not None else default_stepsize(op, seed)
    field = init.copy() if init is not None else op.zeros_field()
    w = WeightMatrix(np.ones_like(field.s1))
    state = ReweightState()
    prev_s1 = field.s1.copy()
    for t in range(cfg.reweight_cycles):
        field, info = fista_solve(problem, w, cfg, field, gamma=gamma)
        blur = compute_blur(field.s1, nbh)
        w, state = update_weights(state, blur, cfg)
        if log_cb is not None:
            log_cb({
                "cycle": t,
                "inner_iterations": info["iterations"],
                "objective": info["objective"],
                "s1_l1": float(np.abs(field.s1).sum()),
                "tau": state.tau,
            })
        diff = float(np.linalg.norm(field.s1 - prev_s1))
        if diff < cfg.reweight_tol * float(np.linalg.norm(field.s1)):
            break
        prev_s1 = field.s1.copy()
    return field
