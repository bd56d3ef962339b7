"""Optimizers for the two inverse problems.

Parametric recovery runs dense BFGS with a strong-Wolfe line search from
multiple Latin-hypercube starts inside the compact parameter box (iterates are
clipped to the box; curvature pairs are skipped when the projection bends the
step or the active set changes).  The free-yank problem runs limited-memory
BFGS over the per-interval, per-simplex coefficient array starting from zero.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FlowBreakdownError, SolverConfig, objective_gradient
from .kernel import FactorizationError, ValidationError
from .varifold import VarifoldConfig
from .yank import FreeYank, PotentialParams


@dataclass
class OptimizerConfig:
    max_iters: int = 500
    grad_tol: float = 1e-8
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    lbfgs_memory: int = 10
    n_starts: int = 8
    theta_box: np.ndarray | None = None
    rng_seed: int = 0
    n_workers: int = 1

    def __post_init__(self):
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValidationError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.theta_box is not None:
            self.theta_box = np.asarray(self.theta_box, dtype=float)
            if self.theta_box.ndim != 2 or self.theta_box.shape[1] != 2:
                raise ValidationError("theta_box must be an (m, 2) array of [lo, hi]")
            if np.any(self.theta_box[:, 0] >= self.theta_box[:, 1]):
                raise ValidationError("theta_box must satisfy lo < hi per coordinate")


@dataclass
class OptimizeResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    grad_norm: float
    iters: int
    status: str
    trace: list
    n_evals: int


def latin_hypercube(box, n, seed):
    """n stratified samples of the box: per coordinate, one sample in each of
    the n equal-width strata.  Deterministic for a fixed seed."""
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[0] == 0 or box.shape[1] != 2:
        raise ValidationError("box must be a nonempty (m, 2) array")
    if np.any(box[:, 0] >= box[:, 1]):
        raise ValidationError("box must satisfy lo < hi per coordinate")
    if n < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(seed)
    m = box.shape[0]
    pts = np.empty((n, m))
    for j in range(m):
        strata = (rng.permutation(n) + rng.uniform(size=n)) / n
        pts[:, j] = box[j, 0] + strata * (box[j, 1] - box[j, 0])
    return pts


# ---------------------------------------------------------------------------
# strong Wolfe line search (bracket + zoom with bisection/cubic steps)
# ---------------------------------------------------------------------------

def _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi):
    span = a_hi - a_lo
    if span == 0:
        return a_lo
    # minimizer of the quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi)
    denom = 2.0 * (f_hi - f_lo - d_lo * span)
    if denom == 0 or not np.isfinite(denom):
        return 0.5 * (a_lo + a_hi)
    step = a_lo - d_lo * span * span / denom
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    margin = 0.1 * (hi - lo)
    if not np.isfinite(step) or step < lo + margin or step > hi - margin:
        return 0.5 * (a_lo + a_hi)
    return step


def strong_wolfe(fg, x, f0, g0, direction, c1, c2, max_evals=25, alpha0=1.0):
    """Return (alpha, f, g, evals) satisfying the strong Wolfe conditions, or
    None when no admissible step was found (non-finite or non-descent)."""
    dphi0 = float(np.dot(g0.ravel(), direction.ravel()))
    if not np.isfinite(dphi0) or dphi0 >= 0:
        return None
    evals = 0

    def phi(alpha):
        nonlocal evals
        evals += 1
        f, g = fg(x + alpha * direction)
        return f, g, float(np.dot(np.asarray(g).ravel(), direction.ravel()))

    def zoom(a_lo, f_lo, d_lo, a_hi, f_hi):
        for _ in range(max_evals - evals):
            a_j = _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi)
            f_j, g_j, d_j = phi(a_j)
            if not np.isfinite(f_j) or f_j > f0 + c1 * a_j * dphi0 or f_j >= f_lo:
                a_hi, f_hi = a_j, f_j
            else:
                if abs(d_j) <= -c2 * dphi0:
                    return a_j, f_j, g_j
                if d_j * (a_hi - a_lo) >= 0:
                    a_hi, f_hi = a_lo, f_lo
                a_lo, f_lo, d_lo = a_j, f_j, d_j
            if abs(a_hi - a_lo) < 1e-16:
                break
        return None

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    alpha = alpha0
    first = True
    while evals < max_evals:
        f_a, g_a, d_a = phi(alpha)
        if not np.isfinite(f_a):
            # back off into the finite region and let zoom refine
            alpha *= 0.5
            if alpha < 1e-16:
                return None
            continue
        if f_a > f0 + c1 * alpha * dphi0 or (not first and f_a >= f_prev):
            out = zoom(a_prev, f_prev, d_prev, alpha, f_a)
            return (out[0], out[1], out[2], evals) if out else None
        if abs(d_a) <= -c2 * dphi0:
            return alpha, f_a, g_a, evals
        if d_a >= 0:
            out = zoom(alpha, f_a, d_a, a_prev, f_prev)
            return (out[0], out[1], out[2], evals) if out else None
        a_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha = 2.0 * alpha
        first = False
    return None


# ---------------------------------------------------------------------------
# BFGS (dense, box-projected) and L-BFGS
# ---------------------------------------------------------------------------

def _project(x, box):
    return x if box is None else np.clip(x, box[:, 0], box[:, 1])


def _projected_gradient(x, g, box, tol=1e-12):
    if box is None:
        return g
    pg = g.copy()
    at_lo = (x <= box[:, 0] + tol) & (g > 0)
    at_hi = (x >= box[:, 1] - tol) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def _active_set(x, box, tol=1e-12):
    if box is None:
        return None
    return (x <= box[:, 0] + tol).astype(int) - (x >= box[:, 1] - tol).astype(int)


def minimize_bfgs(fg, x0, cfg: OptimizerConfig, box=None) -> OptimizeResult:
    """Dense BFGS with strong-Wolfe line search and box projection of iterates.

    The trace of accepted objective values is non-increasing.  Terminates on
    the (projected) gradient norm, the iteration budget, or a failed line
    search (degraded status, best-so-far returned).
    """
    x = _project(np.asarray(x0, dtype=float).copy(), box)
    f, g = fg(x)
    n_evals = 1
    if not np.isfinite(f):
        raise ValidationError("objective is not finite at the starting point")
    trace = [f]
    m = x.size
    h_inv = np.eye(m)
    pg = _projected_gradient(x, g, box)
    if np.linalg.norm(pg) <= cfg.grad_tol:
        return OptimizeResult(x, f, g, float(np.linalg.norm(pg)), 0,
                              "stationary-start", trace, n_evals)
    status = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        direction = -h_inv @ pg
        if box is not None:
            active = _active_set(x, box)
            direction[(active > 0) & (direction < 0)] = 0.0
            direction[(active < 0) & (direction > 0)] = 0.0
        if float(direction @ pg) >= 0:
            direction = -pg
        ls = strong_wolfe(fg, x, f, g, direction, cfg.wolfe_c1, cfg.wolfe_c2)
        if ls is None:
            status = "line-search-failed"
            break
        alpha, f_new, g_new, evals = ls
        n_evals += evals
        x_trial = x + alpha * direction
        x_new = _project(x_trial, box)
        projected = box is not None and not np.array_equal(x_new, x_trial)
        if projected:
            f_new, g_new = fg(x_new)
            n_evals += 1
            shrink = 0
            while (not np.isfinite(f_new) or f_new > f) and shrink < 30:
                alpha *= 0.5
                x_new = _project(x + alpha * direction, box)
                f_new, g_new = fg(x_new)
                n_evals += 1
                shrink += 1
            if not np.isfinite(f_new) or f_new > f:
                status = "line-search-failed"
                break
        s = x_new - x
        y = g_new - g
        same_active = box is None or np.array_equal(_active_set(x, box), _active_set(x_new, box))
        sy = float(s @ y)
        if not projected and same_active and sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            v_mat = np.eye(m) - rho * np.outer(s, y)
            h_inv = v_mat @ h_inv @ v_mat.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        pg = _projected_gradient(x, g, box)
        if np.linalg.norm(pg) <= cfg.grad_tol:
            status = "converged"
            break
    return OptimizeResult(x, f, g, float(np.linalg.norm(pg)), it, status, trace, n_evals)


def minimize_lbfgs(fg, x0, cfg: OptimizerConfig) -> OptimizeResult:
    """Limited-memory BFGS (two-loop recursion) with strong-Wolfe line search."""
    x = np.asarray(x0, dtype=float).copy()
    f, g = fg(x)
    n_evals = 1
    if not np.isfinite(f):
        raise ValidationError("objective is not finite at the starting point")
    trace = [f]
    if np.linalg.norm(g) <= cfg.grad_tol:
        return OptimizeResult(x, f, g, float(np.linalg.norm(g)), 0,
                              "stationary-start", trace, n_evals)
    s_hist, y_hist, rho_hist = [], [], []
    status = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        direction = -q
        if float(direction @ g) >= 0:
            direction = -g
        ls = strong_wolfe(fg, x, f, g, direction, cfg.wolfe_c1, cfg.wolfe_c2)
        if ls is None:
            status = "line-search-failed"
            break
        alpha, f_new, g_new, evals = ls
        n_evals += evals
        x_new = x + alpha * direction
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.lbfgs_memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if np.linalg.norm(g) <= cfg.grad_tol:
            status = "converged"
            break
    return OptimizeResult(x, f, g, float(np.linalg.norm(g)), it, status, trace, n_evals)


# ---------------------------------------------------------------------------
# the two inverse problems
# ---------------------------------------------------------------------------

@dataclass
class StartResult:
    theta0: np.ndarray
    theta_star: np.ndarray
    f_star: float
    iters: int
    status: str
    trace: list = field(default_factory=list)


@dataclass
class ParametricResult:
    theta_star: np.ndarray
    f_star: float
    best_index: int
    starts: list


def _parametric_closure(mesh, targets, params, solver_cfg, vcfg, radius):
    def fg(theta):
        control = PotentialParams.from_theta(theta, radius)
        try:
            f, grad, _ = objective_gradient(mesh, mesh.vertices, control, params,
                                            solver_cfg, targets, vcfg)
        except (FlowBreakdownError, FactorizationError):
            return np.inf, np.zeros_like(np.asarray(theta, dtype=float))
        return f, grad
    return fg


def _run_parametric_start(args):
    mesh, targets, params, solver_cfg, vcfg, radius, opt_cfg, theta0 = args
    fg = _parametric_closure(mesh, targets, params, solver_cfg, vcfg, radius)
    theta0 = np.asarray(theta0, dtype=float)
    try:
        res = minimize_bfgs(fg, theta0, opt_cfg, box=opt_cfg.theta_box)
    except ValidationError:
        # the flow already breaks down at this start (e.g. an extreme height
        # inverts simplices); record it as failed and let other starts run
        return StartResult(theta0=theta0, theta_star=theta0, f_star=np.inf,
                           iters=0, status="start-not-finite")
    return StartResult(theta0=theta0, theta_star=res.x, f_star=res.f,
                       iters=res.iters, status=res.status, trace=res.trace)


def solve_parametric(mesh, targets, params, solver_cfg: SolverConfig,
                     vcfg: VarifoldConfig, opt_cfg: OptimizerConfig,
                     radius, extra_starts=()) -> ParametricResult:
    """Multistart BFGS over theta = (c, h) inside the configured box.

    Starts are a Latin hypercube sample (plus any extra_starts appended after
    them); runs execute concurrently when n_workers > 1 and the aggregation
    (lowest f, ties by start index) is deterministic either way.
    """
    if opt_cfg.theta_box is None:
        raise ValidationError("solve_parametric requires theta_box")
    if opt_cfg.theta_box.shape[0] != mesh.d + 1:
        raise ValidationError(f"theta_box must have {mesh.d + 1} rows")
    starts = list(latin_hypercube(opt_cfg.theta_box, opt_cfg.n_starts, opt_cfg.rng_seed))
    starts.extend(np.asarray(s, dtype=float) for s in extra_starts)
    jobs = [(mesh, targets, params, solver_cfg, vcfg, radius, opt_cfg, start)
            for start in starts]
    if opt_cfg.n_workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=opt_cfg.n_workers) as pool:
            results = list(pool.map(_run_parametric_start, jobs))
    else:
        results = [_run_parametric_start(job) for job in jobs]
    finite = [i for i, r in enumerate(results) if np.isfinite(r.f_star)]
    if not finite:
        raise FactorizationError("all optimization starts failed")
    best = min(finite, key=lambda i: (results[i].f_star, i))
    return ParametricResult(theta_star=results[best].theta_star,
                            f_star=results[best].f_star,
                            best_index=best, starts=results)


def solve_free(mesh, targets, params, solver_cfg: SolverConfig,
               vcfg: VarifoldConfig, opt_cfg: OptimizerConfig):
    """L-BFGS over the flattened free-yank coefficients, starting from j = 0."""
    shape = (solver_cfg.n_steps, mesh.n_simplices, mesh.d)

    def fg(x):
        control = FreeYank(x.reshape(shape))
        try:
            f, grad, _ = objective_gradient(mesh, mesh.vertices, control, params,
                                            solver_cfg, targets, vcfg)
        except (FlowBreakdownError, FactorizationError):
            return np.inf, np.zeros_like(x)
        return f, grad.ravel()

    res = minimize_lbfgs(fg, np.zeros(int(np.prod(shape))), opt_cfg)
    return FreeYank(res.x.reshape(shape)), res.f, res
