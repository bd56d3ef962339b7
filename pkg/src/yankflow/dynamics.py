"""Forward discrete flow, backward costate recursion, objective and gradient.

Forward:  q_{k+1} = q_k + dt * v_k with v_k = (omega K_{q_k}^-1 + A_{q_k})^-1 j_k
(explicit Euler, dt = T / n_steps).  The costate is the exact adjoint of that
recursion: p_N = -d rho/dq(T) and

    p_k = p_{k+1} + dt * d/dq_k [ p_{k+1}^T v_k ]          (parametric)
    p_k = p_{k+1} + dt * d/dq_k [ p_{k+1}^T v_k - j_k^T v_k ]   (free yank,
          whose objective carries the running cost sum_k dt * (j_k | v_k))

with d/dq (p^T v) expanded as omega (K^-1 b)^T (dK/dq) (K^-1 v)
- b^T (dA/dq) v + b^T (dj/dq), b = (omega K^-1 + A)^-1 p.  Gradients of the
objective with respect to the control are assembled from the same solves, so
the returned gradient is the exact derivative of the discrete objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .elasticity import ElasticParams, _Geometry, assemble_operator, shape_derivative
from .kernel import (
    FactorizationError,
    KernelConfig,
    ValidationError,
    kernel_matrix,
    kernel_shape_term,
)
from .mesh import LayeredMesh, check_nondegenerate
from .varifold import VarifoldConfig, total_discrepancy_gradient
from .yank import (
    FreeYank,
    PotentialParams,
    dq_free_work,
    dq_work,
    dtheta_work,
    free_work_form,
    free_yank_covector,
    simplex_field_means,
    yank_covector,
)


class FlowBreakdownError(RuntimeError):
    """A simplex degenerated or inverted during the flow."""

    def __init__(self, step, simplex):
        super().__init__(f"flow breakdown at step {step}: simplex {simplex} degenerated or inverted")
        self.step = step
        self.simplex = simplex


@dataclass
class SolverConfig:
    """Regularization weight, step count, final time, and kernel settings."""

    omega: float = 0.1
    n_steps: int = 10
    T: float = 1.0
    kernel: KernelConfig = field(default_factory=lambda: KernelConfig(sigma=0.2))

    def __post_init__(self):
        if not self.omega > 0:
            raise ValidationError(f"omega must be positive, got {self.omega}")
        if self.n_steps < 1:
            raise ValidationError(f"need at least one time step, got {self.n_steps}")
        if not self.T > 0:
            raise ValidationError(f"final time must be positive, got {self.T}")

    @property
    def dt(self):
        return self.T / self.n_steps


@dataclass
class StepCache:
    """Kernel matrix and factorizations of one velocity solve, reused by the
    adjoint."""

    kmat: object
    chol_m: tuple
    j: np.ndarray
    v: np.ndarray

    @property
    def chol_k(self):
        return self.kmat.chol()


@dataclass
class Trajectory:
    """Discrete flow states q_0..q_N, velocities v_0..v_{N-1}, solve caches."""

    states: list
    velocities: list
    caches: list
    dt: float

    @property
    def n_steps(self):
        return len(self.velocities)

    @property
    def final(self):
        return self.states[-1]


@dataclass
class Costate:
    """Adjoint covectors p_0..p_N (p_N = -d rho / d q(T))."""

    p: list


def control_covector(mesh, q, control, step):
    if isinstance(control, PotentialParams):
        return yank_covector(mesh, q, control)
    if isinstance(control, FreeYank):
        return free_yank_covector(mesh, q, control.coefficients[step])
    raise ValidationError(f"unknown control type {type(control).__name__}")


def _factor_velocity_operator(mesh, q, params, cfg):
    """Kernel factor and the factor of M = omega K^-1 + A at positions q."""
    kmat = kernel_matrix(q, cfg.kernel)
    a_mat = assemble_operator(mesh, q, params)
    d = mesh.d
    m = a_mat
    kinv = cfg.omega * kmat.inverse()
    for axis in range(d):
        m[axis::d, axis::d] += kinv
    m = 0.5 * (m + m.T)
    try:
        chol_m = cho_factor(m, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("velocity operator is not SPD") from exc
    return kmat, chol_m


def step_velocity(mesh: LayeredMesh, q, control, params: ElasticParams,
                  cfg: SolverConfig, step=0):
    """Assemble K_q, A_q and the control covector, then solve for the velocity."""
    q = np.asarray(q, dtype=float)
    try:
        kmat, chol_m = _factor_velocity_operator(mesh, q, params, cfg)
        j = control_covector(mesh, q, control, step)
    except (FactorizationError, ValidationError) as exc:
        raise type(exc)(f"step {step}: {exc}") from exc
    v = cho_solve(chol_m, j.ravel()).reshape(q.shape)
    cache = StepCache(kmat=kmat, chol_m=chol_m, j=j, v=v)
    return v, cache


def forward_flow(mesh: LayeredMesh, q0, control, params: ElasticParams,
                 cfg: SolverConfig) -> Trajectory:
    """n_steps explicit-Euler steps; every intermediate mesh is validated."""
    q = np.asarray(q0, dtype=float).copy()
    states = [q.copy()]
    velocities = []
    caches = []
    for k in range(cfg.n_steps):
        bad = check_nondegenerate(q, mesh.simplices, mesh.orientation)
        if bad >= 0:
            raise FlowBreakdownError(k, bad)
        v, cache = step_velocity(mesh, q, control, params, cfg, step=k)
        velocities.append(v)
        caches.append(cache)
        q = q + cfg.dt * v
        states.append(q.copy())
    bad = check_nondegenerate(q, mesh.simplices, mesh.orientation)
    if bad >= 0:
        raise FlowBreakdownError(cfg.n_steps, bad)
    return Trajectory(states=states, velocities=velocities, caches=caches, dt=cfg.dt)


def _dq_control_work(mesh, q, control, step, w):
    if isinstance(control, PotentialParams):
        return dq_work(mesh, q, control, w)
    return dq_free_work(mesh, q, control.coefficients[step], w)


def backward_costate(mesh: LayeredMesh, traj: Trajectory, control, params: ElasticParams,
                     cfg: SolverConfig, grad_rho):
    """Exact discrete adjoint of the forward recursion.

    Returns the costate and the per-step solves b_k = M_k^-1 p_{k+1} needed by
    the control gradient.
    """
    n = traj.n_steps
    if len(traj.caches) != n:
        raise RuntimeError("trajectory caches are missing or inconsistent")
    p = [None] * (n + 1)
    p[n] = -np.asarray(grad_rho, dtype=float)
    betas = [None] * n
    free = isinstance(control, FreeYank)
    for k in range(n - 1, -1, -1):
        cache = traj.caches[k]
        q = traj.states[k]
        v = cache.v
        beta = cho_solve(cache.chol_m, p[k + 1].ravel()).reshape(q.shape)
        betas[k] = beta
        kinv_beta = cho_solve(cache.chol_k, beta)
        kinv_v = cho_solve(cache.chol_k, v)
        term = cfg.omega * kernel_shape_term(q, cfg.kernel, kinv_beta, kinv_v)
        term = term - shape_derivative(mesh, q, params, beta, v)
        term = term + _dq_control_work(mesh, q, control, k, beta)
        if free:
            run = 2.0 * _dq_control_work(mesh, q, control, k, v)
            run = run + cfg.omega * kernel_shape_term(q, cfg.kernel, kinv_v, kinv_v)
            run = run - shape_derivative(mesh, q, params, v, v)
            term = term - run
        p[k] = p[k + 1] + cfg.dt * term
    return Costate(p=p), betas


def objective_gradient(mesh: LayeredMesh, q0, control, params: ElasticParams,
                       cfg: SolverConfig, targets: dict, vcfg: VarifoldConfig):
    """Objective value and its exact gradient with respect to the control.

    Parametric: f = sum of per-layer discrepancies at time T; gradient is the
    (d+1)-vector in (c, h).  Free yank: f additionally carries the running
    cost sum_k dt*(j_k | v_k); gradient has the coefficient shape (steps,
    simplices, d).
    """
    traj = forward_flow(mesh, q0, control, params, cfg)
    rho, grad_rho = total_discrepancy_gradient(mesh, traj.final, targets, vcfg)
    f = rho
    free = isinstance(control, FreeYank)
    if free:
        for k in range(traj.n_steps):
            f += cfg.dt * float(np.sum(traj.caches[k].j * traj.velocities[k]))
    costate, betas = backward_costate(mesh, traj, control, params, cfg, grad_rho)
    if free:
        grad = np.zeros_like(control.coefficients)
        for k in range(traj.n_steps):
            vol = _Geometry(mesh, traj.states[k]).vol
            pair = 2.0 * traj.velocities[k] - betas[k]
            grad[k] = cfg.dt * vol[:, None] * simplex_field_means(mesh, pair)
    else:
        grad = np.zeros(mesh.d + 1)
        for k in range(traj.n_steps):
            grad -= cfg.dt * dtheta_work(mesh, traj.states[k], control, betas[k])
    info = {"rho": rho, "trajectory": traj, "costate": costate}
    return f, grad, info


def operator_bound_ratios(traj: Trajectory, cfg: SolverConfig):
    """Per-step ratio omega*sqrt(v' K^-1 v) / sqrt(j' K j) (<= 1 analytically)."""
    ratios = []
    for cache in traj.caches:
        vkv = cache.kmat.quad_inv(cache.v)
        jkj = cache.kmat.quad(cache.j)
        if jkj <= 0:
            ratios.append(np.inf if vkv > 0 else 0.0)
        else:
            ratios.append(cfg.omega * np.sqrt(max(vkv, 0.0)) / np.sqrt(jkj))
    return ratios


def export_trajectory_csv(traj: Trajectory, path):
    """CSV rows (step, vertex_id, x, y[, z]) for every stored state."""
    d = traj.states[0].shape[1]
    header = ["step", "vertex_id", "x", "y"] + (["z"] if d == 3 else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for step, q in enumerate(traj.states):
            for vid, row in enumerate(q):
                writer.writerow([step, vid] + [repr(float(c)) for c in row])
