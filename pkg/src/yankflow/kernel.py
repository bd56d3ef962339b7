"""Matern reproducing-kernel machinery and the regularized velocity solve.

The velocity field lives in a vector RKHS whose kernel is kappa(|x-y|/sigma)*I_d
with kappa the third-order Matern profile.  A velocity is obtained from a yank
covector j by solving the symmetric positive-definite system

    (omega * K^-1 + A) v = j,

where K is the kernel Gram matrix of the current point cloud and A the elastic
operator assembled elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

DEFAULT_JITTER_SCALE = 1e-10


class FactorizationError(RuntimeError):
    """Raised when a Cholesky factorization fails (singular / non-SPD matrix)."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def matern3(t):
    """Third-order Matern profile kappa(t) = (1 + t + 2t^2/15 + t^3/15) e^-t.

    Accepts scalars or arrays of nonnegative values; kappa(0) = 1 and kappa is
    monotone decreasing on [0, inf).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValidationError("matern3 requires t >= 0")
    return (1.0 + t + (2.0 / 15.0) * t**2 + (1.0 / 15.0) * t**3) * np.exp(-t)


def matern3_deriv(t):
    """Analytic derivative kappa'(t) = -(t/15)(t^2 - t + 11) e^-t.

    kappa'(0) = 0, so kernel matrices stay differentiable at coincident points.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValidationError("matern3_deriv requires t >= 0")
    return -(t / 15.0) * (t**2 - t + 11.0) * np.exp(-t)


@dataclass
class KernelConfig:
    """Width and diagonal regularization of the Matern-3 kernel."""

    sigma: float
    jitter: float = DEFAULT_JITTER_SCALE

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"kernel width must be positive, got {self.sigma}")
        if self.jitter < 0:
            raise ValidationError(f"jitter must be nonnegative, got {self.jitter}")


@dataclass
class KernelMatrix:
    """Gram matrix of a point cloud under the vector Matern-3 kernel.

    Only the scalar n-by-n matrix is stored; the nd-by-nd operator is the
    Kronecker product with I_d (block (i,j) equals kappa(|q_i-q_j|/sigma) I_d,
    diagonal blocks (1+jitter) I_d).  A Cholesky factor of the scalar matrix is
    cached after first use.
    """

    n: int
    d: int
    scalar: np.ndarray
    jitter: float
    _chol: tuple | None = field(default=None, repr=False)

    @property
    def entries(self):
        """Dense symmetric nd-by-nd kernel matrix."""
        return np.kron(self.scalar, np.eye(self.d))

    def chol(self):
        if self._chol is None:
            try:
                self._chol = cho_factor(self.scalar, lower=True)
            except np.linalg.LinAlgError as exc:
                raise FactorizationError(
                    "kernel matrix is not positive definite (duplicate points "
                    "with zero jitter?)"
                ) from exc
        return self._chol

    def apply(self, x):
        """K x for a field x of shape (n, d)."""
        return self.scalar @ x

    def solve(self, x):
        """K^-1 x for a field x of shape (n, d)."""
        return cho_solve(self.chol(), x)

    def inverse(self):
        """Dense inverse of the scalar matrix (symmetrized)."""
        inv = cho_solve(self.chol(), np.eye(self.n))
        return 0.5 * (inv + inv.T)

    def quad_inv(self, x):
        """x^T K^-1 x for a field x of shape (n, d)."""
        return float(np.sum(x * self.solve(x)))

    def quad(self, x):
        """x^T K x for a field x of shape (n, d)."""
        return float(np.sum(x * self.apply(x)))


def kernel_matrix(points, cfg: KernelConfig) -> KernelMatrix:
    """Assemble the (jittered) kernel Gram matrix of an (n, d) point cloud."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValidationError("points must be an (n, d) array with n >= 1")
    if not np.all(np.isfinite(points)):
        raise ValidationError("points must be finite")
    n, d = points.shape
    diff = points[:, None, :] - points[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    scalar = matern3(r / cfg.sigma)
    scalar[np.diag_indices(n)] += cfg.jitter
    scalar = 0.5 * (scalar + scalar.T)
    return KernelMatrix(n=n, d=d, scalar=scalar, jitter=cfg.jitter)


def kernel_shape_term(points, cfg: KernelConfig, a, b):
    """Covector d/dq [ a^T K_q b ] for fixed fields a, b of shape (n, d).

    The jitter term is q-independent and drops out.  Entry m is
    sum_j kappa'(r_mj/sigma)/sigma * (a_m.b_j + a_j.b_m) * (q_m - q_j)/r_mj.
    """
    points = np.asarray(points, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = points.shape[0]
    diff = points[:, None, :] - points[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    # kappa'(t)/t extended by its limit at t=0; the i=j rows vanish with diff.
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(r > 0, matern3_deriv(r / cfg.sigma) / (cfg.sigma * r), 0.0)
    pair = a @ b.T + b @ a.T
    wpair = w * pair
    np.fill_diagonal(wpair, 0.0)
    return wpair.sum(axis=1)[:, None] * points - wpair @ points


def _check_psd_probe(a_mat, rng_seed=1234, n_probes=16, tol=1e-8):
    """Cheap PSD guard: reject if a Rayleigh quotient goes noticeably negative."""
    nd = a_mat.shape[0]
    norm_a = np.linalg.norm(a_mat)
    if norm_a == 0.0:
        return
    rng = np.random.default_rng(rng_seed)
    for _ in range(n_probes):
        v = rng.standard_normal(nd)
        quad = float(v @ (a_mat @ v))
        if quad < -tol * norm_a * float(v @ v):
            raise ValidationError(
                "elastic operator fails the PSD probe "
                f"(v^T A v = {quad:.3e} with |A| = {norm_a:.3e})"
            )


def regularized_operator(K: KernelMatrix, a_mat, omega):
    """Dense M = omega K^-1 + A as an nd-by-nd symmetric matrix."""
    m = omega * np.kron(K.inverse(), np.eye(K.d)) + a_mat
    return 0.5 * (m + m.T)


def solve_velocity(K: KernelMatrix, a_mat, j, omega):
    """Solve (omega K^-1 + A) v = j; returns v with the same shape as j.

    A must be symmetric PSD (within probe tolerance), omega > 0.  The solution
    satisfies the operator bound sqrt(v^T K^-1 v) <= sqrt(j^T K j) / omega.
    """
    if not omega > 0:
        raise ValidationError(f"omega must be positive, got {omega}")
    a_mat = np.asarray(a_mat, dtype=float)
    j = np.asarray(j, dtype=float)
    nd = K.n * K.d
    if a_mat.shape != (nd, nd):
        raise ValidationError(f"A must be {nd}x{nd}, got {a_mat.shape}")
    _check_psd_probe(a_mat)
    m = regularized_operator(K, a_mat, omega)
    try:
        factor = cho_factor(m, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("regularized operator is not SPD") from exc
    return cho_solve(factor, j.reshape(nd)).reshape(j.shape)
