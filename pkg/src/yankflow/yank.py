"""Yank models: free per-simplex covectors and the transported-potential yank.

The parametric yank derives from a compactly supported C^1 potential
g_{(c,h)}(x; r) = h*(|x-c|^2/r^2 - 1)^2 on |x-c| <= r, advected with the flow.
Transport is realized by evaluating g at the template-time centroid of each
simplex (the Lagrangian label), so the per-simplex value g_T never changes
along the flow.  Its work against a field w is -sum_T g_T tr(W Q^-1) vol(T)
with current-configuration Q and vol.

The free yank is piecewise constant in time with one covector per simplex;
(j | w) = sum_T j_T . mean(w over T) * measure(T), measure at current q.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .kernel import ValidationError
from .elasticity import _Geometry
from .mesh import LayeredMesh, edge_matrices


@dataclass
class PotentialParams:
    """Center, height and (fixed) radius of the transported potential."""

    c: np.ndarray
    h: float
    r: float

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if not self.r > 0:
            raise ValidationError(f"potential radius must be positive, got {self.r}")

    def theta(self):
        """Optimization vector (c_1, ..., c_d, h)."""
        return np.concatenate([self.c, [self.h]])

    @classmethod
    def from_theta(cls, theta, r):
        theta = np.asarray(theta, dtype=float)
        return cls(c=theta[:-1], h=float(theta[-1]), r=r)


@dataclass
class FreeYank:
    """Per-interval, per-simplex covectors; shape (n_steps, n_simplices, d)."""

    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.ndim != 3:
            raise ValidationError("free yank coefficients must have shape (steps, simplices, d)")

    @classmethod
    def zeros(cls, n_steps, n_simplices, d):
        return cls(np.zeros((n_steps, n_simplices, d)))


def potential_eval(theta: PotentialParams, x):
    """g_theta at point(s) x; zero outside the support ball, C^1 across it."""
    x = np.asarray(x, dtype=float)
    s = np.sum((x - theta.c) ** 2, axis=-1)
    val = theta.h * (s / theta.r**2 - 1.0) ** 2
    return np.where(s <= theta.r**2, val, 0.0)


def potential_dtheta(theta: PotentialParams, x):
    """(dg/dc, dg/dh) at point(s) x; both vanish smoothly at the boundary."""
    x = np.asarray(x, dtype=float)
    diff = x - theta.c
    s = np.sum(diff**2, axis=-1)
    inside = s <= theta.r**2
    w = s / theta.r**2 - 1.0
    dh = np.where(inside, w**2, 0.0)
    dc = np.where(inside[..., None], (-4.0 * theta.h / theta.r**2) * w[..., None] * diff, 0.0)
    return dc, dh


def template_centroids(mesh: LayeredMesh):
    return mesh.vertices[mesh.simplices].mean(axis=1)


def _transported_values(mesh, theta):
    return potential_eval(theta, template_centroids(mesh))


def work_form(mesh: LayeredMesh, q, theta: PotentialParams, w):
    """j_{q,theta}^T w = -sum_T g_T tr(W Q^-1) vol(T)."""
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    div = np.einsum("kaa->k", geo.gradients(w))
    return -float(np.dot(_transported_values(mesh, theta), div * geo.vol))


def yank_covector(mesh: LayeredMesh, q, theta: PotentialParams):
    """j_{q,theta} as an (n, d) covector: the exact w-gradient of work_form."""
    geo = _Geometry(mesh, q)
    g_vals = _transported_values(mesh, theta)
    per_vertex = (-g_vals * geo.vol)[:, None, None] * geo.coeffs
    out = np.zeros_like(np.asarray(q, dtype=float))
    np.add.at(out, mesh.simplices.ravel(), per_vertex.reshape(-1, mesh.d))
    return out


def _scatter_quad_gradients(mesh, grad_quad, out):
    d = mesh.d
    np.add.at(out, mesh.simplices[:, 1:].ravel(),
              np.swapaxes(grad_quad, -1, -2).reshape(-1, d))
    np.add.at(out, mesh.simplices[:, 0], -grad_quad.sum(axis=2))


def dq_work(mesh: LayeredMesh, q, theta: PotentialParams, w):
    """d/dq [j_{q,theta}^T w] at fixed w (g_T does not depend on q)."""
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    g_vals = _transported_values(mesh, theta)
    w_mat = edge_matrices(w, mesh.simplices)
    div = np.einsum("kaa->k", np.einsum("kab,kbc->kac", w_mat, geo.qinv))
    qwq = np.einsum("kab,kbc,kce->kae", geo.qinv, w_mat, geo.qinv, optimize=True)
    qinv_t = np.swapaxes(geo.qinv, -1, -2)
    grad_quad = -g_vals[:, None, None] * (
        -geo.vol[:, None, None] * np.swapaxes(qwq, -1, -2)
        + (div * geo.vol)[:, None, None] * qinv_t
    )
    out = np.zeros_like(q)
    _scatter_quad_gradients(mesh, grad_quad, out)
    return out


def dtheta_work(mesh: LayeredMesh, q, theta: PotentialParams, w):
    """(d+1)-vector d/d(c, h) [j_{q,theta}^T w] with analytic potential grads."""
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    div_vol = np.einsum("kaa->k", geo.gradients(w)) * geo.vol
    dc, dh = potential_dtheta(theta, template_centroids(mesh))
    grad = np.empty(mesh.d + 1)
    grad[:-1] = -(dc * div_vol[:, None]).sum(axis=0)
    grad[-1] = -float(np.dot(dh, div_vol))
    return grad


# ---------------------------------------------------------------------------
# free yank
# ---------------------------------------------------------------------------

def free_work_form(mesh: LayeredMesh, q, coeffs, w):
    """(j | w) = sum_T j_T . mean(w over T) * measure(T) for one time interval."""
    coeffs = np.asarray(coeffs, dtype=float)
    w = np.asarray(w, dtype=float)
    if coeffs.shape != (mesh.n_simplices, mesh.d):
        raise ValidationError(
            f"free yank coefficients must be ({mesh.n_simplices}, {mesh.d}), got {coeffs.shape}"
        )
    geo = _Geometry(mesh, q)
    wbar = w[mesh.simplices].mean(axis=1)
    return float(np.dot(np.sum(coeffs * wbar, axis=1), geo.vol))


def free_yank_covector(mesh: LayeredMesh, q, coeffs):
    coeffs = np.asarray(coeffs, dtype=float)
    geo = _Geometry(mesh, q)
    share = (coeffs * geo.vol[:, None]) / (mesh.d + 1)
    out = np.zeros((mesh.n_vertices, mesh.d))
    for col in range(mesh.d + 1):
        np.add.at(out, mesh.simplices[:, col], share)
    return out


def dq_free_work(mesh: LayeredMesh, q, coeffs, w):
    """d/dq [(j | w)] at fixed coefficients and w: only measures move."""
    q = np.asarray(q, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    wbar = w[mesh.simplices].mean(axis=1)
    jw = np.sum(coeffs * wbar, axis=1)
    qinv_t = np.swapaxes(geo.qinv, -1, -2)
    grad_quad = (jw * geo.vol)[:, None, None] * qinv_t
    out = np.zeros_like(q)
    _scatter_quad_gradients(mesh, grad_quad, out)
    return out


def simplex_measures(mesh: LayeredMesh, q):
    return _Geometry(mesh, q).vol


def simplex_field_means(mesh: LayeredMesh, field):
    return np.asarray(field)[mesh.simplices].mean(axis=1)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_control(control, path):
    if isinstance(control, PotentialParams):
        doc = {"type": "potential", "c": control.c.tolist(), "h": control.h, "r": control.r}
    elif isinstance(control, FreeYank):
        doc = {"type": "free", "coefficients": control.coefficients.tolist()}
    else:
        raise ValidationError(f"unknown control type {type(control).__name__}")
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_control(path):
    with open(path) as fh:
        doc = json.load(fh)
    kind = doc.get("type")
    if kind == "potential":
        return PotentialParams(c=np.array(doc["c"], dtype=float), h=float(doc["h"]), r=float(doc["r"]))
    if kind == "free":
        return FreeYank(np.array(doc["coefficients"], dtype=float))
    raise ValidationError(f"unknown control type {kind!r} in {path}")
