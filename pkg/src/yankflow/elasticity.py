"""Discrete elastic operator: energy form, force, and shape derivative.

The bilinear energy is a sum over simplices of a stiffness density applied to
the linear strains of the two fields, times current simplex volume, plus a
penalty on normal motion of the bottom boundary layer.  Two stiffness models:

* isotropic:  lam*tr(e_u)tr(e_w) + 2*mu*tr(e_u e_w)
* layered, in terms of the prism frame (unit layer normal N, unit transversal
  S) with tangent projector P = I - N N^T:
      lt*(P:e_u)(P:e_w) + mt*tr(e_u P e_w P)
      + mv*(S'e_u S)(S'e_w S) + 2*ma*(e_u S)' P (e_w S)

Material constants are carried unchanged to the deformed configuration; all
geometry (volumes, frames, boundary measures) uses the current positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import ValidationError
from .mesh import (
    DEGENERACY_REL_TOL,
    DegenerateSimplexError,
    LayeredMesh,
    _rot90,
    _rot90_t,
    edge_matrices,
    gradient_coeffs,
    prism_frames,
    scatter_frame_gradients,
    simplex_scales,
    _factorial,
)


@dataclass
class ElasticParams:
    """Stiffness constants and the bottom-layer penalty weight."""

    model: str = "isotropic"
    lam: float = 0.0
    mu: float = 0.0
    lambda_tan: float = 0.0
    mu_tan: float = 0.0
    mu_tsv: float = 0.0
    mu_ang: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.model not in ("isotropic", "layered"):
            raise ValidationError(f"unknown elastic model {self.model!r}")
        moduli = self.moduli()
        if any(m < 0 for m in moduli) or self.beta < 0:
            raise ValidationError("elastic moduli and beta must be nonnegative")
        if not any(m > 0 for m in moduli):
            raise ValidationError("at least one elastic modulus must be positive")

    def moduli(self):
        if self.model == "isotropic":
            return (self.lam, self.mu)
        return (self.lambda_tan, self.mu_tan, self.mu_tsv, self.mu_ang)


def strain(gradient):
    """Linear strain 0.5*(Du + Du^T) of a displacement gradient."""
    gradient = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(gradient)):
        raise ValidationError("gradient must be finite")
    return 0.5 * (gradient + np.swapaxes(gradient, -1, -2))


# ---------------------------------------------------------------------------
# per-simplex geometry bundle
# ---------------------------------------------------------------------------

class _Geometry:
    """Current-configuration quantities shared by the elastic/yank assembly."""

    def __init__(self, mesh: LayeredMesh, q):
        q = np.asarray(q, dtype=float)
        self.q = q
        self.simplices = mesh.simplices
        self.quad = edge_matrices(q, mesh.simplices)
        self.det = np.linalg.det(self.quad)
        scale = simplex_scales(q, mesh.simplices)
        d = mesh.d
        bad = np.flatnonzero(np.abs(self.det) <= DEGENERACY_REL_TOL * scale**d)
        if bad.size:
            raise DegenerateSimplexError(f"degenerate simplex {int(bad[0])} at current positions")
        self.qinv = np.linalg.inv(self.quad)
        self.vol = np.abs(self.det) / _factorial(d)
        self.coeffs = gradient_coeffs(self.qinv)

    def gradients(self, field):
        """Per-simplex affine gradient (Du)_T of vertex values; (K, d, d)."""
        return np.einsum("kma,kmb->kab", field[self.simplices], self.coeffs)


def _energy_tensor(params: ElasticParams, d, normal=None, transversal=None):
    """Per-simplex stiffness 4-tensor E[k,a,b,c,e] with density
    sum_abce eps_u[a,b] E[a,b,c,e] eps_w[c,e]."""
    eye = np.eye(d)
    if params.model == "isotropic":
        e_t = params.lam * np.einsum("ab,ce->abce", eye, eye)
        e_t = e_t + 2.0 * params.mu * np.einsum("ac,be->abce", eye, eye)
        return e_t[None, :, :, :, :]
    proj = eye[None, :, :] - np.einsum("ka,kb->kab", normal, normal)
    ss = np.einsum("ka,kb->kab", transversal, transversal)
    e_t = params.lambda_tan * np.einsum("kab,kce->kabce", proj, proj)
    e_t = e_t + params.mu_tan * np.einsum("kbc,kea->kabce", proj, proj)
    e_t = e_t + params.mu_tsv * np.einsum("kab,kce->kabce", ss, ss)
    e_t = e_t + 2.0 * params.mu_ang * np.einsum("kb,kac,ke->kabce", transversal, proj, transversal)
    return e_t


def _apply_tensor(e_t, eps):
    """Symmetrized matrix F with F:d_eps = E(d_eps, eps); shape (K, d, d)."""
    f_mat = np.einsum("kabce,kce->kab", e_t, eps, optimize=True)
    return 0.5 * (f_mat + np.swapaxes(f_mat, -1, -2))


def _frames_for(params, mesh, q):
    if params.model == "layered":
        normal, transversal, aux = prism_frames(mesh, q)
        prism = mesh.prism_map[:, 0]
        return normal[prism], transversal[prism], (normal, transversal, aux)
    return None, None, None


# ---------------------------------------------------------------------------
# bottom-layer penalty
# ---------------------------------------------------------------------------

def _boundary_normals(q, elements):
    """Area-weighted boundary normals (|n_raw| = element measure)."""
    d = q.shape[1]
    if d == 2:
        raw = _rot90(q[elements[:, 1]] - q[elements[:, 0]])
    else:
        raw = 0.5 * np.cross(q[elements[:, 1]] - q[elements[:, 0]],
                             q[elements[:, 2]] - q[elements[:, 0]])
    meas = np.linalg.norm(raw, axis=1)
    if np.any(meas <= 0):
        raise DegenerateSimplexError("degenerate bottom boundary element")
    return raw, meas


def _penalty_value(mesh, q, params, u, w):
    elements = mesh.bottom_elements
    raw, meas = _boundary_normals(q, elements)
    ubar = u[elements].mean(axis=1)
    wbar = w[elements].mean(axis=1)
    return params.beta * float(np.sum(
        np.sum(ubar * raw, axis=1) * np.sum(wbar * raw, axis=1) / meas))


def _penalty_force(mesh, q, params, w, out):
    elements = mesh.bottom_elements
    raw, meas = _boundary_normals(q, elements)
    wbar = w[elements].mean(axis=1)
    coeff = params.beta * np.sum(wbar * raw, axis=1) / meas
    per_vertex = (coeff[:, None] * raw) / elements.shape[1]
    for col in range(elements.shape[1]):
        np.add.at(out, elements[:, col], per_vertex)


def _penalty_shape(mesh, q, params, u, w, out):
    elements = mesh.bottom_elements
    raw, meas = _boundary_normals(q, elements)
    ubar = u[elements].mean(axis=1)
    wbar = w[elements].mean(axis=1)
    un = np.sum(ubar * raw, axis=1)
    wn = np.sum(wbar * raw, axis=1)
    g_raw = params.beta * (
        wn[:, None] * ubar + un[:, None] * wbar
        - (un * wn / meas**2)[:, None] * raw
    ) / meas[:, None]
    if mesh.d == 2:
        g_edge = _rot90_t(g_raw)
        np.add.at(out, elements[:, 1], g_edge)
        np.add.at(out, elements[:, 0], -g_edge)
    else:
        e1 = q[elements[:, 1]] - q[elements[:, 0]]
        e2 = q[elements[:, 2]] - q[elements[:, 0]]
        g_e1 = 0.5 * np.cross(e2, g_raw)
        g_e2 = 0.5 * np.cross(g_raw, e1)
        np.add.at(out, elements[:, 1], g_e1)
        np.add.at(out, elements[:, 2], g_e2)
        np.add.at(out, elements[:, 0], -(g_e1 + g_e2))


def _penalty_blocks(mesh, q, params, a_mat):
    elements = mesh.bottom_elements
    raw, meas = _boundary_normals(q, elements)
    nv = elements.shape[1]
    block = params.beta / (nv * nv) * np.einsum("ka,kb->kab", raw, raw) / meas[:, None, None]
    d = mesh.d
    for ca in range(nv):
        for cb in range(nv):
            rows = elements[:, ca]
            cols = elements[:, cb]
            for a in range(d):
                for b in range(d):
                    np.add.at(a_mat, (rows * d + a, cols * d + b), block[:, a, b])


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def energy_form(mesh: LayeredMesh, q, params: ElasticParams, u, w):
    """u^T A_q w: elastic bilinear form plus the bottom penalty."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    normal, transversal, _ = _frames_for(params, mesh, q)
    e_t = _energy_tensor(params, mesh.d, normal, transversal)
    eps_u = strain(geo.gradients(u))
    eps_w = strain(geo.gradients(w))
    density = np.einsum("kabce,kab,kce->k", e_t, eps_u, eps_w, optimize=True) \
        if e_t.shape[0] > 1 else np.einsum("abce,kab,kce->k", e_t[0], eps_u, eps_w, optimize=True)
    total = float(np.dot(density, geo.vol))
    if params.beta > 0:
        total += _penalty_value(mesh, q, params, u, w)
    return total


def elastic_force(mesh: LayeredMesh, q, params: ElasticParams, w):
    """A_q w as a per-vertex covector field: g with g.u = energy_form(u, w)."""
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    normal, transversal, _ = _frames_for(params, mesh, q)
    e_t = _energy_tensor(params, mesh.d, normal, transversal)
    eps_w = strain(geo.gradients(w))
    if e_t.shape[0] == 1:
        f_mat = np.einsum("abce,kce->kab", e_t[0], eps_w, optimize=True)
        f_mat = 0.5 * (f_mat + np.swapaxes(f_mat, -1, -2))
    else:
        f_mat = _apply_tensor(e_t, eps_w)
    per_vertex = geo.vol[:, None, None] * np.einsum("kab,kmb->kma", f_mat, geo.coeffs)
    out = np.zeros_like(q)
    np.add.at(out, mesh.simplices.ravel(), per_vertex.reshape(-1, mesh.d))
    if params.beta > 0:
        _penalty_force(mesh, q, params, w, out)
    return out


def assemble_operator(mesh: LayeredMesh, q, params: ElasticParams):
    """Dense nd-by-nd matrix of the bilinear form (penalty included)."""
    q = np.asarray(q, dtype=float)
    geo = _Geometry(mesh, q)
    d = mesh.d
    normal, transversal, _ = _frames_for(params, mesh, q)
    e_t = _energy_tensor(params, d, normal, transversal)
    k_count = mesh.n_simplices
    eye = np.eye(d)
    # Z[k,m,c,a,b] = d eps_ab / d u_mc = 0.5*(delta_ca C_mb + delta_cb C_ma)
    z = 0.5 * (
        np.einsum("ca,kmb->kmcab", eye, geo.coeffs)
        + np.einsum("cb,kma->kmcab", eye, geo.coeffs)
    )
    if e_t.shape[0] == 1:
        w_half = np.einsum("kmcab,abef->kmcef", z, e_t[0], optimize=True)
    else:
        w_half = np.einsum("kmcab,kabef->kmcef", z, e_t, optimize=True)
    blocks = np.einsum("kmcef,knhef->kmcnh", w_half, z, optimize=True)
    blocks *= geo.vol[:, None, None, None, None]
    nb = (d + 1) * d
    blocks = blocks.reshape(k_count, nb, nb)
    dof = (mesh.simplices[:, :, None] * d + np.arange(d)[None, None, :]).reshape(k_count, nb)
    nd = mesh.n_vertices * d
    a_mat = np.zeros((nd, nd))
    np.add.at(a_mat, (dof[:, :, None], dof[:, None, :]), blocks)
    if params.beta > 0:
        _penalty_blocks(mesh, q, params, a_mat)
    return 0.5 * (a_mat + a_mat.T)


def shape_derivative(mesh: LayeredMesh, q, params: ElasticParams, u, w):
    """d/dq [u^T A_q w] at fixed u, w, including volume, strain, frame, and
    bottom-penalty geometry terms; returns an (n, d) covector field."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    geo = _Geometry(mesh, q)
    d = mesh.d
    normal, transversal, frame_data = _frames_for(params, mesh, q)
    e_t = _energy_tensor(params, d, normal, transversal)
    grad_u = geo.gradients(u)
    grad_w = geo.gradients(w)
    eps_u = strain(grad_u)
    eps_w = strain(grad_w)
    if e_t.shape[0] == 1:
        density = np.einsum("abce,kab,kce->k", e_t[0], eps_u, eps_w, optimize=True)
        f_u = np.einsum("abce,kce->kab", e_t[0], eps_w, optimize=True)
        f_w = np.einsum("abce,kab->kce", e_t[0], eps_u, optimize=True)
    else:
        density = np.einsum("kabce,kab,kce->k", e_t, eps_u, eps_w, optimize=True)
        f_u = np.einsum("kabce,kce->kab", e_t, eps_w, optimize=True)
        f_w = np.einsum("kabce,kab->kce", e_t, eps_u, optimize=True)
    f_u = 0.5 * (f_u + np.swapaxes(f_u, -1, -2))
    f_w = 0.5 * (f_w + np.swapaxes(f_w, -1, -2))

    qinv_t = np.swapaxes(geo.qinv, -1, -2)
    grad_quad = (density * geo.vol)[:, None, None] * qinv_t
    strain_part = (
        np.einsum("kba,kbc->kac", grad_u, f_u)
        + np.einsum("kba,kbc->kac", grad_w, f_w)
    )
    grad_quad = grad_quad - geo.vol[:, None, None] * np.einsum("kac,kbc->kab", strain_part, geo.qinv)

    out = np.zeros_like(q)
    np.add.at(out, mesh.simplices[:, 1:].ravel(),
              np.swapaxes(grad_quad, -1, -2).reshape(-1, d))
    np.add.at(out, mesh.simplices[:, 0], -grad_quad.sum(axis=2))

    if params.model == "layered":
        p_normal, p_transversal, aux = frame_data
        prism = mesh.prism_map[:, 0]
        n_s = normal
        s_s = transversal
        proj = np.eye(d)[None] - np.einsum("ka,kb->kab", n_s, n_s)
        eun = np.einsum("kab,kb->ka", eps_u, n_s)
        ewn = np.einsum("kab,kb->ka", eps_w, n_s)
        eus = np.einsum("kab,kb->ka", eps_u, s_s)
        ews = np.einsum("kab,kb->ka", eps_w, s_s)
        p_eu = np.einsum("kab,kbc->kac", proj, eps_u)
        p_ew = np.einsum("kab,kbc->kac", proj, eps_w)
        tr_pu = np.einsum("kab,kab->k", proj, eps_u)
        tr_pw = np.einsum("kab,kab->k", proj, eps_w)
        de_dn = np.zeros_like(n_s)
        if params.lambda_tan:
            de_dn += -2.0 * params.lambda_tan * (tr_pw[:, None] * eun + tr_pu[:, None] * ewn)
        if params.mu_tan:
            de_dn += -2.0 * params.mu_tan * (
                np.einsum("kab,kb->ka", eps_u, np.einsum("kab,kb->ka", p_ew, n_s))
                + np.einsum("kab,kb->ka", eps_w, np.einsum("kab,kb->ka", p_eu, n_s))
            )
        if params.mu_ang:
            nes = np.sum(n_s * eus, axis=1)
            news = np.sum(n_s * ews, axis=1)
            de_dn += -2.0 * params.mu_ang * (news[:, None] * eus + nes[:, None] * ews)
        de_ds = np.zeros_like(s_s)
        if params.mu_tsv:
            sus = np.sum(s_s * eus, axis=1)
            sws = np.sum(s_s * ews, axis=1)
            de_ds += 2.0 * params.mu_tsv * (sws[:, None] * eus + sus[:, None] * ews)
        if params.mu_ang:
            de_ds += 2.0 * params.mu_ang * (
                np.einsum("kab,kb->ka", eps_u, np.einsum("kab,kb->ka", p_ew, s_s))
                + np.einsum("kab,kb->ka", eps_w, np.einsum("kab,kb->ka", p_eu, s_s))
            )
        g_normal = np.zeros_like(p_normal)
        g_transversal = np.zeros_like(p_transversal)
        np.add.at(g_normal, prism, geo.vol[:, None] * de_dn)
        np.add.at(g_transversal, prism, geo.vol[:, None] * de_ds)
        out += scatter_frame_gradients(mesh, q, aux, g_normal, g_transversal)

    if params.beta > 0:
        _penalty_shape(mesh, q, params, u, w, out)
    return out
