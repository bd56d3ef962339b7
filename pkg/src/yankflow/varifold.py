"""Varifold pseudo-metric between oriented boundary layers and its gradient.

For surfaces S, S' with per-element centroids m, unit normals n and measures,
    nu(S, S') = sum_e sum_f chi(|m_e - m'_f|/tau) (n_e . n'_f)^2 meas_e meas_f
with the Cauchy kernel chi(t) = (1+t^2)^-2 (one-point centroid quadrature),
and the discrepancy is rho = nu(S,S) - 2 nu(S,S') + nu(S',S').

Writing ntilde for the measure-weighted normal (rot90 of the edge in 2D, half
cross product in 3D, so |ntilde| = measure), each pair term equals
chi * (ntilde_e . ntilde'_f)^2 / (meas_e meas_f), which is what gets
differentiated with respect to the vertices of S.  Targets are static:
gradients flow only into the first surface.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import ValidationError
from .mesh import LayeredMesh, _rot90, _rot90_t

SURFACE_FORMAT_VERSION = "1"


class DegenerateElementError(RuntimeError):
    """Raised when a boundary element has zero length/area."""


@dataclass
class VarifoldConfig:
    """Spatial Cauchy-kernel scale."""

    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"varifold scale must be positive, got {self.tau}")


@dataclass
class BoundarySurface:
    """Oriented discretized curve (d=2, segments) or surface (d=3, triangles)."""

    d: int
    vertices: np.ndarray
    elements: np.ndarray
    centroids: np.ndarray = field(init=False, repr=False)
    weighted_normals: np.ndarray = field(init=False, repr=False)
    measures: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.elements = np.asarray(self.elements, dtype=int)
        if self.elements.size == 0:
            raise ValidationError("surface must have at least one element")
        if self.elements.shape[1] != self.d:
            raise ValidationError(
                f"elements must have {self.d} vertices in dimension {self.d}"
            )
        self.centroids, self.weighted_normals, self.measures = _surface_geometry(
            self.vertices, self.elements, self.d
        )

    @property
    def normals(self):
        return self.weighted_normals / self.measures[:, None]

    def moved(self, vertices):
        """Same connectivity at new vertex positions."""
        return BoundarySurface(d=self.d, vertices=vertices, elements=self.elements)


def _surface_geometry(vertices, elements, d):
    centroids = vertices[elements].mean(axis=1)
    if d == 2:
        raw = _rot90(vertices[elements[:, 1]] - vertices[elements[:, 0]])
    else:
        raw = 0.5 * np.cross(vertices[elements[:, 1]] - vertices[elements[:, 0]],
                             vertices[elements[:, 2]] - vertices[elements[:, 0]])
    meas = np.linalg.norm(raw, axis=1)
    if np.any(meas <= 0):
        raise DegenerateElementError("zero-measure boundary element")
    return centroids, raw, meas


def cauchy_kernel(t):
    """chi(t) = (1 + t^2)^-2."""
    t = np.asarray(t, dtype=float)
    return (1.0 + t * t) ** -2


def cauchy_kernel_deriv(t):
    t = np.asarray(t, dtype=float)
    return -4.0 * t * (1.0 + t * t) ** -3


def varifold_product(s1: BoundarySurface, s2: BoundarySurface, cfg: VarifoldConfig):
    """nu(S, S') by the double centroid-quadrature sum.

    Summed with math.fsum (exactly rounded), so the value is independent of
    the pair ordering: nu(S,S') == nu(S',S) bitwise.
    """
    diff = s1.centroids[:, None, :] - s2.centroids[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    dots = s1.weighted_normals @ s2.weighted_normals.T
    terms = cauchy_kernel(dist / cfg.tau) * dots**2 \
        / (s1.measures[:, None] * s2.measures[None, :])
    return math.fsum(terms.ravel())


def discrepancy(s1: BoundarySurface, s2: BoundarySurface, cfg: VarifoldConfig):
    """rho(S, S') = nu(S,S) - 2 nu(S,S') + nu(S',S') >= 0 up to roundoff."""
    return (varifold_product(s1, s1, cfg) - 2.0 * varifold_product(s1, s2, cfg)
            + varifold_product(s2, s2, cfg))


def _product_gradient_first(s1: BoundarySurface, s2: BoundarySurface, cfg: VarifoldConfig):
    """Gradient of nu(S, S') with respect to the first-slot appearance of S's
    vertices only (S in the second slot, if identical, is held fixed)."""
    diff = s1.centroids[:, None, :] - s2.centroids[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    dots = s1.weighted_normals @ s2.weighted_normals.T
    inv_meas = 1.0 / (s1.measures[:, None] * s2.measures[None, :])
    chi = cauchy_kernel(dist / cfg.tau)
    binet = dots**2 * inv_meas

    # centroid chain: chi'(r/tau)/tau * (m_e - m'_f)/r, zero at r = 0.
    with np.errstate(divide="ignore", invalid="ignore"):
        wc = np.where(dist > 0, cauchy_kernel_deriv(dist / cfg.tau) / (cfg.tau * dist), 0.0)
    g_cent = np.einsum("ef,efa->ea", wc * binet, diff)

    # weighted-normal chain: d/d ntilde_e of (ntilde.ntilde')^2/(meas meas').
    g_norm = (2.0 * (chi * dots * inv_meas)) @ s2.weighted_normals \
        - ((chi * binet / s1.measures[:, None]).sum(axis=1))[:, None] \
        * (s1.weighted_normals / s1.measures[:, None])

    grad = np.zeros_like(s1.vertices)
    elements = s1.elements
    nv = elements.shape[1]
    for col in range(nv):
        np.add.at(grad, elements[:, col], g_cent / nv)
    if s1.d == 2:
        g_edge = _rot90_t(g_norm)
        np.add.at(grad, elements[:, 1], g_edge)
        np.add.at(grad, elements[:, 0], -g_edge)
    else:
        e1 = s1.vertices[elements[:, 1]] - s1.vertices[elements[:, 0]]
        e2 = s1.vertices[elements[:, 2]] - s1.vertices[elements[:, 0]]
        g_e1 = 0.5 * np.cross(e2, g_norm)
        g_e2 = 0.5 * np.cross(g_norm, e1)
        np.add.at(grad, elements[:, 1], g_e1)
        np.add.at(grad, elements[:, 2], g_e2)
        np.add.at(grad, elements[:, 0], -(g_e1 + g_e2))
    return grad


def discrepancy_gradient(s1: BoundarySurface, s2: BoundarySurface, cfg: VarifoldConfig):
    """d rho / d (vertices of S); the target S' is static."""
    return 2.0 * _product_gradient_first(s1, s1, cfg) \
        - 2.0 * _product_gradient_first(s1, s2, cfg)


# ---------------------------------------------------------------------------
# layer extraction and multi-layer totals
# ---------------------------------------------------------------------------

def layer_surface(mesh: LayeredMesh, q, layer):
    """The given layer of the mesh at positions q, as a BoundarySurface whose
    vertices are that layer's points (elements directed by increasing index)."""
    q = np.asarray(q, dtype=float)
    idx = mesh.layer_vertex_indices(layer)
    elements = mesh.base_elements.copy()
    return BoundarySurface(d=mesh.d, vertices=q[idx], elements=elements)


def total_discrepancy(mesh: LayeredMesh, q, targets: dict, cfg: VarifoldConfig):
    """Sum of per-layer discrepancies against the registered target set."""
    return sum(discrepancy(layer_surface(mesh, q, layer), target, cfg)
               for layer, target in sorted(targets.items()))


def total_discrepancy_gradient(mesh: LayeredMesh, q, targets: dict, cfg: VarifoldConfig):
    """(rho_total, d rho_total / dq) with the gradient scattered to mesh rows."""
    q = np.asarray(q, dtype=float)
    total = 0.0
    grad = np.zeros_like(q)
    for layer, target in sorted(targets.items()):
        surf = layer_surface(mesh, q, layer)
        total += discrepancy(surf, target, cfg)
        grad[mesh.layer_vertex_indices(layer)] += discrepancy_gradient(surf, target, cfg)
    return total, grad


# ---------------------------------------------------------------------------
# surface file format
# ---------------------------------------------------------------------------

def save_surface(surface: BoundarySurface, path):
    doc = {
        "version": SURFACE_FORMAT_VERSION,
        "dimension": surface.d,
        "vertices": surface.vertices.tolist(),
        "elements": surface.elements.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_surface(path) -> BoundarySurface:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != SURFACE_FORMAT_VERSION:
        raise ValidationError(f"unsupported surface format version {doc.get('version')!r}")
    return BoundarySurface(
        d=int(doc["dimension"]),
        vertices=np.array(doc["vertices"], dtype=float),
        elements=np.array(doc["elements"], dtype=int),
    )
