"""Layered simplicial templates and per-simplex differential geometry.

A layered template stacks L copies of an N-point base layer along per-point
transversal steps.  Quads (2D) / triangular prisms (3D) between consecutive
layers are split into simplices without adding vertices; every quad face is
split by the diagonal through its globally smallest vertex index, which makes
the split faces of adjacent prisms match.  The split pattern of the first band
is replicated to all upper bands.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEGENERACY_REL_TOL = 1e-14
MESH_FORMAT_VERSION = "1"


class MeshConstructionError(RuntimeError):
    """Raised when a template cannot be built into a valid simplicial mesh."""


class DegenerateSimplexError(RuntimeError):
    """Raised when a simplex is (numerically) flat."""


class FrameDegeneracyError(RuntimeError):
    """Raised when prism frame vectors cannot be normalized (vanishing sum)."""


@dataclass
class LayeredMesh:
    """Immutable layered simplicial template.

    vertices are the template (time-zero) positions, indexed layer-major:
    vertex (layer l, point i) is row l*points_per_layer + i.  simplices hold
    global vertex indices; prism_map[k] = (prism index, lower layer) for the
    parent prism of simplex k.  Prism p = band*E + e sits between layers band
    and band+1, over base element e (E = base element count).
    """

    d: int
    layers: int
    points_per_layer: int
    vertices: np.ndarray
    simplices: np.ndarray
    prism_map: np.ndarray
    base_elements: np.ndarray
    orientation: np.ndarray = field(repr=False)
    _incidence: list | None = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self):
        return self.layers * self.points_per_layer

    @property
    def n_simplices(self):
        return self.simplices.shape[0]

    @property
    def n_prisms(self):
        return (self.layers - 1) * self.base_elements.shape[0]

    @property
    def bottom_elements(self):
        return self.base_elements.copy()

    @property
    def top_elements(self):
        return self.base_elements + (self.layers - 1) * self.points_per_layer

    def layer_vertex_indices(self, layer):
        n = self.points_per_layer
        return np.arange(layer * n, (layer + 1) * n)

    def prism_vertices(self, prism_ids=None):
        """(P, 2d) global vertex indices: base element corners, then the copy
        one layer up."""
        e_count = self.base_elements.shape[0]
        if prism_ids is None:
            prism_ids = np.arange(self.n_prisms)
        band = prism_ids // e_count
        elem = prism_ids % e_count
        bottom = self.base_elements[elem] + (band * self.points_per_layer)[:, None]
        return np.concatenate([bottom, bottom + self.points_per_layer], axis=1)

    def vertex_simplex_incidence(self):
        """List mapping each vertex to the simplices that contain it."""
        if self._incidence is None:
            buckets = [[] for _ in range(self.n_vertices)]
            for k, simplex in enumerate(self.simplices):
                for v in simplex:
                    buckets[v].append(k)
            self._incidence = [np.array(b, dtype=int) for b in buckets]
        return self._incidence


# ---------------------------------------------------------------------------
# per-simplex geometry
# ---------------------------------------------------------------------------

def edge_matrices(q, simplices):
    """Q[k][:, m] = q[s_{m+1}] - q[s_0] for each simplex; shape (K, d, d)."""
    q = np.asarray(q, dtype=float)
    first = q[simplices[:, 0]]
    return np.stack([(q[simplices[:, m]] - first) for m in range(1, simplices.shape[1])], axis=2)


def simplex_scales(q, simplices):
    """Max edge length per simplex (degeneracy reference scale)."""
    q = np.asarray(q, dtype=float)
    pts = q[simplices]
    m = simplices.shape[1]
    scale = np.zeros(simplices.shape[0])
    for a in range(m):
        for b in range(a + 1, m):
            scale = np.maximum(scale, np.linalg.norm(pts[:, a] - pts[:, b], axis=1))
    return scale


def gradient_coeffs(qinv):
    """C with rows C_0 = -1^T Q^-1 and C_i = (Q^-1)_{i*}; shape (K, d+1, d).

    The affine gradient of vertex values u on a simplex is
    (Du)_T = sum_m u_m (outer) C_m, i.e. einsum('kma,kmb->kab', u, C).
    """
    k, d, _ = qinv.shape
    c = np.empty((k, d + 1, d))
    c[:, 1:, :] = qinv
    c[:, 0, :] = -qinv.sum(axis=1)
    return c


def _factorial(d):
    out = 1
    for m in range(2, d + 1):
        out *= m
    return out


def simplex_volume(q_simplex):
    """|det Q| / d! for one simplex given its (d+1, d) vertex positions."""
    q_simplex = np.asarray(q_simplex, dtype=float)
    d = q_simplex.shape[1]
    quad = (q_simplex[1:] - q_simplex[0]).T
    return abs(np.linalg.det(quad)) / _factorial(d)


def simplex_volume_array(q, simplices):
    dets = np.linalg.det(edge_matrices(q, simplices))
    return np.abs(dets) / _factorial(simplices.shape[1] - 1)


def simplex_gradient(q_simplex, u_simplex):
    """(Du)_T = U Q^-1 from vertex positions and values, both (d+1, d).

    Independent of the anchor vertex and of vertex ordering.
    """
    q_simplex = np.asarray(q_simplex, dtype=float)
    u_simplex = np.asarray(u_simplex, dtype=float)
    d = q_simplex.shape[1]
    quad = (q_simplex[1:] - q_simplex[0]).T
    scale = max(
        np.linalg.norm(q_simplex[a] - q_simplex[b])
        for a in range(d + 1)
        for b in range(a + 1, d + 1)
    )
    if abs(np.linalg.det(quad)) <= DEGENERACY_REL_TOL * scale**d:
        raise DegenerateSimplexError("simplex is degenerate (|det Q| below tolerance)")
    u_mat = (u_simplex[1:] - u_simplex[0]).T
    return u_mat @ np.linalg.inv(quad)


def check_nondegenerate(q, simplices, orientation=None, rel_tol=DEGENERACY_REL_TOL):
    """Return the index of the first bad simplex, or -1 if all are fine.

    A simplex is bad when |det Q| falls below the scale-relative floor or, if a
    reference orientation is given, when its signed volume flipped sign.
    """
    dets = np.linalg.det(edge_matrices(q, simplices))
    scale = simplex_scales(q, simplices)
    d = simplices.shape[1] - 1
    bad = np.abs(dets) <= rel_tol * scale**d
    if orientation is not None:
        bad |= dets * orientation <= 0
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else -1


# ---------------------------------------------------------------------------
# prism splitting
# ---------------------------------------------------------------------------

def _split_quad(i, j, n):
    """Two triangles for the quad over base edge (i, j); diagonal through the
    smallest global index."""
    a, b = (i, j) if i < j else (j, i)
    return [(a, b, b + n), (a, b + n, a + n)]


def _split_prism(tri, n):
    """Dompierre-style split of the prism over base triangle `tri` into three
    tetrahedra; every quad face is cut through its smallest vertex."""
    i1, i2, i3 = (int(v) for v in tri)
    order = np.argmin([i1, i2, i3])
    for _ in range(order):
        i1, i2, i3 = i2, i3, i1
    v1, v2, v3 = i1, i2, i3
    v4, v5, v6 = v1 + n, v2 + n, v3 + n
    if min(v2, v6) < min(v3, v5):
        return [(v1, v2, v3, v6), (v1, v2, v6, v5), (v1, v5, v6, v4)]
    return [(v1, v2, v3, v5), (v1, v5, v3, v6), (v1, v5, v6, v4)]


def split_prisms(base_elements, points_per_layer, layers):
    """Simplices and prism map for the whole layered stack.

    The first band (layers 0-1) is split by the smallest-index rule; the same
    pattern is replicated to every upper band with a vertex offset.
    """
    n = points_per_layer
    d = base_elements.shape[1]
    band0 = []
    prism0 = []
    for e, elem in enumerate(base_elements):
        children = _split_quad(elem[0], elem[1], n) if d == 2 else _split_prism(elem, n)
        band0.extend(children)
        prism0.extend([e] * len(children))
    band0 = np.array(band0, dtype=int)
    prism0 = np.array(prism0, dtype=int)
    e_count = base_elements.shape[0]
    simplices = []
    prism_map = []
    for band in range(layers - 1):
        simplices.append(band0 + band * n)
        prism_map.append(np.stack([prism0 + band * e_count, np.full(prism0.shape, band)], axis=1))
    return np.concatenate(simplices, axis=0), np.concatenate(prism_map, axis=0)


def build_layered_template(base_points, transversal_rule, layers, base_elements=None):
    """Build a LayeredMesh from a bottom layer and a per-point transversal step.

    transversal_rule(base_points) must return the (N, d) step vector between
    consecutive layers; layer l sits at base + l*step.  In 2D the base is a
    polyline (consecutive points connected); in 3D a base triangulation must
    be supplied.
    """
    base_points = np.asarray(base_points, dtype=float)
    n, d = base_points.shape
    if d not in (2, 3):
        raise MeshConstructionError(f"dimension must be 2 or 3, got {d}")
    if layers < 2:
        raise MeshConstructionError(f"need at least 2 layers, got {layers}")
    if n < d:
        raise MeshConstructionError(f"need at least {d} points per layer, got {n}")
    if base_elements is None:
        if d == 3:
            raise MeshConstructionError("3D templates require an explicit base triangulation")
        base_elements = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    base_elements = np.asarray(base_elements, dtype=int)

    steps = np.asarray(transversal_rule(base_points), dtype=float)
    if steps.shape != base_points.shape:
        raise MeshConstructionError("transversal rule must return one step per base point")
    offsets = np.arange(layers)[:, None, None] * steps[None, :, :]
    vertices = (base_points[None, :, :] + offsets).reshape(layers * n, d)

    simplices, prism_map = split_prisms(base_elements, n, layers)
    dets = np.linalg.det(edge_matrices(vertices, simplices))
    scale = simplex_scales(vertices, simplices)
    dsim = simplices.shape[1] - 1
    bad = np.abs(dets) <= DEGENERACY_REL_TOL * scale**dsim
    # a valid stack has uniformly oriented simplices; flipped signs mean the
    # generated layers crossed each other
    bad |= dets * np.sign(dets[np.argmax(np.abs(dets))]) <= 0
    bad = np.flatnonzero(bad)
    if bad.size:
        raise MeshConstructionError(
            f"degenerate or inverted simplex {int(bad[0])} "
            f"(vertices {simplices[bad[0]].tolist()}) after splitting; "
            "layers may self-intersect"
        )
    return LayeredMesh(
        d=d,
        layers=layers,
        points_per_layer=n,
        vertices=vertices,
        simplices=simplices,
        prism_map=prism_map,
        base_elements=base_elements,
        orientation=np.sign(dets),
    )


# ---------------------------------------------------------------------------
# prism frames (normal N and transversal S per prism, shared by children)
# ---------------------------------------------------------------------------

def _rot90(v):
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def _rot90_t(v):
    out = np.empty_like(v)
    out[..., 0] = v[..., 1]
    out[..., 1] = -v[..., 0]
    return out


def prism_frames(mesh: LayeredMesh, q):
    """Unit normal N and transversal S per prism, with the intermediates needed
    to differentiate them.

    N is the normalized sum of the two (toward-upper-layer oriented) base
    normals; S is the normalized sum of the unit side vectors.
    """
    q = np.asarray(q, dtype=float)
    d = mesh.d
    pv = mesh.prism_vertices()
    bottom, top = pv[:, :d], pv[:, d:]
    cb = q[bottom].mean(axis=1)
    ct = q[top].mean(axis=1)
    updir = ct - cb

    def face_normal(idx):
        if d == 2:
            edge = q[idx[:, 1]] - q[idx[:, 0]]
            raw = _rot90(edge)
        else:
            raw = np.cross(q[idx[:, 1]] - q[idx[:, 0]], q[idx[:, 2]] - q[idx[:, 0]])
        norm = np.linalg.norm(raw, axis=1)
        if np.any(norm <= 0):
            raise FrameDegeneracyError("degenerate prism base element")
        sign = np.where(np.sum(raw * updir, axis=1) < 0, -1.0, 1.0)
        return raw, norm, sign

    raw_b, norm_b, sign_b = face_normal(bottom)
    raw_t, norm_t, sign_t = face_normal(top)
    n_b = sign_b[:, None] * raw_b / norm_b[:, None]
    n_t = sign_t[:, None] * raw_t / norm_t[:, None]
    h = n_b + n_t
    hnorm = np.linalg.norm(h, axis=1)
    if np.any(hnorm < 1e-12):
        raise FrameDegeneracyError("anti-parallel base normals; prism frame undefined")
    normal = h / hnorm[:, None]

    sides = q[top] - q[bottom]                      # (P, d, d): d side vectors
    side_norm = np.linalg.norm(sides, axis=2)
    if np.any(side_norm <= 0):
        raise FrameDegeneracyError("zero-length prism side")
    units = sides / side_norm[:, :, None]
    hs = units.sum(axis=1)
    hsnorm = np.linalg.norm(hs, axis=1)
    if np.any(hsnorm < 1e-12):
        raise FrameDegeneracyError("vanishing side-vector sum; prism frame undefined")
    transversal = hs / hsnorm[:, None]

    aux = {
        "pv": pv,
        "raw_b": raw_b, "norm_b": norm_b, "sign_b": sign_b,
        "raw_t": raw_t, "norm_t": norm_t, "sign_t": sign_t,
        "h": h, "hnorm": hnorm, "normal": normal,
        "units": units, "side_norm": side_norm,
        "hs": hs, "hsnorm": hsnorm, "transversal": transversal,
    }
    return normal, transversal, aux


def simplex_frames(mesh: LayeredMesh, q):
    """Per-simplex frames: the parent prism's (N, S) shared by its children."""
    normal, transversal, _ = prism_frames(mesh, q)
    prism = mesh.prism_map[:, 0]
    return normal[prism], transversal[prism]


def _project_out(unit, g):
    """(I - unit unit^T) g rowwise."""
    return g - unit * np.sum(unit * g, axis=1, keepdims=True)


def scatter_frame_gradients(mesh: LayeredMesh, q, aux, g_normal, g_transversal):
    """Chain per-prism gradients wrt (N, S) back to vertex positions.

    g_normal / g_transversal have shape (P, d); the return is (n, d).
    """
    q = np.asarray(q, dtype=float)
    d = mesh.d
    pv = aux["pv"]
    bottom, top = pv[:, :d], pv[:, d:]
    grad = np.zeros_like(q)

    # N chain: N = h/|h|, h = n_b + n_t, n_face = sign * raw/|raw|.
    gh = _project_out(aux["normal"], g_normal) / aux["hnorm"][:, None]
    for raw, norm, sign, idx in (
        (aux["raw_b"], aux["norm_b"], aux["sign_b"], bottom),
        (aux["raw_t"], aux["norm_t"], aux["sign_t"], top),
    ):
        unit = raw / norm[:, None]
        g_raw = sign[:, None] * _project_out(unit, gh) / norm[:, None]
        if d == 2:
            g_edge = _rot90_t(g_raw)
            np.add.at(grad, idx[:, 1], g_edge)
            np.add.at(grad, idx[:, 0], -g_edge)
        else:
            e1 = q[idx[:, 1]] - q[idx[:, 0]]
            e2 = q[idx[:, 2]] - q[idx[:, 0]]
            g_e1 = np.cross(e2, g_raw)
            g_e2 = np.cross(g_raw, e1)
            np.add.at(grad, idx[:, 1], g_e1)
            np.add.at(grad, idx[:, 2], g_e2)
            np.add.at(grad, idx[:, 0], -(g_e1 + g_e2))

    # S chain: S = hs/|hs|, hs = sum of unit side vectors.
    ghs = _project_out(aux["transversal"], g_transversal) / aux["hsnorm"][:, None]
    units = aux["units"]
    for i in range(d):
        ui = units[:, i, :]
        g_side = (ghs - ui * np.sum(ui * ghs, axis=1, keepdims=True)) / aux["side_norm"][:, i][:, None]
        np.add.at(grad, top[:, i], g_side)
        np.add.at(grad, bottom[:, i], -g_side)
    return grad


# ---------------------------------------------------------------------------
# mesh file format
# ---------------------------------------------------------------------------

def save_mesh(mesh: LayeredMesh, path):
    doc = {
        "version": MESH_FORMAT_VERSION,
        "dimension": mesh.d,
        "layers": mesh.layers,
        "points_per_layer": mesh.points_per_layer,
        "vertices": mesh.vertices.tolist(),
        "simplices": mesh.simplices.tolist(),
        "prism_map": mesh.prism_map.tolist(),
        "bottom_elements": mesh.bottom_elements.tolist(),
        "top_elements": mesh.top_elements.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_mesh(path) -> LayeredMesh:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MESH_FORMAT_VERSION:
        raise MeshConstructionError(f"unsupported mesh format version {doc.get('version')!r}")
    vertices = np.array(doc["vertices"], dtype=float)
    simplices = np.array(doc["simplices"], dtype=int)
    base_elements = np.array(doc["bottom_elements"], dtype=int)
    dets = np.linalg.det(edge_matrices(vertices, simplices))
    return LayeredMesh(
        d=int(doc["dimension"]),
        layers=int(doc["layers"]),
        points_per_layer=int(doc["points_per_layer"]),
        vertices=vertices,
        simplices=simplices,
        prism_map=np.array(doc["prism_map"], dtype=int),
        base_elements=base_elements,
        orientation=np.sign(dets),
    )
