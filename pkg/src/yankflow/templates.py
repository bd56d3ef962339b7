"""Built-in layered template generators used by the experiments and the CLI."""

from __future__ import annotations

import numpy as np

from .mesh import LayeredMesh, MeshConstructionError, build_layered_template


def sine_template(n=60, layers=5, x_range=(0.0, 3.0), amplitude=0.25,
                  frequency=2.5, phase=0.1, y_offset=0.6, step=0.05) -> LayeredMesh:
    """Cosine-graph template: the middle layer is the graph of
    x -> amplitude*cos(frequency*(x - phase)) + y_offset, and the other layers
    are normal displacements of it with the given step size."""
    x = np.linspace(x_range[0], x_range[1], n)
    y = amplitude * np.cos(frequency * (x - phase)) + y_offset
    slope = -amplitude * frequency * np.sin(frequency * (x - phase))
    normal = np.stack([-slope, np.ones_like(slope)], axis=1)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    middle = np.stack([x, y], axis=1)
    base = middle - ((layers - 1) / 2.0) * step * normal
    return build_layered_template(base, lambda pts: step * normal, layers)


def _mixsin_profile(x):
    return 20.0 + np.sin(6 * x) + 0.5 * np.sin(10 * x) + np.sin(14 * x) + 0.3 * np.sin(18 * x)


def mixsin_height(nu, x):
    """Height of the mixsin layered structure at layer coordinate nu in [0, 1]."""
    return nu * _mixsin_profile(np.asarray(x, dtype=float)) / 20.0


def mixsin_template(n=60, layers=5, x_range=(0.0, 3.0)) -> LayeredMesh:
    """Layered strip whose layer nu is the graph of nu*(20 + mixed sines)/20;
    the bottom layer is flat at y = 0 and the transversal is vertical."""
    x = np.linspace(x_range[0], x_range[1], n)
    base = np.stack([x, np.zeros_like(x)], axis=1)
    step_y = _mixsin_profile(x) / 20.0 / (layers - 1)
    steps = np.stack([np.zeros_like(x), step_y], axis=1)
    return build_layered_template(base, lambda pts: steps, layers)


def flat_template(n=20, layers=2, width=1.0, height=1.0, origin=(0.0, 0.0)) -> LayeredMesh:
    """Axis-aligned rectangle with horizontal layers and vertical transversal."""
    x = origin[0] + np.linspace(0.0, width, n)
    base = np.stack([x, np.full_like(x, origin[1])], axis=1)
    steps = np.tile([0.0, height / (layers - 1)], (n, 1))
    return build_layered_template(base, lambda pts: steps, layers)


def flat_box_template(nx=4, ny=4, layers=2, width=1.0, depth=1.0, height=1.0) -> LayeredMesh:
    """3D box: an nx-by-ny triangulated grid as the flat bottom layer, stacked
    vertically.  Grid cells are split by the diagonal through their smallest
    vertex index so that the base triangulation is itself consistent."""
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, depth, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    base = np.stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)], axis=1)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx
            e = c + 1
            tris.append((a, b, e))
            tris.append((a, e, c))
    steps = np.tile([0.0, 0.0, height / (layers - 1)], (nx * ny, 1))
    return build_layered_template(base, lambda pts: steps, layers, base_elements=np.array(tris))


GENERATORS = {
    "sine": sine_template,
    "mixsin": mixsin_template,
    "flat": flat_template,
    "flatbox": flat_box_template,
}


def make_template(name, **kwargs) -> LayeredMesh:
    if name not in GENERATORS:
        raise MeshConstructionError(
            f"unknown template {name!r}; available: {sorted(GENERATORS)}"
        )
    return GENERATORS[name](**kwargs)
