"""Varifold pseudo-metric, discrepancy, and vertex gradients."""

import numpy as np
import pytest

from yankflow.kernel import ValidationError
from yankflow.templates import flat_box_template, sine_template
from yankflow.varifold import (
    BoundarySurface,
    VarifoldConfig,
    cauchy_kernel,
    discrepancy,
    discrepancy_gradient,
    layer_surface,
    load_surface,
    save_surface,
    total_discrepancy,
    total_discrepancy_gradient,
    varifold_product,
)

CFG = VarifoldConfig(tau=0.3)


def _segment(a, b):
    return BoundarySurface(d=2, vertices=np.array([a, b], dtype=float),
                           elements=np.array([[0, 1]]))


def _random_curve(rng, n_pts=6, shift=(0.0, 0.0)):
    x = np.sort(rng.uniform(0, 2, n_pts))
    y = rng.uniform(-0.5, 0.5, n_pts)
    verts = np.stack([x + shift[0], y + shift[1]], axis=1)
    elements = np.stack([np.arange(n_pts - 1), np.arange(1, n_pts)], axis=1)
    return BoundarySurface(d=2, vertices=verts, elements=elements)


def test_cauchy_kernel_values():
    assert cauchy_kernel(0.0) == 1.0
    assert cauchy_kernel(1.0) == 0.25
    assert abs(cauchy_kernel(3.0) - 0.01) < 1e-17


def test_product_orthogonal_normals_is_zero():
    s1 = _segment([0.0, 0.0], [1.0, 0.0])      # normal (0, 1)
    s2 = _segment([2.0, 0.0], [2.0, 1.0])      # normal (-1, 0)
    assert varifold_product(s1, s2, CFG) == 0.0


def test_product_unit_segment_with_itself():
    s = _segment([0.0, 0.0], [1.0, 0.0])
    assert abs(varifold_product(s, s, CFG) - 1.0) < 1e-15


def test_product_parallel_segments_pinned_value():
    s1 = _segment([0.0, 0.0], [1.0, 0.0])
    s2 = _segment([0.0, 0.3], [1.0, 0.3])
    # midpoint distance 0.3, tau 0.3 -> chi(1) = 1/4, normals parallel
    assert abs(varifold_product(s1, s2, CFG) - 0.25) < 1e-15


def test_product_symmetric_bitwise():
    rng = np.random.default_rng(0)
    s1 = _random_curve(rng)
    s2 = _random_curve(rng, shift=(0.3, 0.1))
    assert varifold_product(s1, s2, CFG) == varifold_product(s2, s1, CFG)


def test_discrepancy_identical_surfaces_zero():
    rng = np.random.default_rng(1)
    s1 = _random_curve(rng)
    s2 = BoundarySurface(d=2, vertices=s1.vertices.copy(), elements=s1.elements.copy())
    assert discrepancy(s1, s2, CFG) == 0.0


def test_discrepancy_far_apart_splits():
    rng = np.random.default_rng(2)
    s1 = _random_curve(rng)
    s2 = _random_curve(rng, shift=(1000.0, 0.0))
    total = discrepancy(s1, s2, CFG)
    split = varifold_product(s1, s1, CFG) + varifold_product(s2, s2, CFG)
    assert abs(total - split) < 1e-10 * split


def test_discrepancy_brute_force_oracle():
    rng = np.random.default_rng(3)
    cfg = VarifoldConfig(tau=0.45)
    s1 = _random_curve(rng)
    s2 = _random_curve(rng, shift=(0.2, -0.1))

    def nu(sa, sb):
        total = 0.0
        for ea in sa.elements:
            pa, pb = sa.vertices[ea]
            ma = 0.5 * (pa + pb)
            ea_vec = pb - pa
            la = np.hypot(*ea_vec)
            na = np.array([-ea_vec[1], ea_vec[0]]) / la
            for eb in sb.elements:
                qa, qb = sb.vertices[eb]
                mb = 0.5 * (qa + qb)
                eb_vec = qb - qa
                lb = np.hypot(*eb_vec)
                nb = np.array([-eb_vec[1], eb_vec[0]]) / lb
                dist = np.linalg.norm(ma - mb)
                total += (1 + (dist / cfg.tau) ** 2) ** -2 * (na @ nb) ** 2 * la * lb
        return total

    expected = nu(s1, s1) - 2 * nu(s1, s2) + nu(s2, s2)
    got = discrepancy(s1, s2, cfg)
    assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))


def test_discrepancy_nonnegative_1000_random_pairs():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        s1 = _random_curve(rng, n_pts=int(rng.integers(3, 7)))
        s2 = _random_curve(rng, n_pts=int(rng.integers(3, 7)),
                           shift=(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)))
        assert discrepancy(s1, s2, CFG) >= -1e-12


def test_gradient_fd_2d_and_3d():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        s1 = _random_curve(rng)
        s2 = _random_curve(rng, shift=(0.1, 0.05))
        grad = discrepancy_gradient(s1, s2, CFG)
        direction = rng.standard_normal(s1.vertices.shape)
        h = 1e-6
        fp = discrepancy(s1.moved(s1.vertices + h * direction), s2, CFG)
        fm = discrepancy(s1.moved(s1.vertices - h * direction), s2, CFG)
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(float(np.sum(grad * direction)) - fd) / max(abs(fd), 1e-10))
    assert worst < 1e-6, f"worst {worst:.2e}"

    mesh3 = flat_box_template(nx=4, ny=3, layers=2)
    t1 = layer_surface(mesh3, mesh3.vertices + 0.03 * rng.standard_normal(mesh3.vertices.shape), 1)
    t2 = layer_surface(mesh3, mesh3.vertices, 1)
    grad = discrepancy_gradient(t1, t2, CFG)
    direction = rng.standard_normal(t1.vertices.shape)
    h = 1e-6
    fd = (discrepancy(t1.moved(t1.vertices + h * direction), t2, CFG)
          - discrepancy(t1.moved(t1.vertices - h * direction), t2, CFG)) / (2 * h)
    assert abs(float(np.sum(grad * direction)) - fd) / max(abs(fd), 1e-10) < 1e-6


def test_gradient_zero_at_perfect_match():
    rng = np.random.default_rng(6)
    s1 = _random_curve(rng)
    s2 = BoundarySurface(d=2, vertices=s1.vertices.copy(), elements=s1.elements.copy())
    grad = discrepancy_gradient(s1, s2, CFG)
    assert np.max(np.abs(grad)) < 1e-12


def test_gradient_translation_invariance():
    rng = np.random.default_rng(7)
    s1 = _random_curve(rng)
    s2 = _random_curve(rng, shift=(0.2, 0.0))
    g1 = discrepancy_gradient(s1, s2, CFG)
    shift = np.array([3.7, -1.2])
    g2 = discrepancy_gradient(s1.moved(s1.vertices + shift),
                              s2.moved(s2.vertices + shift), CFG)
    assert np.allclose(g1, g2, atol=1e-12)


def test_rho_rigid_rotation_invariance():
    rng = np.random.default_rng(8)
    s1 = _random_curve(rng)
    s2 = _random_curve(rng, shift=(0.15, -0.05))
    base = discrepancy(s1, s2, CFG)
    c, s = np.cos(0.8), np.sin(0.8)
    rot = np.array([[c, -s], [s, c]])
    rotated = discrepancy(s1.moved(s1.vertices @ rot.T), s2.moved(s2.vertices @ rot.T), CFG)
    assert abs(base - rotated) < 1e-10 * max(1.0, base)


def test_orientation_flip_leaves_rho_unchanged():
    rng = np.random.default_rng(9)
    s1 = _random_curve(rng)
    s2 = _random_curve(rng, shift=(0.1, 0.1))
    base = discrepancy(s1, s2, CFG)
    flipped = BoundarySurface(d=2, vertices=s2.vertices.copy(),
                              elements=s2.elements[:, ::-1].copy())
    assert abs(discrepancy(s1, flipped, CFG) - base) < 1e-12 * max(1.0, base)


def test_empty_surface_rejected():
    with pytest.raises(ValidationError):
        BoundarySurface(d=2, vertices=np.zeros((2, 2)), elements=np.zeros((0, 2), dtype=int))


def test_layer_surface_extraction_and_totals():
    mesh = sine_template(n=10, layers=4)
    rng = np.random.default_rng(10)
    q = mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape)
    targets = {0: layer_surface(mesh, mesh.vertices, 0),
               3: layer_surface(mesh, mesh.vertices, 3)}
    total = total_discrepancy(mesh, q, targets, CFG)
    per_layer = sum(discrepancy(layer_surface(mesh, q, layer), t, CFG)
                    for layer, t in targets.items())
    assert abs(total - per_layer) < 1e-14
    value, grad = total_discrepancy_gradient(mesh, q, targets, CFG)
    assert abs(value - total) < 1e-14
    # gradient only on registered layers
    middle = np.concatenate([mesh.layer_vertex_indices(1), mesh.layer_vertex_indices(2)])
    assert np.all(grad[middle] == 0.0)
    direction = rng.standard_normal(q.shape)
    h = 1e-6
    fd = (total_discrepancy(mesh, q + h * direction, targets, CFG)
          - total_discrepancy(mesh, q - h * direction, targets, CFG)) / (2 * h)
    assert abs(float(np.sum(grad * direction)) - fd) / max(abs(fd), 1e-10) < 1e-6


def test_surface_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    s1 = _random_curve(rng)
    path = tmp_path / "surface.json"
    save_surface(s1, path)
    loaded = load_surface(path)
    assert np.array_equal(loaded.vertices, s1.vertices)
    assert np.array_equal(loaded.elements, s1.elements)
    assert loaded.d == 2


def test_varifold_config_validation():
    with pytest.raises(ValidationError):
        VarifoldConfig(tau=0.0)
