"""Transported-potential and free-yank work forms and derivatives."""

import numpy as np
import pytest

from yankflow.kernel import ValidationError
from yankflow.mesh import build_layered_template
from yankflow.templates import flat_template
from yankflow.yank import (
    FreeYank,
    PotentialParams,
    dq_free_work,
    dq_work,
    dtheta_work,
    free_work_form,
    free_yank_covector,
    load_control,
    potential_eval,
    save_control,
    work_form,
    yank_covector,
)


def _test_mesh():
    return flat_template(n=12, layers=3, width=1.2, height=0.24)


def _perturbed(mesh, rng, rel=0.1):
    from yankflow.mesh import simplex_scales
    edge = simplex_scales(mesh.vertices, mesh.simplices).min()
    return mesh.vertices + rel * edge * rng.uniform(-1, 1, mesh.vertices.shape)


# ---------------------------------------------------------------------------
# potential
# ---------------------------------------------------------------------------

def test_potential_pinned_values():
    theta = PotentialParams(c=np.array([0.4, -0.2]), h=3.0, r=0.5)
    assert potential_eval(theta, theta.c) == 3.0
    boundary = theta.c + np.array([0.5, 0.0])
    assert potential_eval(theta, boundary) == 0.0
    at_half = theta.c + np.array([0.5 / np.sqrt(2), 0.0])
    assert abs(potential_eval(theta, at_half) - 3.0 / 4.0) < 1e-12


def test_potential_outside_support_is_zero():
    theta = PotentialParams(c=np.zeros(2), h=2.0, r=0.3)
    pts = np.array([[0.31, 0.0], [5.0, 5.0], [0.0, -0.4]])
    assert np.all(potential_eval(theta, pts) == 0.0)


def test_potential_c1_across_support_boundary():
    # C^1 continuity at |x-c| = r: the first-order Taylor remainder across the
    # boundary is O(step^2); a mere C^0 kink would leave an O(step) residue.
    theta = PotentialParams(c=np.zeros(2), h=2.0, r=0.5)
    from yankflow.yank import potential_dtheta
    step = 1e-4
    for direction in (np.array([1.0, 0.0]), np.array([0.6, 0.8])):
        x = 0.5 * direction
        g0 = potential_eval(theta, x)
        assert g0 == 0.0
        # analytic boundary gradient vanishes (shared by both sides)
        for side in (step, -step):
            taylor = g0  # gradient is zero at the boundary
            actual = potential_eval(theta, x + side * direction)
            assert abs(actual - taylor) < 1e-6
    # and the one-sided derivative jump shrinks linearly with the step
    def jump(s):
        x = 0.5 * np.array([1.0, 0.0])
        d = np.array([1.0, 0.0])
        inner = (potential_eval(theta, x) - potential_eval(theta, x - s * d)) / s
        outer = (potential_eval(theta, x + s * d) - potential_eval(theta, x)) / s
        return abs(inner - outer)
    assert jump(1e-5) < 0.2 * jump(1e-4) < 0.04 * jump(1e-3)


def test_potential_requires_positive_radius():
    with pytest.raises(ValidationError):
        PotentialParams(c=np.zeros(2), h=1.0, r=0.0)


# ---------------------------------------------------------------------------
# transported-potential work form
# ---------------------------------------------------------------------------

def test_work_form_zero_height():
    mesh = _test_mesh()
    rng = np.random.default_rng(0)
    theta = PotentialParams(c=np.array([0.5, 0.1]), h=0.0, r=0.4)
    w = rng.standard_normal(mesh.vertices.shape)
    assert work_form(mesh, mesh.vertices, theta, w) == 0.0
    assert np.all(yank_covector(mesh, mesh.vertices, theta) == 0.0)


def test_work_form_divergence_free_field():
    mesh = _test_mesh()
    theta = PotentialParams(c=np.array([0.5, 0.1]), h=2.0, r=0.4)
    w_rot = mesh.vertices @ np.array([[0.0, -1.0], [1.0, 0.0]]).T
    assert abs(work_form(mesh, mesh.vertices, theta, w_rot)) < 1e-12


def test_work_form_single_triangle_hand_value():
    # unit-square mesh of two triangles with w(x) = x: div = 2, area = 1/2
    # each, so the value is -sum_T g_T * 2 * (1/2) = -(g_1 + g_2)
    mesh = build_layered_template(
        np.array([[0.0, 0.0], [1.0, 0.0]]),
        lambda p: np.tile([0.0, 1.0], (2, 1)), 2)
    # big radius so every centroid sits inside; g_T is then exactly computable
    theta = PotentialParams(c=np.zeros(2), h=1.0, r=100.0)
    w = mesh.vertices.copy()
    value = work_form(mesh, mesh.vertices, theta, w)
    from yankflow.yank import template_centroids
    g_vals = potential_eval(theta, template_centroids(mesh))
    assert abs(value - (-(g_vals * 2.0 * 0.5).sum())) < 1e-12


def test_yank_covector_pairing_and_fd():
    mesh = _test_mesh()
    rng = np.random.default_rng(3)
    q = _perturbed(mesh, rng)
    theta = PotentialParams(c=np.array([0.6, 0.12]), h=1.7, r=0.3)
    j = yank_covector(mesh, q, theta)
    for _ in range(20):
        w = rng.standard_normal(q.shape)
        assert abs(float(np.sum(j * w)) - work_form(mesh, q, theta, w)) \
            <= 1e-12 * max(1.0, abs(work_form(mesh, q, theta, w)))
    w = rng.standard_normal(q.shape)
    h = 1e-6
    dw = rng.standard_normal(q.shape)
    fd = (work_form(mesh, q, theta, w + h * dw) - work_form(mesh, q, theta, w - h * dw)) / (2 * h)
    assert abs(float(np.sum(j * dw)) - fd) < 1e-8 * max(1.0, abs(fd))


def test_dq_work_fd_and_translation_invariance():
    mesh = _test_mesh()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        q = _perturbed(mesh, rng)
        theta = PotentialParams(c=np.array([rng.uniform(0.2, 1.0), rng.uniform(0, 0.25)]),
                                h=rng.uniform(0.5, 3.0), r=rng.uniform(0.2, 0.5))
        w = rng.standard_normal(q.shape)
        grad = dq_work(mesh, q, theta, w)
        direction = rng.standard_normal(q.shape)
        h = 1e-6
        fd = (work_form(mesh, q + h * direction, theta, w)
              - work_form(mesh, q - h * direction, theta, w)) / (2 * h)
        worst = max(worst, abs(float(np.sum(grad * direction)) - fd) / max(abs(fd), 1e-10))
    assert worst < 1e-6, f"worst {worst:.2e}"
    # rigid translation leaves tr(W Q^-1) and volumes unchanged
    pairing = float(np.sum(grad * np.array([1.0, 1.0])[None, :]))
    assert abs(pairing) < 1e-9


def test_dtheta_work_h_linearity_and_fd():
    mesh = _test_mesh()
    rng = np.random.default_rng(13)
    q = _perturbed(mesh, rng)
    w = rng.standard_normal(q.shape)
    theta = PotentialParams(c=np.array([0.55, 0.1]), h=1.3, r=0.35)
    grad = dtheta_work(mesh, q, theta, w)
    unit = PotentialParams(c=theta.c, h=1.0, r=theta.r)
    assert abs(grad[-1] - work_form(mesh, q, unit, w)) < 1e-12
    worst = 0.0
    for _ in range(50):
        theta_i = PotentialParams(c=np.array([rng.uniform(0.2, 1.0), rng.uniform(0, 0.25)]),
                                  h=rng.uniform(0.5, 3.0), r=rng.uniform(0.25, 0.5))
        w_i = rng.standard_normal(q.shape)
        grad_i = dtheta_work(mesh, q, theta_i, w_i)
        h = 1e-6
        for axis in range(2):
            tp = theta_i.theta().copy()
            tm = tp.copy()
            tp[axis] += h
            tm[axis] -= h
            fd = (work_form(mesh, q, PotentialParams.from_theta(tp, theta_i.r), w_i)
                  - work_form(mesh, q, PotentialParams.from_theta(tm, theta_i.r), w_i)) / (2 * h)
            worst = max(worst, abs(grad_i[axis] - fd) / max(abs(fd), 1e-8))
    assert worst < 1e-6, f"worst {worst:.2e}"


def test_dtheta_center_gradient_vanishes_on_support_boundary():
    from yankflow.yank import potential_dtheta
    theta = PotentialParams(c=np.zeros(2), h=2.0, r=0.5)
    on_boundary = np.array([0.3, 0.4])
    dc, dh = potential_dtheta(theta, on_boundary)
    assert np.all(dc == 0.0)
    assert dh == 0.0


# ---------------------------------------------------------------------------
# free yank
# ---------------------------------------------------------------------------

def test_free_work_form_trivial_and_double_loop():
    mesh = _test_mesh()
    rng = np.random.default_rng(19)
    q = _perturbed(mesh, rng)
    zero = np.zeros((mesh.n_simplices, 2))
    w = rng.standard_normal(q.shape)
    assert free_work_form(mesh, q, zero, w) == 0.0

    coeffs = rng.standard_normal((mesh.n_simplices, 2))
    value = free_work_form(mesh, q, coeffs, w)
    oracle = 0.0
    for k, simplex in enumerate(mesh.simplices):
        wbar = w[simplex].mean(axis=0)
        quad = (q[simplex[1:]] - q[simplex[0]]).T
        area = abs(np.linalg.det(quad)) / 2.0
        oracle += float(coeffs[k] @ wbar) * area
    assert abs(value - oracle) < 1e-12 * max(1.0, abs(oracle))


def test_free_single_simplex_unit_case():
    # one triangle of unit area, constant w = e1, j = e1 -> work = 1
    base = np.array([[0.0, 0.0], [2.0, 0.0]])
    mesh = build_layered_template(base, lambda p: np.tile([0.0, 1.0], (2, 1)), 2)
    coeffs = np.zeros((2, 2))
    coeffs[0] = [1.0, 0.0]
    w = np.tile([1.0, 0.0], (4, 1))
    value = free_work_form(mesh, mesh.vertices, coeffs, w)
    assert abs(value - 1.0) < 1e-14


def test_free_yank_covector_pairing_and_dq_fd():
    mesh = _test_mesh()
    rng = np.random.default_rng(23)
    q = _perturbed(mesh, rng)
    coeffs = rng.standard_normal((mesh.n_simplices, 2))
    j = free_yank_covector(mesh, q, coeffs)
    for _ in range(10):
        w = rng.standard_normal(q.shape)
        assert abs(float(np.sum(j * w)) - free_work_form(mesh, q, coeffs, w)) < 1e-12
    w = rng.standard_normal(q.shape)
    grad = dq_free_work(mesh, q, coeffs, w)
    direction = rng.standard_normal(q.shape)
    h = 1e-6
    fd = (free_work_form(mesh, q + h * direction, coeffs, w)
          - free_work_form(mesh, q - h * direction, coeffs, w)) / (2 * h)
    assert abs(float(np.sum(grad * direction)) - fd) / max(abs(fd), 1e-10) < 1e-6


def test_free_work_dimension_mismatch():
    mesh = _test_mesh()
    with pytest.raises(ValidationError):
        free_work_form(mesh, mesh.vertices, np.zeros((3, 2)), mesh.vertices)


def test_control_serialization_roundtrip(tmp_path):
    theta = PotentialParams(c=np.array([1.5, 0.5]), h=2.0, r=0.25)
    p1 = tmp_path / "potential.json"
    save_control(theta, p1)
    loaded = load_control(p1)
    assert isinstance(loaded, PotentialParams)
    assert np.array_equal(loaded.c, theta.c) and loaded.h == theta.h and loaded.r == theta.r

    rng = np.random.default_rng(29)
    free = FreeYank(rng.standard_normal((3, 5, 2)))
    p2 = tmp_path / "free.json"
    save_control(free, p2)
    loaded2 = load_control(p2)
    assert isinstance(loaded2, FreeYank)
    assert np.array_equal(loaded2.coefficients, free.coefficients)
