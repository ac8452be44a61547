import math

import numpy as np
import pytest

from mqheat.evolution import build_grid
from mqheat.geometry import ChartPoint, FlatTorus, PointBatch, RoundSphere
from mqheat.oracles import (
    LaplacianStencil,
    exact_heat_blocks,
    exact_heat_kernel,
    flat_fourier_form,
    flat_gaussian_check,
    jacobi_field_oracle,
    laplace_beltrami,
    legendre_table,
    loglog_slope,
    radially_parallel_form,
    sphere_coexact_form,
    sphere_exact_form,
    sphere_function_form,
    sphere_volume_form,
    theta_heat_kernel,
)


def random_sphere_points(model, n, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    X = model.radius * X / np.linalg.norm(X, axis=1, keepdims=True)
    cids, u = model.from_ambient(X)
    return PointBatch(cids, u, model.frames(cids, u))


@pytest.fixture(scope="module")
def sphere():
    return RoundSphere(1.3)


@pytest.fixture(scope="module")
def grid(sphere):
    return build_grid(sphere, 40)


def test_loglog_slope_of_power_law():
    xs = np.array([0.1, 0.05, 0.025])
    assert loglog_slope(xs, 3 * xs**2.5) == pytest.approx(2.5)
    assert math.isnan(loglog_slope(xs, np.zeros(3)))


def test_legendre_recurrence_values():
    c = np.array([0.3, -0.7])
    P, dP, ddP = legendre_table(3, c)
    assert np.allclose(P[2], (3 * c**2 - 1) / 2)
    assert np.allclose(P[3], (5 * c**3 - 3 * c) / 2)
    assert np.allclose(dP[3], (15 * c**2 - 3) / 2)
    assert np.allclose(ddP[3], 15 * c)


@pytest.mark.parametrize(
    "make, l",
    [
        (sphere_function_form, 0),
        (sphere_function_form, 2),
        (sphere_exact_form, 1),
        (sphere_exact_form, 3),
        (sphere_coexact_form, 2),
        (sphere_volume_form, 1),
    ],
)
def test_stencil_reproduces_sphere_eigenvalues(sphere, make, l):
    form = make(sphere, l, (0.3, -0.5, 0.8))
    assert form.eigenvalue == pytest.approx(l * (l + 1) / sphere.radius**2)
    pts = random_sphere_points(sphere, 6, seed=l)
    lap = LaplacianStencil(sphere).frame_apply(form, pts)
    a = form.frame_values(pts)
    assert np.abs(lap - form.eigenvalue * a).max() < 1e-6 * max(1.0, np.abs(a).max())


def test_stencil_on_flat_fourier_forms():
    T = FlatTorus((2.0, 3.0))
    form = flat_fourier_form(T, (1, 2), degree_mask=2, phase=0.4)
    grid = build_grid(T, 8)
    lap = laplace_beltrami(T, grid, form)
    assert np.allclose(lap.values, form.eigenvalue * form.frame_values(grid.batch), atol=1e-7)


def test_theta_kernel_is_a_probability_density():
    T = FlatTorus((1.0, 1.0))
    grid = build_grid(T, 64)
    origin = np.zeros((len(grid), 2))
    for t in (0.001, 0.3):
        vals = theta_heat_kernel(T, origin, grid.batch.coords, t)
        assert grid.integrate(vals) == pytest.approx(1.0, rel=1e-10)


@pytest.mark.parametrize("degree", [0, 1, 2])
def test_exact_sphere_kernel_evolves_eigenforms(sphere, grid, degree):
    t = 0.2
    forms = {
        0: [sphere_function_form(sphere, 2, (1, 0, 0))],
        1: [sphere_exact_form(sphere, 2, (0, 1, 1)), sphere_coexact_form(sphere, 1, (1, 1, 0))],
        2: [sphere_volume_form(sphere, 3, (0, 0, 1))],
    }[degree]
    idx = [m for m in range(4) if bin(m).count("1") == degree]
    xs = random_sphere_points(sphere, 3, seed=degree)
    for form in forms:
        a = form.frame_values(grid.batch)[:, idx]
        want = form.evolved_exactly(t).frame_values(xs)[:, idx]
        for s in range(len(xs)):
            K = exact_heat_blocks(sphere, xs.take(np.full(len(grid), s)), grid.batch, t, degree)
            got = np.einsum("j,jab,jb->a", grid.weights, K, a)
            assert np.allclose(got, want[s], atol=1e-9)


def test_exact_kernel_diagonal_supertrace_is_euler_density(sphere):
    # pointwise supertrace density on a homogeneous S^2 is chi / area
    x = ChartPoint(0, [0.2, 0.1])
    for t in (0.05, 0.5, 2.0):
        k0 = exact_heat_kernel(sphere, x, x, t, 0)[0, 0]
        k1 = np.trace(exact_heat_kernel(sphere, x, x, t, 1))
        k2 = exact_heat_kernel(sphere, x, x, t, 2)[0, 0]
        assert k0 - k1 + k2 == pytest.approx(2 / sphere.volume, rel=1e-9)


def test_flat_gaussian_quadrature_is_second_order():
    rep = flat_gaussian_check(lambda x: np.cos(x[:, 0]) * np.exp(0.5 * np.sin(x[:, 1])), 0.75)
    assert rep.slope == pytest.approx(2.0, abs=0.15)


def test_radially_parallel_form_is_parallel_along_radial_geodesics(sphere):
    center = ChartPoint(0, [0.1, -0.1])
    form = radially_parallel_form(sphere, center, [0.0, 1.0, 0.5, 0.0])
    v = sphere.frame_at(center).vectors @ np.array([0.4, 0.3])
    q = sphere.exp_map(center, v)
    pq = PointBatch(np.array([q.chart_id]), q.coords[None], sphere.frame_at(q).vectors[None])
    P = sphere.parallel_transport(sphere.log_map(center, q))
    assert np.allclose(form.frame_values(pq)[0, 1:3], P @ np.array([1.0, 0.5]), atol=1e-12)


def test_jacobi_oracle_endpoints(sphere):
    x = ChartPoint(0, [0.0, 0.2])
    y = sphere.exp_map(x, sphere.frame_at(x).vectors @ np.array([0.3, 0.1]))
    seg = sphere.log_map(x, y)
    psi0, psi1 = np.array([0.2, 1.0]), np.array([1.0, -0.3])
    assert np.allclose(jacobi_field_oracle(sphere, seg, psi0, psi1, 0.0), psi0, atol=1e-7)
    back = sphere.parallel_transport(sphere.log_map(y, x))
    assert np.allclose(jacobi_field_oracle(sphere, seg, psi0, psi1, 1.0), back @ psi1, atol=1e-7)
