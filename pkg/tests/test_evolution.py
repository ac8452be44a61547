import math
import warnings

import numpy as np
import pytest

from mqheat.evolution import (
    CirculantKernelField,
    FormField,
    GridMismatchError,
    Partition,
    SparseKernelField,
    UnderResolvedWarning,
    assemble_kernel_field,
    build_grid,
    compose_partition,
    evolve,
    kernel_power,
    load_kernel_field,
)
from mqheat.geometry import FlatTorus, RoundSphere
from mqheat.kernel import KernelOptions


@pytest.fixture(scope="module")
def sphere_grid():
    return build_grid(RoundSphere(1.0), 16)


@pytest.fixture(scope="module")
def small_sphere_grid():
    return build_grid(RoundSphere(1.0), 10)


@pytest.fixture(scope="module")
def torus_grid():
    return build_grid(FlatTorus((2 * math.pi, 2 * math.pi)), 16)


def test_grid_weights_integrate_volume():
    for r in (1.0, 1.7):
        S = RoundSphere(r)
        assert build_grid(S, 12).total_weight == pytest.approx(4 * math.pi * r * r, rel=1e-12)
        assert build_grid(S, 2, kind="icosahedral").total_weight == pytest.approx(4 * math.pi * r * r, rel=1e-10)
    T = FlatTorus((1.0, 3.0))
    assert build_grid(T, 16).total_weight == pytest.approx(3.0)


def test_gauss_grid_integrates_polynomials_exactly(sphere_grid):
    X = sphere_grid.model.to_ambient(sphere_grid.batch.chart_ids, sphere_grid.batch.coords)
    # int z^2 dA = 4 pi / 3 on the unit sphere
    assert sphere_grid.integrate(X[:, 2] ** 2) == pytest.approx(4 * math.pi / 3, rel=1e-12)


def test_grid_frames_are_orthonormal(sphere_grid):
    m = sphere_grid.model
    b = sphere_grid.batch
    for cid in (0, 1):
        sel = b.chart_ids == cid
        g = m.metric(cid, b.coords[sel])
        F = b.frames[sel]
        G = np.einsum("bia,bij,bjc->bac", F, g, F)
        assert np.abs(G - np.eye(2)).max() < 1e-12


def test_build_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        build_grid(RoundSphere(1.0), 4)
    with pytest.raises(ValueError):
        build_grid(RoundSphere(1.0), 16, kind="hexagonal")


def test_partition_validation_and_totals():
    p = Partition.uniform(0.5, 4)
    assert p.total == pytest.approx(0.5) and p.mesh == pytest.approx(0.125) and len(p) == 4
    assert len(p + Partition((0.1,))) == 5
    with pytest.raises(ValueError):
        Partition((0.1, -0.2))
    with pytest.raises(ValueError):
        Partition(())


def test_form_field_checks_shape_and_grid(sphere_grid, torus_grid):
    with pytest.raises(ValueError):
        FormField(sphere_grid, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        FormField(sphere_grid, np.full((len(sphere_grid), 4), np.nan))
    a = FormField.zeros(sphere_grid)
    b = FormField.zeros(torus_grid)
    with pytest.raises(GridMismatchError):
        a + b
    f = FormField.from_function(sphere_grid, lambda batch: np.ones(len(batch)), degree=2)
    assert f.degrees_present() == {2}
    assert (2 * f).sup_norm() == 2.0


def test_circulant_and_sparse_storage_agree(small_sphere_grid):
    sphere_grid = small_sphere_grid
    m = sphere_grid.model
    t = 0.2
    c = assemble_kernel_field(m, sphere_grid, t, storage="circulant")
    s = assemble_kernel_field(m, sphere_grid, t, storage="sparse")
    assert isinstance(c, CirculantKernelField) and isinstance(s, SparseKernelField)
    dense = s.to_dense()
    assert np.abs(c.to_dense() - dense).max() < 1e-12 * np.abs(dense).max()
    rng = np.random.default_rng(0)
    a = FormField(sphere_grid, rng.normal(size=(len(sphere_grid), 4)))
    assert np.allclose(c.apply(a).values, s.apply(a).values, atol=1e-11)
    cc, ss = c.compose(c), s.compose(s)
    assert np.allclose(cc.diagonal_blocks(), ss.diagonal_blocks(), atol=1e-11)
    assert np.allclose(cc.row_blocks(37), ss.row_blocks(37), atol=1e-11)
    assert np.allclose(c.block(3, 40), s.block(3, 40), atol=1e-12)


def test_composition_matches_sequential_application(torus_grid):
    m = torus_grid.model
    rng = np.random.default_rng(1)
    a = FormField(torus_grid, rng.normal(size=(len(torus_grid), 4)))
    part = Partition((0.15, 0.1, 0.12))
    k = compose_partition(m, torus_grid, part, storage="sparse")
    direct = evolve(m, torus_grid, part, a, storage="sparse")
    assert np.allclose(k.apply(a).values, direct.values, atol=1e-10)
    assert k.t == pytest.approx(0.37)


def test_kernel_power_equals_repeated_compose(sphere_grid):
    k = assemble_kernel_field(sphere_grid.model, sphere_grid, 0.3)
    k5 = kernel_power(k, 5)
    ref = k.compose(k).compose(k).compose(k).compose(k)
    assert np.allclose(k5.to_dense(), ref.to_dense(), atol=1e-10)


def test_flat_evolution_of_fourier_mode():
    torus_grid = build_grid(FlatTorus((2 * math.pi, 2 * math.pi)), 32)
    m = torus_grid.model
    x = torus_grid.batch.coords
    vals = np.zeros((len(torus_grid), 4))
    vals[:, 1] = np.cos(x[:, 0] + 2 * x[:, 1])
    out = evolve(m, torus_grid, Partition.uniform(0.4, 4), FormField(torus_grid, vals))
    assert np.allclose(out.values[:, 1], math.exp(-5 * 0.4 / 2) * vals[:, 1], atol=1e-9)
    assert np.abs(out.values[:, [0, 2, 3]]).max() < 1e-12


def test_save_and_load_round_trip(tmp_path, sphere_grid, torus_grid):
    for storage in ("sparse", "circulant"):
        k = assemble_kernel_field(sphere_grid.model, sphere_grid, 0.2, storage=storage)
        path = tmp_path / f"k_{storage}.npz"
        k.save(path)
        back = load_kernel_field(path, sphere_grid)
        assert type(back) is type(k)
        assert np.array_equal(back.to_dense(), k.to_dense())
        with pytest.raises(GridMismatchError):
            load_kernel_field(path, torus_grid)


def test_under_resolved_grid_warns(sphere_grid):
    with pytest.warns(UnderResolvedWarning):
        assemble_kernel_field(sphere_grid.model, sphere_grid, 0.005)
    with warnings.catch_warnings():
        warnings.simplefilter("error", UnderResolvedWarning)
        assemble_kernel_field(sphere_grid.model, sphere_grid, 0.3)


def test_workers_do_not_change_results(sphere_grid):
    a = assemble_kernel_field(sphere_grid.model, sphere_grid, 0.2, storage="sparse", workers=1)
    b = assemble_kernel_field(sphere_grid.model, sphere_grid, 0.2, storage="sparse", workers=3)
    assert np.array_equal(a.to_dense(), b.to_dense())


def test_bare_kernel_preserves_constants_only_approximately(sphere_grid):
    k = assemble_kernel_field(sphere_grid.model, sphere_grid, 0.2, KernelOptions.bare())
    one = FormField.from_function(sphere_grid, lambda b: np.ones(len(b)))
    # the Gaussian is not normalised for the curved volume, so mass drifts by O(t)
    drift = np.abs(k.apply(one).values[:, 0] - 1).max()
    assert 1e-4 < drift < 0.1
