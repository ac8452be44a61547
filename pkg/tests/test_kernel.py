import math

import numpy as np
import pytest

from mqheat.evolution import build_grid
from mqheat.geometry import ChartPoint, FlatTorus, RoundSphere
from mqheat.grassmann import exterior_power
from mqheat.kernel import KernelOptions, build_mq_kernel, check_operator_norm, gaussian_factor


def test_options_validate_cutoff():
    with pytest.raises(ValueError):
        KernelOptions(gaussian_cutoff=3.0)
    assert KernelOptions().radius(0.01, 5.0) == pytest.approx(0.7)
    assert KernelOptions().radius(4.0, 5.0) == 5.0
    bare = KernelOptions.bare()
    assert not (bare.include_ricci_scalar or bare.include_linear_curvature or bare.include_quadratic_rho)


def test_nonpositive_time_rejected():
    T = FlatTorus((1.0, 1.0))
    p = ChartPoint(0, [0.1, 0.1])
    with pytest.raises(ValueError):
        build_mq_kernel(T, p, p, 0.0)


def test_flat_kernel_is_gaussian_times_identity():
    T = FlatTorus((2 * math.pi, 2 * math.pi))
    x = ChartPoint(0, [0.3, 0.2])
    y = ChartPoint(0, [0.5, 0.9])
    t = 0.1
    k = build_mq_kernel(T, x, y, t)
    d2 = 0.2**2 + 0.7**2
    g = math.exp(-d2 / (2 * t)) / (2 * math.pi * t)
    assert k.h_value == pytest.approx(g, rel=1e-13)
    assert np.allclose(k.op.matrix, g * np.eye(4), rtol=1e-13, atol=0)


def test_closed_form_matches_grassmann_engine_on_sphere():
    S = RoundSphere(1.0)
    rng = np.random.default_rng(5)
    for _ in range(4):
        x = ChartPoint(int(rng.integers(2)), rng.uniform(-0.5, 0.5, 2))
        v = S.frame_at(x).vectors @ rng.normal(scale=0.3, size=2)
        y = S.exp_map(x, v)
        for opts in (KernelOptions(), KernelOptions(True, False, True), KernelOptions(True, True, False)):
            a = build_mq_kernel(S, x, y, 0.05, opts, engine="closed").op.matrix
            b = build_mq_kernel(S, x, y, 0.05, opts, engine="grassmann").op.matrix
            assert np.allclose(a, b, atol=1e-12 * np.abs(a).max())


def test_bare_kernel_is_gaussian_times_transport():
    S = RoundSphere(1.0)
    x = ChartPoint(0, [0.1, 0.0])
    y = ChartPoint(0, [0.3, 0.2])
    t = 0.05
    k = build_mq_kernel(S, x, y, t, KernelOptions.bare())
    # 1-form components at y are carried to x by the y -> x transport itself
    P = S.parallel_transport(S.log_map(y, x))
    assert np.allclose(k.op.matrix, gaussian_factor(S, x, y, t) * exterior_power(P), atol=1e-13)


def test_diagonal_top_entry_carries_the_curvature_correction():
    # notes: the top-form diagonal is (2 pi t)^-1 (1 + t K)
    for r in (1.0, 2.0):
        S = RoundSphere(r)
        x = ChartPoint(0, [0.2, 0.4])
        t = 0.03
        M = build_mq_kernel(S, x, x, t).op.matrix
        h = 1 / (2 * math.pi * t)
        assert np.allclose(np.diag(M)[:3], h, rtol=1e-12)
        assert M[3, 3] == pytest.approx(h * (1 + t / r**2), rel=1e-9)


def test_kernel_vanishes_beyond_cutoff():
    S = RoundSphere(1.0)
    x = ChartPoint(0, [0.0, 0.0])
    y = S.exp_map(x, np.array([0.5, 0.0]))  # distance 1
    k = build_mq_kernel(S, x, y, 0.01, KernelOptions(gaussian_cutoff=5.0))
    assert np.all(k.op.matrix == 0)


def test_operator_norm_deviation_halves_with_t_on_sphere():
    S = RoundSphere(1.0)
    grid = build_grid(S, 64)
    rep = check_operator_norm(S, (0.1, 0.05, 0.025), grid.batch.take([5, 900]), grid)
    assert np.all(np.abs(rep.ratios - 0.5) < 0.1)
    assert rep.slope == pytest.approx(1.0, abs=0.15)


def test_operator_norm_is_one_on_torus():
    T = FlatTorus((2 * math.pi, 2 * math.pi))
    grid = build_grid(T, 64)
    rep = check_operator_norm(T, (0.1, 0.05), grid.batch.take([0, 77]), grid)
    assert rep.deviation.max() < 1e-6
