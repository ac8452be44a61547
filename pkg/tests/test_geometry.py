import math

import numpy as np
import pytest

from mqheat.geometry import (
    ChartDomainError,
    ChartMetric,
    ChartPoint,
    FlatTorus,
    GeometryError,
    InjectivityRadiusError,
    RoundSphere,
    curvature_at,
    curvature_from_jet,
    exp_map,
    log_map,
    parallel_transport,
    rnc_metric,
)


@pytest.fixture
def sphere():
    return RoundSphere(1.0)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def test_chart_point_is_immutable_and_compares_by_value():
    p = ChartPoint(0, [0.1, 0.2])
    assert p == ChartPoint(0, np.array([0.1, 0.2]))
    assert p != ChartPoint(1, [0.1, 0.2])
    with pytest.raises(ValueError):
        p.coords[0] = 3.0


def test_sphere_curvature_sign_and_magnitude():
    # Ric is -K g in this sign convention (see notes); K = 1 / r^2
    for r in (1.0, 2.5):
        m = RoundSphere(r)
        p = ChartPoint(0, [0.3, -0.4])
        cd = curvature_at(m, p)
        assert cd.gauss_curvature == pytest.approx(1 / r**2, rel=1e-6)
        assert np.allclose(cd.ricci, -cd.metric / r**2, atol=1e-6)


def test_analytic_and_finite_difference_jets_agree(sphere):
    coords = np.array([0.4, 0.1])
    analytic = curvature_from_jet(*sphere.metric_jet(0, coords))[2]
    fd = curvature_from_jet(*super(RoundSphere, sphere).metric_jet(0, coords))[2]
    assert np.abs(analytic - fd).max() < 1e-6


def test_chart_transition_round_trip(sphere):
    p = ChartPoint(0, [0.7, -0.5])
    q = sphere.to_chart(p, 1)
    back = sphere.to_chart(q, 0)
    assert np.allclose(back.coords, p.coords, atol=1e-14)
    assert np.allclose(sphere.to_ambient(1, q.coords), sphere.to_ambient(0, p.coords))


def test_out_of_chart_point_rejected(sphere):
    with pytest.raises(ChartDomainError):
        sphere.check_point(ChartPoint(0, [5.0, 0.0]))


@pytest.mark.parametrize("chart", [0, 1])
def test_exp_log_round_trip(sphere, chart):
    p = ChartPoint(chart, [0.2, -0.3])
    v = sphere.frame_at(p).vectors @ np.array([0.9, 0.4])
    q = exp_map(sphere, p, v)
    seg = log_map(sphere, p, q)
    assert np.allclose(seg.log_vector, v, atol=1e-12)
    assert seg.length == pytest.approx(sphere.norm(p, v), abs=1e-12)


def test_antipodal_points_raise(sphere):
    p = sphere.canonical(np.array([0.0, 0.0, 1.0]))
    q = sphere.canonical(np.array([0.0, 0.0, -1.0]))
    with pytest.raises(InjectivityRadiusError):
        sphere.log_map(p, q)
    with pytest.raises(InjectivityRadiusError):
        sphere.exp_map(p, np.array([4.0, 0.0]))


def test_transport_is_orthogonal_and_keeps_geodesic_tangent(sphere):
    p = ChartPoint(0, [0.1, 0.5])
    q = ChartPoint(1, [0.3, 0.2])
    seg = sphere.log_map(p, q)
    P = parallel_transport(sphere, seg)
    assert np.abs(P.T @ P - np.eye(2)).max() < 1e-12
    t0 = np.linalg.solve(sphere.frame_at(p).vectors, seg.log_vector)
    t1 = -np.linalg.solve(sphere.frame_at(q).vectors, sphere.log_map(q, p).log_vector)
    assert np.allclose(P @ t0, t1, atol=1e-12)


def test_octant_triangle_holonomy_is_quarter_turn(sphere):
    verts = [sphere.canonical(np.array(v, float)) for v in ([1, 0, 0], [0, 1, 0], [0, 0, 1])]
    M = np.eye(2)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        M = sphere.parallel_transport(sphere.log_map(verts[a], verts[b])) @ M
    # the octant has area pi / 2
    assert abs(math.atan2(M[1, 0], M[0, 0])) == pytest.approx(math.pi / 2, abs=1e-12)


def test_pair_geometry_matches_single_pair_maps(sphere):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    cids, u = sphere.from_ambient(X)
    from mqheat.geometry import PointBatch

    pts = PointBatch(cids, u, sphere.frames(cids, u))
    xs = pts.take([0, 1, 2])
    ys = pts.take([3, 4, 5])
    geom = sphere.pair_geometry(xs, ys)
    for i in range(3):
        x, y = xs.point(i), ys.point(i)
        seg = sphere.log_map(x, y)
        assert geom.distance[i] == pytest.approx(seg.length, abs=1e-12)
        assert np.allclose(geom.ybar[i], np.linalg.solve(xs.frames[i], seg.log_vector), atol=1e-12)
        back = sphere.parallel_transport(sphere.log_map(y, x))
        assert np.allclose(geom.transport[i], back, atol=1e-12)


def test_torus_wraps_and_is_flat():
    T = FlatTorus((1.0, 2.0))
    p = ChartPoint(0, [0.95, 1.9])
    q = ChartPoint(0, [0.05, 0.1])
    seg = T.log_map(p, q)
    assert np.allclose(seg.log_vector, [0.1, 0.2])
    assert np.allclose(T.parallel_transport(seg), np.eye(2))
    assert np.allclose(curvature_at(T, p).riemann, 0)
    assert T.volume == pytest.approx(2.0)


def test_torus_injectivity_boundary():
    T = FlatTorus((1.0, 1.0))
    with pytest.raises(InjectivityRadiusError):
        T.log_map(ChartPoint(0, [0.0, 0.0]), ChartPoint(0, [0.5, 0.0]))


def test_chart_metric_reproduces_the_sphere(sphere):
    cm = ChartMetric(lambda c: sphere.metric(0, c), dim=2, domain=((-3, -3), (3, 3)), injectivity_radius=3.0)
    p = ChartPoint(0, [0.1, -0.2])
    q = ChartPoint(0, [0.5, 0.3])
    s1, s2 = sphere.log_map(p, q), cm.log_map(p, q)
    assert np.allclose(s1.log_vector, s2.log_vector, atol=1e-8)
    assert np.allclose(sphere.parallel_transport(s1), cm.parallel_transport(s2), atol=1e-8)
    assert curvature_at(cm, p).gauss_curvature == pytest.approx(1.0, rel=1e-5)


def test_chart_metric_validation():
    with pytest.raises(GeometryError):
        ChartMetric(lambda c: np.eye(3), dim=3)
    cm = ChartMetric(lambda c: np.broadcast_to(np.diag([1.0, -1.0]), np.shape(c)[:-1] + (2, 2)), domain=((-1, -1), (1, 1)))
    with pytest.raises(GeometryError):
        curvature_at(cm, ChartPoint(0, [0.0, 0.0]))


def test_normal_coordinate_metric_is_identity_at_center(sphere):
    p = ChartPoint(1, [0.2, 0.1])
    assert np.allclose(rnc_metric(sphere, p, [0.0, 0.0]), np.eye(2), atol=1e-9)
