"""Riemannian structure on chart-described compact manifolds.

Three model families are provided: :class:`FlatTorus`, :class:`RoundSphere`
(two stereographic charts) and :class:`ChartMetric` (a user metric on a single,
usually periodic, chart).  Every model exposes

* the 2-jet of its metric, from which Christoffel symbols and curvature follow,
* exponential and logarithm maps, parallel transport along short geodesics,
* a vectorised ``pair_geometry`` used when whole kernel matrices are assembled.

Index conventions: ``gamma[g, m, n]`` is Gamma^g_{mn}; ``riemann[m, n, g, d]`` is
R_{mng}^d with R(d_m, d_n) d_g = R_{mng}^d d_d and R(X, Y) = [nabla_X, nabla_Y];
``ricci[s, t] = sum_m riemann[s, m, t, m]``.  Frame components are taken with
respect to orthonormal frames obtained by Gram-Schmidt on the coordinate frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ChartPoint",
    "Frame",
    "CurvatureData",
    "GeodesicSegment",
    "PointBatch",
    "PairGeometry",
    "GeometryError",
    "ChartDomainError",
    "InjectivityRadiusError",
    "ManifoldModel",
    "FlatTorus",
    "RoundSphere",
    "ChartMetric",
    "curvature_at",
    "exp_map",
    "log_map",
    "parallel_transport",
    "pt_expansion_check",
    "geodesic_variation",
    "curvature_operator",
    "rnc_metric",
    "christoffel_from_jet",
    "curvature_from_jet",
    "frame_riemann",
]


class GeometryError(ValueError):
    pass


class ChartDomainError(GeometryError):
    pass


class InjectivityRadiusError(GeometryError):
    """Raised when two points are not joined by a short geodesic."""


@dataclass(frozen=True, eq=False)
class ChartPoint:
    chart_id: int
    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float).copy())
        self.coords.setflags(write=False)

    def __eq__(self, other):
        return (
            isinstance(other, ChartPoint)
            and self.chart_id == other.chart_id
            and np.array_equal(self.coords, other.coords)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Frame:
    """Orthonormal tangent basis; columns of ``vectors`` are chart-coordinate vectors."""

    base: ChartPoint
    vectors: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.base == other.base
            and np.array_equal(self.vectors, other.vectors)
        )

    __hash__ = None


@dataclass
class CurvatureData:
    gamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    evaluated_at: ChartPoint
    metric: np.ndarray

    @property
    def riemann_lowered(self) -> np.ndarray:
        """R_{mngd} = R_{mng}^e g_{ed}."""
        return np.einsum("mnge,ed->mngd", self.riemann, self.metric)

    @property
    def scalar_curvature(self) -> float:
        """The contraction R_{mn}^{nm}; twice the Gauss curvature on a surface."""
        ginv = np.linalg.inv(self.metric)
        low = self.riemann_lowered
        return float(np.einsum("mnab,an,bm->", low, ginv, ginv))

    @property
    def gauss_curvature(self) -> float:
        return self.scalar_curvature / 2.0


@dataclass(frozen=True)
class GeodesicSegment:
    """Short geodesic s -> exp_start(s * log_vector), s in [0, 1].

    ``log_vector`` is in chart coordinates at ``start``.
    """

    start: ChartPoint
    end: ChartPoint
    log_vector: np.ndarray
    length: float


@dataclass
class PointBatch:
    """Vectorised points with their grid frames (frames[i] columns in chart coords)."""

    chart_ids: np.ndarray
    coords: np.ndarray
    frames: np.ndarray

    def __len__(self):
        return len(self.chart_ids)

    def take(self, idx) -> "PointBatch":
        return PointBatch(self.chart_ids[idx], self.coords[idx], self.frames[idx])

    def point(self, i: int) -> ChartPoint:
        return ChartPoint(int(self.chart_ids[i]), self.coords[i])


@dataclass
class PairGeometry:
    """Geometry of pairs (x_i, y_i) in the frames of the batches.

    ``ybar`` is log_x(y) in the frame at x, ``transport`` maps frame components
    at y to frame components at x by parallel transport along the short
    geodesic, ``valid`` flags pairs strictly inside the injectivity radius.
    """

    distance: np.ndarray
    ybar: np.ndarray
    transport: np.ndarray
    valid: np.ndarray


# ---------------------------------------------------------------------------
# tensor algebra from a metric 2-jet


def christoffel_from_jet(g, dg):
    """Gamma^g_{mn} from g_{mn} and dg[l, m, n] = d_l g_{mn} (batched over leading axes)."""
    if g.shape[-1] == 2:
        det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
        ginv = np.stack([np.stack([g[..., 1, 1], -g[..., 0, 1]], -1), np.stack([-g[..., 1, 0], g[..., 0, 0]], -1)], -2)
        ginv = ginv / det[..., None, None]
    else:
        ginv = np.linalg.inv(g)
    T = (
        np.swapaxes(dg, -3, -2)  # d_n g_{m e}  -> [m, n, e]
        + dg  # d_m g_{n e}
        - np.moveaxis(dg, -3, -1)  # d_e g_{m n}
    )
    d = g.shape[-1]
    # matmul batches far faster than an ellipsis einsum here
    G = np.matmul(T.reshape(T.shape[:-3] + (d * d, d)), np.swapaxes(ginv, -1, -2))
    return 0.5 * np.moveaxis(G.reshape(T.shape[:-3] + (d, d, d)), -1, -3)


def curvature_from_jet(g, dg, ddg):
    """Return (Gamma, dGamma, R, Ric) with dGamma[l, g, m, n] = d_l Gamma^g_{mn}."""
    ginv = np.linalg.inv(g)
    T = np.swapaxes(dg, -3, -2) + dg - np.moveaxis(dg, -3, -1)
    gamma = 0.5 * np.einsum("...ge,...mne->...gmn", ginv, T)
    dginv = -np.einsum("...ga,...lab,...be->...lge", ginv, dg, ginv)
    # d_l T[m, n, e] = ddg[l, n, m, e] + ddg[l, m, n, e] - ddg[l, e, m, n]
    dT = (
        np.swapaxes(ddg, -3, -2)
        + ddg
        - np.moveaxis(ddg, -3, -1)
    )
    dgamma = 0.5 * (
        np.einsum("...lge,...mne->...lgmn", dginv, T) + np.einsum("...ge,...lmne->...lgmn", ginv, dT)
    )
    # R_{mng}^d = d_m Gamma^d_{ng} - d_n Gamma^d_{mg} + Gamma^d_{mc} Gamma^c_{ng} - Gamma^d_{nc} Gamma^c_{mg}
    R = (
        np.einsum("...mdng->...mngd", dgamma)
        - np.einsum("...ndmg->...mngd", dgamma)
        + np.einsum("...dmc,...cng->...mngd", gamma, gamma)
        - np.einsum("...dnc,...cmg->...mngd", gamma, gamma)
    )
    ric = np.einsum("...smtm->...st", R)
    return gamma, dgamma, R, ric


def frame_riemann(riemann, metric, frame):
    """Lowered Riemann tensor in an orthonormal frame: R_{abcd}."""
    low = np.einsum("...mnge,...ed->...mngd", riemann, metric)
    F = frame
    return np.einsum("...mngd,...ma,...nb,...gc,...de->...abce", low, F, F, F, F)


def curvature_operator(R_frame, X, Y, Z):
    """Frame components of R(X, Y) Z given lowered frame components R_{abcd}."""
    return np.einsum("...abcd,...a,...b,...c->...d", R_frame, X, Y, Z)


def _gram_schmidt(g, basis=None):
    d = g.shape[-1]
    vecs = np.eye(d) if basis is None else np.array(basis, dtype=float)
    out = np.zeros((d, d))
    for k in range(d):
        v = vecs[:, k].copy()
        for j in range(k):
            v -= (out[:, j] @ g @ v) * out[:, j]
        out[:, k] = v / math.sqrt(v @ g @ v)
    return out


def _gram_schmidt_batch(g):
    d = g.shape[-1]
    out = np.zeros(g.shape)
    for k in range(d):
        v = np.zeros(g.shape[:-1])
        v[..., k] = 1.0
        for j in range(k):
            proj = np.einsum("...i,...ij,...j->...", out[..., :, j], g, v)
            v = v - proj[..., None] * out[..., :, j]
        nrm = np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))
        out[..., :, k] = v / nrm[..., None]
    return out


# 4th-order central stencils
_D1 = ((-2, 1.0 / 12), (-1, -8.0 / 12), (1, 8.0 / 12), (2, -1.0 / 12))
_D2 = ((-2, -1.0 / 12), (-1, 16.0 / 12), (0, -30.0 / 12), (1, 16.0 / 12), (2, -1.0 / 12))


def _fd_jet(fn, coords, h):
    """Metric 2-jet of ``fn`` by 4th-order central differences (batched coords)."""
    coords = np.asarray(coords, dtype=float)
    d = coords.shape[-1]
    g = fn(coords)
    dg = np.zeros(coords.shape[:-1] + (d, d, d))
    ddg = np.zeros(coords.shape[:-1] + (d, d, d, d))
    cache = {}

    def at(offsets):
        key = tuple(offsets)
        if key not in cache:
            shift = np.zeros(d)
            for ax, k in offsets:
                shift[ax] += k * h
            cache[key] = fn(coords + shift)
        return cache[key]

    for l in range(d):
        dg[..., l, :, :] = sum(w * at(((l, k),)) for k, w in _D1) / h
        ddg[..., l, l, :, :] = sum(w * (g if k == 0 else at(((l, k),))) for k, w in _D2) / h**2
        for j in range(l + 1, d):
            acc = 0.0
            for ka, wa in _D1:
                for kb, wb in _D1:
                    acc = acc + wa * wb * at(((l, ka), (j, kb)))
            ddg[..., l, j, :, :] = acc / h**2
            ddg[..., j, l, :, :] = ddg[..., l, j, :, :]
    # keep the jet exactly symmetric in the metric indices
    dg = 0.5 * (dg + np.swapaxes(dg, -1, -2))
    ddg = 0.5 * (ddg + np.swapaxes(ddg, -1, -2))
    return g, dg, ddg


# ---------------------------------------------------------------------------
# models


class ManifoldModel:
    """Base class; subclasses provide charts, metric jets and geodesic maps."""

    dim: int
    injectivity_radius: float
    name: str = "model"
    chart_scale: float = 1.0

    # --- charts -----------------------------------------------------------

    def contains(self, p: ChartPoint) -> bool:
        raise NotImplementedError

    def check_point(self, p: ChartPoint) -> None:
        if len(p.coords) != self.dim:
            raise ChartDomainError(f"point has {len(p.coords)} coordinates, model dim is {self.dim}")
        if not self.contains(p):
            raise ChartDomainError(f"{p} lies outside the chart domain")

    @property
    def volume(self) -> float:
        raise NotImplementedError

    # --- metric -----------------------------------------------------------

    def metric(self, chart_id: int, coords) -> np.ndarray:
        raise NotImplementedError

    def metric_jet(self, chart_id: int, coords):
        """(g, dg, ddg) with dg[l, m, n] = d_l g_mn and ddg[k, l, m, n] = d_k d_l g_mn."""
        h = 1e-4 * self.chart_scale
        return _fd_jet(lambda c: self.metric(chart_id, c), coords, h)

    def frame_at(self, p: ChartPoint) -> Frame:
        g = self.metric(p.chart_id, p.coords)
        return Frame(p, _gram_schmidt(g))

    def frames(self, chart_ids, coords) -> np.ndarray:
        """Gram-Schmidt frames for a batch of points."""
        out = np.zeros(coords.shape[:-1] + (self.dim, self.dim))
        for cid in np.unique(chart_ids):
            sel = chart_ids == cid
            out[sel] = _gram_schmidt_batch(self.metric(int(cid), coords[sel]))
        return out

    def norm(self, p: ChartPoint, v) -> float:
        g = self.metric(p.chart_id, p.coords)
        v = np.asarray(v, dtype=float)
        return float(math.sqrt(v @ g @ v))

    # --- geodesics ----------------------------------------------------------

    def exp_map(self, p: ChartPoint, v, chart: int | None = None) -> ChartPoint:
        raise NotImplementedError

    def log_map(self, center: ChartPoint, q: ChartPoint) -> GeodesicSegment:
        raise NotImplementedError

    def parallel_transport(self, seg: GeodesicSegment) -> np.ndarray:
        """Map frame components at seg.start to frame components at seg.end."""
        raise NotImplementedError

    def to_chart(self, p: ChartPoint, chart_id: int) -> ChartPoint:
        if p.chart_id == chart_id:
            return p
        raise ChartDomainError(f"{self.name} has no chart {chart_id}")

    def dexp(self, p: ChartPoint, v) -> tuple[ChartPoint, np.ndarray]:
        """(exp_p(v), chart Jacobian of w -> exp_p(w) at v) by central differences."""
        v = np.asarray(v, dtype=float)
        q = self.exp_map(p, v)
        h = 1e-6 * self.chart_scale
        J = np.zeros((self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            plus = self.exp_map(p, v + e, chart=q.chart_id).coords
            minus = self.exp_map(p, v - e, chart=q.chart_id).coords
            J[:, k] = self._coord_diff(plus, minus, q.chart_id) / (2 * h)
        return q, J

    def _coord_diff(self, a, b, chart_id):
        return np.asarray(a) - np.asarray(b)

    def pair_geometry(self, xs: PointBatch, ys: PointBatch) -> PairGeometry:
        raise NotImplementedError

    def neighbor_pairs(self, pts: PointBatch, radius: float):
        """Superset of index pairs (i, j) with d(i, j) < radius."""
        n = len(pts)
        I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return I.ravel(), J.ravel()

    def curvature_frame(self, pts: PointBatch) -> np.ndarray:
        """Lowered Riemann tensor in the batch frames, shape (B, d, d, d, d)."""
        out = np.zeros((len(pts),) + (self.dim,) * 4)
        for cid in np.unique(pts.chart_ids):
            sel = pts.chart_ids == cid
            g, dg, ddg = self.metric_jet(int(cid), pts.coords[sel])
            _, _, R, _ = curvature_from_jet(g, dg, ddg)
            out[sel] = frame_riemann(R, g, pts.frames[sel])
        return out


class FlatTorus(ManifoldModel):
    """R^d modulo a rectangular lattice with side lengths ``sides``."""

    name = "torus"

    def __init__(self, sides=(1.0, 1.0)):
        self.sides = np.asarray(sides, dtype=float)
        self.dim = len(self.sides)
        if self.dim % 2:
            raise GeometryError("dimension must be even")
        if np.any(self.sides <= 0):
            raise GeometryError("side lengths must be positive")
        self.injectivity_radius = float(self.sides.min() / 2)
        self.chart_scale = float(self.sides.min())

    def __repr__(self):
        return f"FlatTorus(sides={tuple(self.sides)})"

    @property
    def volume(self):
        return float(np.prod(self.sides))

    def contains(self, p):
        return p.chart_id == 0

    def metric(self, chart_id, coords):
        coords = np.asarray(coords, dtype=float)
        return np.broadcast_to(np.eye(self.dim), coords.shape[:-1] + (self.dim, self.dim)).copy()

    def metric_jet(self, chart_id, coords):
        coords = np.asarray(coords, dtype=float)
        d = self.dim
        lead = coords.shape[:-1]
        return self.metric(chart_id, coords), np.zeros(lead + (d,) * 3), np.zeros(lead + (d,) * 4)

    def wrap(self, delta):
        """Shortest lattice representative of a displacement."""
        L = self.sides
        return delta - L * np.round(delta / L)

    def exp_map(self, p, v, chart=None):
        self.check_point(p)
        v = np.asarray(v, dtype=float)
        if np.linalg.norm(v) >= self.injectivity_radius:
            raise InjectivityRadiusError(f"|v| = {np.linalg.norm(v):.6g} >= injectivity radius")
        return ChartPoint(0, np.mod(p.coords + v, self.sides))

    def log_map(self, center, q):
        self.check_point(center)
        self.check_point(q)
        v = self.wrap(q.coords - center.coords)
        length = float(np.linalg.norm(v))
        if length >= self.injectivity_radius:
            raise InjectivityRadiusError(f"distance {length:.6g} >= injectivity radius")
        return GeodesicSegment(center, q, v, length)

    def parallel_transport(self, seg):
        return np.eye(self.dim)

    def dexp(self, p, v):
        return self.exp_map(p, v), np.eye(self.dim)

    def _coord_diff(self, a, b, chart_id):
        return self.wrap(np.asarray(a) - np.asarray(b))

    def pair_geometry(self, xs, ys):
        delta = self.wrap(ys.coords - xs.coords)
        dist = np.linalg.norm(delta, axis=-1)
        ybar = np.einsum("bma,bm->ba", xs.frames, delta)
        P = np.einsum("bma,bmc->bac", xs.frames, ys.frames)
        return PairGeometry(dist, ybar, P, dist < self.injectivity_radius * (1 - 1e-12))

    def neighbor_pairs(self, pts, radius):
        from scipy.spatial import cKDTree

        coords = np.mod(pts.coords, self.sides)
        tree = cKDTree(coords, boxsize=self.sides)
        pairs = tree.query_pairs(min(radius, self.injectivity_radius), output_type="ndarray")
        n = len(pts)
        I = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
        J = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
        return I, J

    def curvature_frame(self, pts):
        return np.zeros((len(pts),) + (self.dim,) * 4)


class RoundSphere(ManifoldModel):
    """Sphere of radius r in R^{d+1} with two stereographic charts.

    Chart 0 projects from the south pole and is used on the northern side,
    chart 1 projects from the north pole with coordinate 1 reflected so both
    charts are positively oriented for the outward normal.  A point belongs
    to chart 0 when its latitude is at least -pi/4 and to chart 1 when it is at
    most +pi/4; the canonical chart is chosen by hemisphere.
    """

    name = "sphere"

    def __init__(self, radius=1.0, dim=2):
        if dim % 2:
            raise GeometryError("dimension must be even")
        if radius <= 0:
            raise GeometryError("radius must be positive")
        self.radius = float(radius)
        self.dim = int(dim)
        self.injectivity_radius = math.pi * self.radius
        self.chart_scale = 1.0
        self._umax2 = (1 + math.sqrt(0.5)) / (1 - math.sqrt(0.5))

    def __repr__(self):
        return f"RoundSphere(radius={self.radius}, dim={self.dim})"

    @property
    def volume(self):
        n = self.dim
        return 2 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2) * self.radius**n

    @property
    def gauss_curvature(self):
        return 1.0 / self.radius**2

    def contains(self, p):
        return p.chart_id in (0, 1) and float(p.coords @ p.coords) <= self._umax2 * (1 + 1e-12)

    # chart <-> ambient ---------------------------------------------------

    def _flip(self, arr):
        arr = np.array(arr, dtype=float, copy=True)
        arr[..., 1] *= -1
        return arr

    def to_ambient(self, chart_ids, coords):
        coords = np.asarray(coords, dtype=float)
        chart_ids = np.broadcast_to(np.asarray(chart_ids), coords.shape[:-1])
        s = np.sum(coords**2, axis=-1)
        r = self.radius
        head = 2 * r * coords / (1 + s)[..., None]
        last = r * (1 - s) / (1 + s)
        south = chart_ids == 1
        head = np.where(south[..., None], self._flip(head), head)
        last = np.where(south, -last, last)
        return np.concatenate([head, last[..., None]], axis=-1)

    def from_ambient(self, X, chart_ids=None):
        X = np.asarray(X, dtype=float)
        if chart_ids is None:
            chart_ids = np.where(X[..., -1] >= 0, 0, 1)
        chart_ids = np.broadcast_to(np.asarray(chart_ids), X.shape[:-1])
        r = self.radius
        south = chart_ids == 1
        head = np.where(south[..., None], self._flip(X[..., :-1]), X[..., :-1])
        denom = np.where(south, r - X[..., -1], r + X[..., -1])
        return chart_ids, head / denom[..., None]

    def jacobian(self, chart_ids, coords):
        """d(ambient)/d(chart), shape (..., d+1, d)."""
        coords = np.asarray(coords, dtype=float)
        chart_ids = np.broadcast_to(np.asarray(chart_ids), coords.shape[:-1])
        d = self.dim
        r = self.radius
        s = np.sum(coords**2, axis=-1)[..., None, None]
        u = coords
        head = r * (2 * np.eye(d) / (1 + s) - 4 * u[..., :, None] * u[..., None, :] / (1 + s) ** 2)
        last = (-4 * r * u / (1 + s[..., 0]) ** 2)[..., None, :]
        J = np.concatenate([head, last], axis=-2)
        # southern chart: ambient coordinate 1 and the last coordinate are reflected
        flip = np.ones((self.dim + 1, 1))
        flip[1, 0] = -1
        flip[-1, 0] = -1
        south = (chart_ids == 1)[..., None, None]
        return np.where(south, J * flip, J)

    def to_chart(self, p, chart_id):
        if p.chart_id == chart_id:
            return p
        X = self.to_ambient(p.chart_id, p.coords)
        _, u = self.from_ambient(X, chart_id)
        q = ChartPoint(chart_id, u)
        if not self.contains(q):
            raise ChartDomainError(f"point not in chart {chart_id}")
        return q

    def canonical(self, X):
        cid, u = self.from_ambient(X)
        return ChartPoint(int(cid), u)

    def _point_from_ambient(self, X, chart=None):
        if chart is not None:
            _, u = self.from_ambient(X, chart)
            return ChartPoint(int(chart), u)
        return self.canonical(X)

    # metric ----------------------------------------------------------------

    def _lam(self, coords):
        s = np.sum(np.asarray(coords, dtype=float) ** 2, axis=-1)
        return 2 * self.radius / (1 + s)

    def metric(self, chart_id, coords):
        coords = np.asarray(coords, dtype=float)
        lam = self._lam(coords)
        return (lam**2)[..., None, None] * np.eye(self.dim)

    def metric_jet(self, chart_id, coords):
        coords = np.asarray(coords, dtype=float)
        d = self.dim
        r = self.radius
        u = coords
        s = np.sum(u**2, axis=-1)[..., None]
        lam = 2 * r / (1 + s[..., 0])
        dlam = -4 * r * u / (1 + s) ** 2
        ddlam = -4 * r * (
            np.eye(d) / ((1 + s) ** 2)[..., None] - 4 * u[..., :, None] * u[..., None, :] / ((1 + s) ** 3)[..., None]
        )
        eye = np.eye(d)
        g = (lam**2)[..., None, None] * eye
        dl2 = 2 * lam[..., None] * dlam
        ddl2 = 2 * (dlam[..., :, None] * dlam[..., None, :] + lam[..., None, None] * ddlam)
        dg = dl2[..., :, None, None] * eye
        ddg = ddl2[..., :, :, None, None] * eye
        return g, dg, ddg

    def frames(self, chart_ids, coords):
        lam = self._lam(coords)
        return np.eye(self.dim) / lam[..., None, None]

    def frame_at(self, p):
        return Frame(p, np.eye(self.dim) / float(self._lam(p.coords)))

    def ambient_frames(self, pts: PointBatch) -> np.ndarray:
        J = self.jacobian(pts.chart_ids, pts.coords)
        return J @ pts.frames

    # geodesics ------------------------------------------------------------------

    def _ambient_tangent(self, p, v):
        J = self.jacobian(p.chart_id, p.coords)
        return J @ np.asarray(v, dtype=float)

    def _chart_vector(self, p, w):
        J = self.jacobian(p.chart_id, p.coords)
        lam2 = float(self._lam(p.coords)) ** 2
        return J.T @ w / lam2

    def _exp_ambient(self, X, W):
        r = self.radius
        rho = np.linalg.norm(W)
        if rho == 0:
            return X.copy()
        return math.cos(rho / r) * X + r * math.sin(rho / r) * W / rho

    def exp_map(self, p, v, chart=None):
        self.check_point(p)
        W = self._ambient_tangent(p, v)
        if np.linalg.norm(W) >= self.injectivity_radius:
            raise InjectivityRadiusError(f"|v| = {np.linalg.norm(W):.6g} >= injectivity radius")
        Y = self._exp_ambient(self.to_ambient(p.chart_id, p.coords), W)
        if chart is None and p.chart_id in (0, 1):
            q = self._point_from_ambient(Y, p.chart_id)
            if self.contains(q):
                return q
        return self._point_from_ambient(Y, chart)

    def _log_ambient(self, X, Y):
        r = self.radius
        c = float(np.clip(X @ Y / r**2, -1.0, 1.0))
        theta = math.acos(c)
        w = Y - c * X
        nw = np.linalg.norm(w)
        if nw == 0 or theta == 0:
            return np.zeros_like(X), 0.0
        return r * theta * w / nw, r * theta

    def log_map(self, center, q):
        self.check_point(center)
        self.check_point(q)
        X = self.to_ambient(center.chart_id, center.coords)
        Y = self.to_ambient(q.chart_id, q.coords)
        c = float(np.clip(X @ Y / self.radius**2, -1.0, 1.0))
        dist = self.radius * math.acos(c)
        if dist >= self.injectivity_radius * (1 - 1e-12):
            raise InjectivityRadiusError(f"distance {dist:.6g} >= injectivity radius {self.injectivity_radius:.6g}")
        W, length = self._log_ambient(X, Y)
        return GeodesicSegment(center, q, self._chart_vector(center, W), length)

    def _transport_ambient(self, X, Y, V):
        """Transport V in T_X to T_Y along the short great circle."""
        r = self.radius
        Xh, Yh = X / r, Y / r
        c = Xh @ Yh
        return V - (V @ Yh) * (Xh + Yh) / (1 + c)

    def parallel_transport(self, seg):
        X = self.to_ambient(seg.start.chart_id, seg.start.coords)
        Y = self.to_ambient(seg.end.chart_id, seg.end.coords)
        Fs = self.jacobian(seg.start.chart_id, seg.start.coords) @ self.frame_at(seg.start).vectors
        Fe = self.jacobian(seg.end.chart_id, seg.end.coords) @ self.frame_at(seg.end).vectors
        moved = np.stack([self._transport_ambient(X, Y, Fs[:, k]) for k in range(self.dim)], axis=1)
        return Fe.T @ moved

    def _dexp_ambient(self, X, W, V):
        r = self.radius
        rho = np.linalg.norm(W)
        if rho == 0:
            return V.copy()
        n = W / rho
        drho = n @ V
        dn = (V - drho * n) / rho
        return -math.sin(rho / r) * drho / r * X + math.cos(rho / r) * drho * n + r * math.sin(rho / r) * dn

    def dexp(self, p, v):
        q = self.exp_map(p, v)
        X = self.to_ambient(p.chart_id, p.coords)
        J = self.jacobian(p.chart_id, p.coords)
        W = J @ np.asarray(v, dtype=float)
        cols = [self._chart_vector(q, self._dexp_ambient(X, W, J[:, k])) for k in range(self.dim)]
        return q, np.stack(cols, axis=1)

    # batched ---------------------------------------------------------------------

    def pair_geometry(self, xs, ys):
        r = self.radius
        X = self.to_ambient(xs.chart_ids, xs.coords) / r
        Y = self.to_ambient(ys.chart_ids, ys.coords) / r
        Ex = self.ambient_frames(xs)
        Ey = self.ambient_frames(ys)
        c = np.clip(np.einsum("bi,bi->b", X, Y), -1.0, 1.0)
        theta = np.arccos(c)
        w = Y - c[:, None] * X
        nw = np.linalg.norm(w, axis=-1)
        scale = np.where(nw > 0, theta / np.where(nw > 0, nw, 1.0), 0.0)
        logv = r * scale[:, None] * w
        ybar = np.einsum("bia,bi->ba", Ex, logv)
        # transport T_y -> T_x:  V - (V.X)(X+Y)/(1+c)
        denom = np.where(1 + c > 1e-300, 1 + c, 1e-300)
        VX = np.einsum("bik,bi->bk", Ey, X)
        moved = Ey - (X + Y)[:, :, None] * VX[:, None, :] / denom[:, None, None]
        P = np.einsum("bia,bik->bak", Ex, moved)
        dist = r * theta
        return PairGeometry(dist, ybar, P, dist < self.injectivity_radius * (1 - 1e-12))

    def neighbor_pairs(self, pts, radius):
        from scipy.spatial import cKDTree

        r = self.radius
        X = self.to_ambient(pts.chart_ids, pts.coords)
        ang = min(radius / r, math.pi)
        chord = 2 * r * math.sin(ang / 2) * (1 + 1e-12)
        tree = cKDTree(X)
        pairs = tree.query_pairs(chord, output_type="ndarray")
        n = len(pts)
        I = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
        J = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
        return I, J

    def curvature_frame(self, pts):
        K = self.gauss_curvature
        d = np.eye(self.dim)
        R = K * (np.einsum("bc,ad->abcd", d, d) - np.einsum("ac,bd->abcd", d, d))
        return np.broadcast_to(R, (len(pts),) + R.shape).copy()


@dataclass
class ChartMetric(ManifoldModel):
    """User-supplied metric g(x) on one chart.

    ``metric_fn`` maps coordinates of shape (..., d) to (..., d, d).  With
    ``periods`` the chart is a torus fundamental domain; otherwise points
    must lie inside the box ``domain = (lower, upper)``.
    ``injectivity_radius`` is a declared lower bound.  An optional
    ``metric_derivative_fn`` returning dg[..., l, m, n] = d_l g_mn replaces
    finite differences in the geodesic equations.
    """

    metric_fn: object
    dim: int = 2
    periods: tuple | None = None
    domain: tuple | None = None
    injectivity_radius: float = 0.5
    chart_scale: float = 1.0
    name: str = "chart-metric"
    rk4_steps: int = 64
    newton_maxiter: int = 50
    newton_tol: float = 1e-10
    volume_hint: float | None = field(default=None, repr=False)
    metric_derivative_fn: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim % 2:
            raise GeometryError("dimension must be even")
        if self.injectivity_radius <= 0:
            raise GeometryError("injectivity radius must be positive")
        if self.periods is not None:
            self.periods = np.asarray(self.periods, dtype=float)

    @property
    def volume(self):
        if self.volume_hint is not None:
            return self.volume_hint
        raise GeometryError("volume needs a quadrature grid for ChartMetric")

    def contains(self, p):
        if p.chart_id != 0:
            return False
        if self.periods is not None or self.domain is None:
            return True
        lo, hi = (np.asarray(b, dtype=float) for b in self.domain)
        return bool(np.all(p.coords >= lo) and np.all(p.coords <= hi))

    def metric(self, chart_id, coords):
        coords = np.asarray(coords, dtype=float)
        if self.periods is not None:
            coords = np.mod(coords, self.periods)
        g = np.asarray(self.metric_fn(coords), dtype=float)
        return np.broadcast_to(g, coords.shape[:-1] + (self.dim, self.dim)).copy()

    def _wrap(self, delta):
        if self.periods is None:
            return delta
        return delta - self.periods * np.round(delta / self.periods)

    def _coord_diff(self, a, b, chart_id):
        return self._wrap(np.asarray(a) - np.asarray(b))

    def _gamma(self, x):
        # geodesic right-hand sides need only first derivatives of g
        x = np.asarray(x, dtype=float)
        g = self.metric(0, x)
        if self.metric_derivative_fn is not None:
            xm = np.mod(x, self.periods) if self.periods is not None else x
            dg = np.asarray(self.metric_derivative_fn(xm), dtype=float)
        else:
            h = 1e-4 * self.chart_scale
            dg = np.zeros(x.shape[:-1] + (self.dim,) * 3)
            for l in range(self.dim):
                shift = np.zeros(self.dim)
                shift[l] = h
                dg[..., l, :, :] = sum(w * self.metric(0, x + k * shift) for k, w in _D1) / h
        return christoffel_from_jet(g, 0.5 * (dg + np.swapaxes(dg, -1, -2)))

    def _rk4_geodesic(self, x0, v0, extra=None):
        """Integrate the geodesic (and optionally transported vectors) over s in [0, 1]."""
        n = self.rk4_steps
        h = 1.0 / n

        def rhs(state):
            x, v = state[0], state[1]
            G = self._gamma(x)
            # A[g, n] = Gamma^g_{mn} v^m
            A = np.matmul(v[..., None, None, :], G)[..., 0, :]
            out = [v, -np.matmul(A, v[..., None])[..., 0]]
            for W in state[2:]:
                out.append(-np.matmul(A, W))
            return out

        state = [np.array(x0, dtype=float), np.array(v0, dtype=float)]
        if extra is not None:
            state.append(np.array(extra, dtype=float))
        for _ in range(n):
            k1 = rhs(state)
            k2 = rhs([s + 0.5 * h * k for s, k in zip(state, k1)])
            k3 = rhs([s + 0.5 * h * k for s, k in zip(state, k2)])
            k4 = rhs([s + h * k for s, k in zip(state, k3)])
            state = [s + h / 6 * (a + 2 * b + 2 * c + d) for s, a, b, c, d in zip(state, k1, k2, k3, k4)]
        return state

    def _exp_raw(self, x, v):
        return self._rk4_geodesic(x, v)[0]

    def exp_map(self, p, v, chart=None):
        self.check_point(p)
        v = np.asarray(v, dtype=float)
        if self.norm(p, v) >= self.injectivity_radius:
            raise InjectivityRadiusError("|v| >= declared injectivity radius")
        x = self._exp_raw(p.coords, v)
        if self.periods is not None:
            x = np.mod(x, self.periods)
        return ChartPoint(0, x)

    def _log_raw(self, x, q):
        """Batched solve of exp_x(v) = q (q already unwrapped near x).

        Starts from the second-order guess v = dx + Gamma(x)(dx, dx) / 2 and
        runs chord-Newton steps, refreshing the finite-difference Jacobian
        every few iterations.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        dx = q - x
        A = np.matmul(dx[..., None, None, :], self._gamma(x))[..., 0, :]
        v = dx + 0.5 * np.matmul(A, dx[..., None])[..., 0]
        h = 1e-6 * self.chart_scale
        d = self.dim
        tol = self.newton_tol * self.chart_scale
        done = np.zeros(len(x), dtype=bool)
        active = np.arange(len(x))
        J = None
        for it in range(self.newton_maxiter + 1):
            xa, va = x[active], v[active]
            ya = self._exp_raw(xa, va)
            F = ya - q[active]
            ok = np.max(np.abs(F), axis=-1) < tol
            done[active[ok]] = True
            keep = ~ok
            if it == self.newton_maxiter or not keep.any():
                break
            active, xa, va, ya, F = active[keep], xa[keep], va[keep], ya[keep], F[keep]
            if J is None or it % 4 == 0:
                J = np.zeros(xa.shape + (d,))
                for k in range(d):
                    e = np.zeros(d)
                    e[k] = h
                    J[..., k] = (self._exp_raw(xa, va + e) - ya) / h
            else:
                J = J[keep]
            v[active] = va - np.linalg.solve(J, F[..., None])[..., 0]
        return v, done

    def log_map(self, center, q):
        self.check_point(center)
        self.check_point(q)
        target = center.coords + self._wrap(q.coords - center.coords)
        v, ok = self._log_raw(center.coords, target)
        v = v[0]
        if not ok[0]:
            raise GeometryError("Newton iteration for log_map did not converge")
        length = self.norm(center, v)
        if length >= self.injectivity_radius:
            raise InjectivityRadiusError(f"distance {length:.6g} >= declared injectivity radius")
        return GeodesicSegment(center, q, v, length)

    def parallel_transport(self, seg):
        F0 = self.frame_at(seg.start).vectors
        state = self._rk4_geodesic(seg.start.coords, seg.log_vector, extra=F0)
        F1 = self.frame_at(seg.end).vectors
        return np.linalg.solve(F1, state[2])

    def pair_geometry(self, xs, ys):
        target = xs.coords + self._wrap(ys.coords - xs.coords)
        v, ok = self._log_raw(xs.coords, target)
        g = self.metric(0, xs.coords)
        dist = np.sqrt(np.einsum("bi,bij,bj->b", v, g, v))
        Fx_inv = np.linalg.inv(xs.frames)
        ybar = np.einsum("bam,bm->ba", Fx_inv, v)
        # transport the x-frame to y, then invert to get y -> x
        state = self._rk4_geodesic(xs.coords, v, extra=xs.frames)
        fwd = np.linalg.solve(ys.frames, state[2])  # frame_x comps -> frame_y comps
        P = np.linalg.inv(fwd)
        return PairGeometry(dist, ybar, P, ok & (dist < self.injectivity_radius))

    def neighbor_pairs(self, pts, radius):
        from scipy.spatial import cKDTree

        g = self.metric(0, pts.coords)
        lam_min = float(np.min(np.linalg.eigvalsh(g)))
        chart_r = min(radius, self.injectivity_radius) / math.sqrt(lam_min) * 1.05
        if self.periods is not None:
            coords = np.mod(pts.coords, self.periods)
            tree = cKDTree(coords, boxsize=self.periods)
        else:
            tree = cKDTree(pts.coords)
        pairs = tree.query_pairs(chart_r, output_type="ndarray")
        n = len(pts)
        I = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
        J = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
        return I, J


# ---------------------------------------------------------------------------
# operations


def curvature_at(model: ManifoldModel, p: ChartPoint) -> CurvatureData:
    model.check_point(p)
    g, dg, ddg = model.metric_jet(p.chart_id, p.coords)
    if np.any(np.linalg.eigvalsh(g) <= 0):
        raise GeometryError("metric is not positive definite at p")
    gamma, _, R, ric = curvature_from_jet(g, dg, ddg)
    return CurvatureData(gamma=gamma, riemann=R, ricci=ric, evaluated_at=p, metric=g)


def exp_map(model: ManifoldModel, p: ChartPoint, v) -> ChartPoint:
    return model.exp_map(p, v)


def log_map(model: ManifoldModel, center: ChartPoint, q: ChartPoint) -> GeodesicSegment:
    return model.log_map(center, q)


def parallel_transport(model: ManifoldModel, seg: GeodesicSegment) -> np.ndarray:
    return model.parallel_transport(seg)


def _frame_R(model, p):
    cd = curvature_at(model, p)
    F = model.frame_at(p).vectors
    return frame_riemann(cd.riemann, cd.metric, F)


def pt_expansion_check(model: ManifoldModel, center: ChartPoint, q: ChartPoint, v) -> float:
    """|P v - (vec v + R(vec x, vec v) vec x / 6)| for v given in the frame at q."""
    v = np.asarray(v, dtype=float)
    seg = model.log_map(center, q)
    Fc = model.frame_at(center).vectors
    xvec = np.linalg.solve(Fc, seg.log_vector)
    q2, D = model.dexp(center, seg.log_vector)
    if q2.chart_id != q.chart_id:
        v = _reframe(model, q, q2, v)
    # normal-coordinate components of v: invert the differential of exp in frames
    M = np.linalg.solve(model.frame_at(q2).vectors, D @ Fc)
    vvec = np.linalg.solve(M, v)
    Pv = model.parallel_transport(model.log_map(q2, center)) @ v
    R = _frame_R(model, center)
    approx = vvec + curvature_operator(R, xvec, vvec, xvec) / 6.0
    return float(np.linalg.norm(Pv - approx))


def _reframe(model, p_from: ChartPoint, p_to: ChartPoint, v):
    """Components of the same tangent vector in the canonical frame of another chart."""
    if not isinstance(model, RoundSphere):
        return v
    F1 = model.jacobian(p_from.chart_id, p_from.coords) @ model.frame_at(p_from).vectors
    F2 = model.jacobian(p_to.chart_id, p_to.coords) @ model.frame_at(p_to).vectors
    return F2.T @ (F1 @ v)


def geodesic_variation(model: ManifoldModel, seg: GeodesicSegment, psi0, psi1, s: float) -> np.ndarray:
    """Transported Jacobi-field value at parameter s from its endpoint values.

    ``psi0`` and ``psi1`` are frame components at ``seg.start`` and ``seg.end``;
    the result is in the frame at ``seg.start``.
    """
    psi0 = np.asarray(psi0, dtype=float)
    psi1 = np.asarray(psi1, dtype=float)
    back = model.parallel_transport(model.log_map(seg.end, seg.start))
    Ppsi1 = back @ psi1
    F0 = model.frame_at(seg.start).vectors
    sdot = np.linalg.solve(F0, seg.log_vector)
    R = _frame_R(model, seg.start)
    out = s * Ppsi1 + (1 - s) * psi0
    out = out + (s**3 - s) / 6.0 * curvature_operator(R, sdot, Ppsi1, sdot)
    out = out - (s**3 - 3 * s**2 + 2 * s) / 6.0 * curvature_operator(R, sdot, psi0, sdot)
    return out


def rnc_metric(model: ManifoldModel, center: ChartPoint, x) -> np.ndarray:
    """Metric in Riemann normal coordinates (orthonormal frame at center) at point x."""
    x = np.asarray(x, dtype=float)
    Fc = model.frame_at(center).vectors
    q, D = model.dexp(center, Fc @ x)
    A = D @ Fc
    return A.T @ model.metric(q.chart_id, q.coords) @ A
