"""Quadrature grids, kernel fields and time stepping.

A kernel field stores K(x_i, x_j) for all grid pairs as 2^d x 2^d fiber blocks,
each expressed in the grid frames at its two endpoints, so composition through
a middle point is plain matrix multiplication.  Two storage back ends share one
interface:

``SparseKernelField``
    block-sparse (scipy BSR) matrix; works on any grid.
``CirculantKernelField``
    for grids made of rings that a symmetry of the model permutes cyclically
    (latitude rings on the sphere, rows of the torus) with frames that move
    along with the symmetry.  The kernel is then block circulant along each
    ring and is stored by its discrete Fourier modes, which makes composition
    a batch of small dense products.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import (
    ChartMetric,
    ChartPoint,
    FlatTorus,
    Frame,
    ManifoldModel,
    PointBatch,
    RoundSphere,
)
from .grassmann import GeneratorSet, GrassmannElement, popcount
from .kernel import KernelOptions, mq_blocks

__all__ = [
    "QuadratureGrid",
    "RingStructure",
    "FormField",
    "Partition",
    "KernelField",
    "SparseKernelField",
    "CirculantKernelField",
    "UnderResolvedWarning",
    "GridMismatchError",
    "build_grid",
    "assemble_kernel_field",
    "compose",
    "apply",
    "evolve",
    "kernel_power",
    "compose_partition",
    "load_kernel_field",
]


class UnderResolvedWarning(UserWarning):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class RingStructure:
    """Point index = ring * per_ring + position; a shift of position is an isometry."""

    rings: int
    per_ring: int


@dataclass(eq=False)
class QuadratureGrid:
    model: ManifoldModel
    batch: PointBatch
    weights: np.ndarray
    spacing: float
    rings: RingStructure | None = None
    label: str = ""
    _hash: str | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.weights)

    @property
    def points(self) -> list[ChartPoint]:
        return [self.batch.point(i) for i in range(len(self))]

    @property
    def frames(self) -> list[Frame]:
        return [Frame(self.batch.point(i), self.batch.frames[i]) for i in range(len(self))]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def fingerprint(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            h.update(repr(self.model).encode())
            for arr in (self.batch.chart_ids, self.batch.coords, self.batch.frames, self.weights):
                h.update(np.ascontiguousarray(arr).tobytes())
            self._hash = h.hexdigest()[:16]
        return self._hash

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))

    def check_resolution(self, t: float, cutoff: float = 7.0) -> bool:
        """True when the spacing resolves the Gaussian of width sqrt(t); warns otherwise."""
        ok = self.spacing < math.sqrt(t) * cutoff / 4
        if not ok:
            warnings.warn(
                f"grid spacing {self.spacing:.4g} is too coarse for t={t:.4g} "
                f"(needs < {math.sqrt(t) * cutoff / 4:.4g})",
                UnderResolvedWarning,
                stacklevel=3,
            )
        return ok


def _torus_grid(model: FlatTorus, N: int) -> QuadratureGrid:
    d = model.dim
    axes = [np.arange(N) * L / N for L in model.sides]
    mesh = np.meshgrid(*axes[::-1], indexing="ij")
    coords = np.stack(mesh[::-1], axis=-1).reshape(-1, d)
    n = len(coords)
    frames = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    w = np.full(n, model.volume / n)
    rings = RingStructure(n // N, N)
    return QuadratureGrid(model, PointBatch(np.zeros(n, dtype=int), coords, frames), w, float(max(model.sides) / N), rings, f"torus-{N}")


def _sphere_polar_frames(model: RoundSphere, X):
    """Chart-coordinate columns of the unit vectors (e_theta, e_phi) at ambient points X."""
    r = model.radius
    x, y, z = X[:, 0] / r, X[:, 1] / r, X[:, 2] / r
    rho = np.hypot(x, y)
    e_th = np.stack([x * z / rho, y * z / rho, -rho], axis=-1)
    e_ph = np.stack([-y / rho, x / rho, np.zeros_like(x)], axis=-1)
    cids, u = model.from_ambient(X)
    J = model.jacobian(cids, u)
    lam2 = model._lam(u) ** 2
    Eth = np.einsum("bia,bi->ba", J, e_th) / lam2[:, None]
    Eph = np.einsum("bia,bi->ba", J, e_ph) / lam2[:, None]
    return cids, u, np.stack([Eth, Eph], axis=-1)


def _sphere_gauss_grid(model: RoundSphere, N: int) -> QuadratureGrid:
    if model.dim != 2:
        raise ValueError("sphere grids are implemented for dimension 2")
    r = model.radius
    z, wz = np.polynomial.legendre.leggauss(N)
    z, wz = z[::-1], wz[::-1]  # north to south
    M = 2 * N
    phi = 2 * np.pi * (np.arange(M) + 0.5) / M
    sth = np.sqrt(1 - z**2)
    X = r * np.stack(
        [np.outer(sth, np.cos(phi)), np.outer(sth, np.sin(phi)), np.outer(z, np.ones(M))], axis=-1
    ).reshape(-1, 3)
    cids, u, frames = _sphere_polar_frames(model, X)
    w = np.repeat(wz * (2 * np.pi / M) * r**2, M)
    return QuadratureGrid(model, PointBatch(cids, u, frames), w, float(math.pi * r / N), RingStructure(N, M), f"sphere-gauss-{N}")


def _icosphere(level: int):
    t = (1 + 5**0.5) / 2
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in V]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        F = [
            tri
            for a, b, c in F
            for tri in ((a, mid(a, b), mid(c, a)), (b, mid(b, c), mid(a, b)), (c, mid(c, a), mid(b, c)),
                        (mid(a, b), mid(b, c), mid(c, a)))
        ]
    return np.array(verts)


def _sphere_icosahedral_grid(model: RoundSphere, level: int) -> QuadratureGrid:
    from scipy.spatial import SphericalVoronoi

    r = model.radius
    V = _icosphere(level)
    areas = SphericalVoronoi(V, radius=1.0).calculate_areas() * r**2
    X = V * r
    cids, u = model.from_ambient(X)
    frames = model.frames(cids, u)
    spacing = float(r * math.sqrt(4 * math.pi / len(V)))
    return QuadratureGrid(model, PointBatch(cids, u, frames), areas, spacing, None, f"sphere-ico-{level}")


def _chart_grid(model: ChartMetric, N: int) -> QuadratureGrid:
    if model.periods is not None:
        lo = np.zeros(model.dim)
        hi = np.asarray(model.periods, dtype=float)
        endpoint = False
    elif model.domain is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in model.domain)
        endpoint = True
    else:
        raise ValueError("ChartMetric grid needs periods or a domain")
    axes = [np.linspace(a, b, N, endpoint=endpoint) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes[::-1], indexing="ij")
    coords = np.stack(mesh[::-1], axis=-1).reshape(-1, model.dim)
    cids = np.zeros(len(coords), dtype=int)
    g = model.metric(0, coords)
    cell = np.prod((hi - lo) / (N if not endpoint else N - 1))
    w = np.sqrt(np.linalg.det(g)) * cell
    if endpoint:
        # trapezoid weights along each axis
        for ax in range(model.dim):
            edge = np.isclose(coords[:, ax], lo[ax]) | np.isclose(coords[:, ax], hi[ax])
            w = np.where(edge, w / 2, w)
    frames = model.frames(cids, coords)
    lam = float(np.sqrt(np.max(np.linalg.eigvalsh(g))))
    spacing = float(np.max((hi - lo) / N) * lam)
    return QuadratureGrid(model, PointBatch(cids, coords, frames), w, spacing, None, f"chart-{N}")


def build_grid(model: ManifoldModel, resolution: int, kind: str = "auto") -> QuadratureGrid:
    """Quadrature grid with Riemannian volume weights.

    torus: uniform N^d lattice.  sphere: ``kind="gauss"`` (default) uses N
    Gauss-Legendre latitudes with 2N equispaced longitudes and (e_theta,
    e_phi) frames; ``kind="icosahedral"`` uses a subdivided icosahedron of
    level ``resolution`` with spherical Voronoi weights and chart frames.
    chart metric: uniform lattice on the chart with sqrt(det g) weights.
    """
    if isinstance(model, RoundSphere):
        if kind == "icosahedral":
            if resolution < 1:
                raise ValueError("icosahedral level must be at least 1")
            return _sphere_icosahedral_grid(model, resolution)
        if resolution < 8:
            raise ValueError("resolution must be at least 8")
        if kind not in ("auto", "gauss"):
            raise ValueError(f"unknown sphere grid kind {kind!r}")
        return _sphere_gauss_grid(model, resolution)
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if isinstance(model, FlatTorus):
        return _torus_grid(model, resolution)
    if isinstance(model, ChartMetric):
        return _chart_grid(model, resolution)
    raise TypeError(f"no grid builder for {type(model).__name__}")


# ---------------------------------------------------------------------------


class FormField:
    """Coefficients of a differential form on a grid.

    ``values[i, I]`` is the coefficient of the frame monomial with bitmask I at
    grid point i.
    """

    def __init__(self, grid: QuadratureGrid, values):
        values = np.asarray(values, dtype=float)
        D = 1 << grid.model.dim
        if values.shape != (len(grid), D):
            raise ValueError(f"expected values of shape {(len(grid), D)}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("form values must be finite")
        self.grid = grid
        self.values = values

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((len(grid), 1 << grid.model.dim)))

    @classmethod
    def from_function(cls, grid, fn, degree: int | None = None):
        """Build from ``fn(batch) -> (n, 2^d)`` frame coefficients, or scalars when degree=0."""
        vals = np.asarray(fn(grid.batch), dtype=float)
        D = 1 << grid.model.dim
        if vals.ndim == 1:
            full = np.zeros((len(grid), D))
            full[:, 0 if degree in (None, 0) else D - 1] = vals
            vals = full
        return cls(grid, vals)

    def _check(self, other):
        if other.grid is not self.grid and other.grid.fingerprint != self.grid.fingerprint:
            raise GridMismatchError("form fields live on different grids")

    def __add__(self, other):
        self._check(other)
        return FormField(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return FormField(self.grid, self.values - other.values)

    def __mul__(self, c):
        return FormField(self.grid, self.values * float(c))

    __rmul__ = __mul__

    def degree_part(self, k: int) -> "FormField":
        D = self.values.shape[1]
        keep = popcount(np.arange(D)) == k
        return FormField(self.grid, np.where(keep, self.values, 0.0))

    def degrees_present(self, tol: float = 0.0) -> set[int]:
        D = self.values.shape[1]
        degs = popcount(np.arange(D))
        return {int(k) for k in np.unique(degs) if np.max(np.abs(self.values[:, degs == k])) > tol}

    def value(self, i: int) -> GrassmannElement:
        d = self.grid.model.dim
        return GrassmannElement(GeneratorSet([("psi", d)]), self.values[i].astype(complex))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def pointwise_norm(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)


@dataclass(frozen=True)
class Partition:
    times: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if not ts:
            raise ValueError("partition must contain at least one step")
        if any(not t > 0 for t in ts):
            raise ValueError("partition times must be positive")
        object.__setattr__(self, "times", ts)

    @classmethod
    def uniform(cls, t: float, n: int) -> "Partition":
        if n < 1:
            raise ValueError("n must be at least 1")
        return cls((t / n,) * n)

    @property
    def total(self) -> float:
        return float(sum(self.times))

    @property
    def mesh(self) -> float:
        return max(self.times)

    def __len__(self):
        return len(self.times)

    def __add__(self, other: "Partition") -> "Partition":
        return Partition(self.times + other.times)


# ---------------------------------------------------------------------------


class KernelField:
    """Common interface; see the two concrete storage classes."""

    grid: QuadratureGrid
    t: float

    @property
    def fiber_dim(self) -> int:
        return 1 << self.grid.model.dim

    def _check_grid(self, grid):
        if grid is not self.grid and grid.fingerprint != self.grid.fingerprint:
            raise GridMismatchError("kernel and operand live on different grids")

    def apply(self, form: FormField) -> FormField:
        raise NotImplementedError

    def compose(self, other: "KernelField") -> "KernelField":
        raise NotImplementedError

    def diagonal_blocks(self) -> np.ndarray:
        raise NotImplementedError

    def block(self, i: int, j: int) -> np.ndarray:
        raise NotImplementedError

    def row_blocks(self, i: int) -> np.ndarray:
        """All blocks K(x_i, x_j), shape (n, D, D)."""
        return np.stack([self.block(i, j) for j in range(len(self.grid))])

    def to_dense(self) -> np.ndarray:
        raise NotImplementedError

    def save(self, path) -> None:
        raise NotImplementedError


class SparseKernelField(KernelField):
    def __init__(self, grid: QuadratureGrid, matrix, t: float):
        D = 1 << grid.model.dim
        self.grid = grid
        self.matrix = sp.bsr_array(matrix, blocksize=(D, D))
        self.t = float(t)
        self._wdiag = sp.diags_array(np.repeat(grid.weights, D))

    @property
    def nnz_blocks(self) -> int:
        return int(self.matrix.indptr[-1])

    def apply(self, form):
        self._check_grid(form.grid)
        D = self.fiber_dim
        vec = (form.values * self.grid.weights[:, None]).reshape(-1)
        out = self.matrix @ vec
        return FormField(self.grid, out.reshape(-1, D))

    def compose(self, other):
        if not isinstance(other, SparseKernelField):
            raise TypeError("can only compose kernel fields with the same storage")
        self._check_grid(other.grid)
        D = self.fiber_dim
        prod = (self.matrix @ self._wdiag @ other.matrix).tobsr(blocksize=(D, D))
        prod.sort_indices()
        return SparseKernelField(self.grid, prod, self.t + other.t)

    def block(self, i, j):
        D = self.fiber_dim
        m = self.matrix
        lo, hi = m.indptr[i], m.indptr[i + 1]
        hit = np.nonzero(m.indices[lo:hi] == j)[0]
        if len(hit) == 0:
            return np.zeros((D, D))
        return m.data[lo + hit[0]].copy()

    def row_blocks(self, i):
        D = self.fiber_dim
        out = np.zeros((len(self.grid), D, D))
        m = self.matrix
        lo, hi = m.indptr[i], m.indptr[i + 1]
        out[m.indices[lo:hi]] = m.data[lo:hi]
        return out

    def diagonal_blocks(self):
        return np.stack([self.block(i, i) for i in range(len(self.grid))])

    def to_dense(self):
        return self.matrix.toarray()

    def save(self, path):
        m = self.matrix
        np.savez_compressed(
            path,
            storage="sparse",
            grid=self.grid.fingerprint,
            t=self.t,
            data=m.data,
            indices=m.indices,
            indptr=m.indptr,
            shape=np.array(m.shape),
        )


class CirculantKernelField(KernelField):
    """Kernel stored by Fourier modes along rings.

    ``modes[w]`` is the (R*D, R*D) matrix sum_s C(s) exp(2 pi i w s / M) where
    C(s)[a, b] = K(x_{a,0}, x_{b,s}).
    """

    def __init__(self, grid: QuadratureGrid, modes, t: float):
        if grid.rings is None:
            raise ValueError("grid has no ring structure")
        self.grid = grid
        self.modes = np.asarray(modes)
        self.t = float(t)
        R, M = grid.rings.rings, grid.rings.per_ring
        D = 1 << grid.model.dim
        self._w = np.repeat(grid.weights.reshape(R, M)[:, 0], D)

    @classmethod
    def from_blocks(cls, grid, C, t):
        """C has shape (R, R, M, D, D): C[a, b, s] = K(x_{a,0}, x_{b,s})."""
        R, _, M, D, _ = C.shape
        Ct = np.fft.ifft(C, axis=2) * M
        modes = np.transpose(Ct, (2, 0, 3, 1, 4)).reshape(M, R * D, R * D)
        return cls(grid, modes, t)

    def _blocks(self):
        R, M = self.grid.rings.rings, self.grid.rings.per_ring
        D = self.fiber_dim
        C = np.fft.fft(self.modes, axis=0) / M
        return np.transpose(C.reshape(M, R, D, R, D), (1, 3, 0, 2, 4)).real

    def apply(self, form):
        self._check_grid(form.grid)
        R, M = self.grid.rings.rings, self.grid.rings.per_ring
        D = self.fiber_dim
        a = form.values.reshape(R, M, D)
        ah = np.fft.fft(a, axis=1)  # (R, M, D)
        ah = np.transpose(ah, (1, 0, 2)).reshape(M, R * D) * self._w
        oh = np.einsum("wij,wj->wi", self.modes, ah)
        oh = np.transpose(oh.reshape(M, R, D), (1, 0, 2))
        out = np.fft.ifft(oh, axis=1).real
        return FormField(self.grid, out.reshape(R * M, D))

    def compose(self, other):
        if not isinstance(other, CirculantKernelField):
            raise TypeError("can only compose kernel fields with the same storage")
        self._check_grid(other.grid)
        prod = np.matmul(self.modes * self._w[None, None, :], other.modes)
        return CirculantKernelField(self.grid, prod, self.t + other.t)

    def diagonal_blocks(self):
        R, M = self.grid.rings.rings, self.grid.rings.per_ring
        D = self.fiber_dim
        mean = self.modes.mean(axis=0).reshape(R, D, R, D)
        diag = np.stack([mean[a, :, a, :] for a in range(R)]).real
        return np.repeat(diag, M, axis=0)

    def block(self, i, j):
        M = self.grid.rings.per_ring
        D = self.fiber_dim
        a, p = divmod(i, M)
        b, q = divmod(j, M)
        s = (q - p) % M
        phase = np.exp(-2j * np.pi * np.arange(M) * s / M)
        full = np.tensordot(phase, self.modes, axes=(0, 0)) / M
        return full[a * D:(a + 1) * D, b * D:(b + 1) * D].real

    def row_blocks(self, i):
        R, M = self.grid.rings.rings, self.grid.rings.per_ring
        D = self.fiber_dim
        a, p = divmod(i, M)
        rows = self.modes[:, a * D:(a + 1) * D, :]  # (M, D, R*D)
        C = np.fft.fft(rows, axis=0) / M  # C[s] = K(x_{a,0}, x_{., s})
        C = np.roll(C, p, axis=0)  # K(x_{a,p}, x_{b,q}) = C[q - p]
        C = C.reshape(M, D, R, D).transpose(2, 0, 1, 3).real
        return C.reshape(R * M, D, D)

    def to_dense(self):
        R, M = self.grid.rings.rings, self.grid.rings.per_ring
        D = self.fiber_dim
        C = self._blocks()  # (R, R, M, D, D)
        out = np.zeros((R, M, D, R, M, D))
        for p in range(M):
            for q in range(M):
                out[:, p, :, :, q, :] = np.transpose(C[:, :, (q - p) % M], (0, 2, 1, 3))
        return out.reshape(R * M * D, R * M * D)

    def save(self, path):
        np.savez_compressed(path, storage="circulant", grid=self.grid.fingerprint, t=self.t, modes=self.modes)


def load_kernel_field(path, grid: QuadratureGrid) -> KernelField:
    with np.load(path, allow_pickle=False) as f:
        if str(f["grid"]) != grid.fingerprint:
            raise GridMismatchError("saved kernel field belongs to a different grid")
        storage = str(f["storage"])
        t = float(f["t"])
        if storage == "circulant":
            return CirculantKernelField(grid, f["modes"], t)
        D = 1 << grid.model.dim
        shape = tuple(int(s) for s in f["shape"])
        m = sp.bsr_array((f["data"], f["indices"], f["indptr"]), shape=shape, blocksize=(D, D))
        return SparseKernelField(grid, m, t)


# ---------------------------------------------------------------------------


def _pair_blocks(model, xs: PointBatch, ys: PointBatch, Rx, t, opts):
    geom = model.pair_geometry(xs, ys)
    return mq_blocks(geom, Rx, t, opts, model.dim, model.injectivity_radius)


def _rows_parallel(fn, chunks, workers):
    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, chunks))
    return [fn(c) for c in chunks]


def assemble_kernel_field(
    model: ManifoldModel,
    grid: QuadratureGrid,
    t: float,
    opts: KernelOptions | None = None,
    storage: str = "auto",
    workers: int = 1,
) -> KernelField:
    """Single-step kernel MQ(t) on all grid pairs within the cutoff radius."""
    if not t > 0:
        raise ValueError("t must be positive")
    opts = opts or KernelOptions()
    grid.check_resolution(t, opts.gaussian_cutoff)
    if storage == "auto":
        storage = "circulant" if grid.rings is not None else "sparse"
    D = 1 << model.dim
    pts = grid.batch
    R_all = model.curvature_frame(pts)
    radius = opts.radius(t, model.injectivity_radius)

    if storage == "circulant":
        if grid.rings is None:
            raise ValueError("grid has no ring structure")
        Rn, M = grid.rings.rings, grid.rings.per_ring
        C = np.zeros((Rn, Rn, M, D, D))

        def ring_row(a):
            xi = np.full(len(pts), a * M)
            return _pair_blocks(model, pts.take(xi), pts, R_all[xi], t, opts)

        results = _rows_parallel(ring_row, list(range(Rn)), workers)
        for a, blocks in enumerate(results):
            C[a] = blocks.reshape(Rn, M, D, D)
        return CirculantKernelField.from_blocks(grid, C, t)

    if storage != "sparse":
        raise ValueError(f"unknown storage {storage!r}")
    I, J = model.neighbor_pairs(pts, radius)
    order = np.lexsort((J, I))
    I, J = I[order], J[order]
    n = len(pts)
    step = max(1, 200_000 // max(D * D, 1))
    chunks = [slice(s, min(s + step, len(I))) for s in range(0, len(I), step)]

    def chunk_blocks(sl):
        return _pair_blocks(model, pts.take(I[sl]), pts.take(J[sl]), R_all[I[sl]], t, opts)

    data = np.concatenate(_rows_parallel(chunk_blocks, chunks, workers)) if len(I) else np.zeros((0, D, D))
    keep = np.any(data != 0, axis=(1, 2))
    I, J, data = I[keep], J[keep], data[keep]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(I, minlength=n))])
    m = sp.bsr_array((data, J, indptr), shape=(n * D, n * D), blocksize=(D, D))
    return SparseKernelField(grid, m, t)


def compose(k1: KernelField, k2: KernelField) -> KernelField:
    """(k1 * k2)(x, z) = sum_y w_y k1(x, y) k2(y, z)."""
    return k1.compose(k2)


def apply(k: KernelField, alpha: FormField) -> FormField:
    return k.apply(alpha)


def kernel_power(k: KernelField, n: int) -> KernelField:
    """n-fold composition k * k * ... * k by repeated squaring."""
    if n < 1:
        raise ValueError("n must be at least 1")
    result = None
    base = k
    while n:
        if n & 1:
            result = base if result is None else result.compose(base)
        n >>= 1
        if n:
            base = base.compose(base)
    return result


def compose_partition(
    model, grid, partition: Partition, opts: KernelOptions | None = None, storage: str = "auto", workers: int = 1
) -> KernelField:
    """Kernel of the product MQ(t_1) * ... * MQ(t_n)."""
    cache: dict[float, KernelField] = {}

    def get(t):
        if t not in cache:
            cache[t] = assemble_kernel_field(model, grid, t, opts, storage, workers)
        return cache[t]

    times = partition.times
    if len(set(times)) == 1:
        return kernel_power(get(times[0]), len(times))
    out = get(times[0])
    for t in times[1:]:
        out = out.compose(get(t))
    return out


def evolve(
    model,
    grid,
    partition: Partition,
    alpha: FormField,
    opts: KernelOptions | None = None,
    storage: str = "auto",
    workers: int = 1,
) -> FormField:
    """Apply MQ(t_n), ..., MQ(t_1) in turn; t_n acts first as the rightmost factor."""
    cache: dict[float, KernelField] = {}
    out = alpha
    for t in reversed(partition.times):
        if t not in cache:
            cache[t] = assemble_kernel_field(model, grid, t, opts, storage, workers)
        out = cache[t].apply(out)
    return out
