"""Independent reference computations.

Everything here is computed without the path-integral kernel: the
Laplace-Beltrami operator on forms by finite differences of smooth test forms,
heat kernels from lattice image sums (torus) and spectral sums (sphere),
normal-coordinate expansions, and Jacobi fields from finite differences of
geodesic families.  The check routines compare the kernel against these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ChartPoint,
    FlatTorus,
    GeodesicSegment,
    ManifoldModel,
    PointBatch,
    RoundSphere,
    christoffel_from_jet,
    curvature_at,
    curvature_from_jet,
    frame_riemann,
    geodesic_variation,
    pt_expansion_check,
    rnc_metric,
)
from .grassmann import creation_matrices, exterior_power_batch, popcount
from .kernel import KernelOptions, mq_blocks

__all__ = [
    "SmoothForm",
    "LaplacianStencil",
    "laplace_beltrami",
    "flat_fourier_form",
    "zonal_function",
    "sphere_function_form",
    "sphere_exact_form",
    "sphere_coexact_form",
    "sphere_volume_form",
    "radially_parallel_form",
    "legendre_table",
    "theta_heat_kernel",
    "exact_heat_kernel",
    "exact_heat_blocks",
    "kernel_rows",
    "GeneratorReport",
    "generator_check",
    "DeltaReport",
    "delta_convergence_check",
    "OrderReport",
    "loglog_slope",
    "rndet_check",
    "metric_expansion_check",
    "gamma_expansion_check",
    "pt_expansion_study",
    "jacobi_field_oracle",
    "lemma22_study",
    "flat_gaussian_check",
]


def loglog_slope(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 2 or np.any(ys <= 0):
        return float("nan")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------------------
# smooth test forms


@dataclass
class SmoothForm:
    """A differential form given by its chart-coordinate coefficients.

    ``coord_fn(chart_ids, coords)`` returns an array (n, 2^d); entry [i, J] is
    the coefficient of dx^J (bitmask J, ascending indices) at point i.
    ``eigenvalue`` records the Laplace eigenvalue when the form is an eigenform.
    """

    model: ManifoldModel
    coord_fn: object
    eigenvalue: float | None = None
    label: str = ""

    def coords_values(self, chart_ids, coords) -> np.ndarray:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        chart_ids = np.broadcast_to(np.asarray(chart_ids), coords.shape[:1])
        return np.asarray(self.coord_fn(chart_ids, coords), dtype=float)

    def frame_values(self, batch: PointBatch) -> np.ndarray:
        """Coefficients in the frame monomials of ``batch.frames``."""
        a = self.coords_values(batch.chart_ids, batch.coords)
        L = exterior_power_batch(batch.frames)
        return np.einsum("bji,bj->bi", L, a)

    def on_grid(self, grid):
        from .evolution import FormField

        return FormField(grid, self.frame_values(grid.batch))

    def __add__(self, other: "SmoothForm") -> "SmoothForm":
        f, g = self.coord_fn, other.coord_fn
        return SmoothForm(self.model, lambda c, x: f(c, x) + g(c, x), None, f"{self.label}+{other.label}")

    def scaled(self, c: float) -> "SmoothForm":
        f = self.coord_fn
        lam = self.eigenvalue
        return SmoothForm(self.model, lambda cid, x: c * f(cid, x), lam, self.label)

    def evolved_exactly(self, t: float) -> "SmoothForm":
        """e^{-t Delta/2} applied to an eigenform."""
        if self.eigenvalue is None:
            raise ValueError("exact evolution needs an eigenform")
        return self.scaled(math.exp(-self.eigenvalue * t / 2))


def _put(n, D, J, vals):
    out = np.zeros((n, D))
    out[:, J] = vals
    return out


def flat_fourier_form(model: FlatTorus, k, degree_mask: int = 0, phase: float = 0.0) -> SmoothForm:
    """cos(2 pi k.x / L + phase) dx^J with J = degree_mask on a flat torus."""
    k = np.asarray(k, dtype=float)
    D = 1 << model.dim
    wave = 2 * np.pi * k / model.sides
    lam = float(wave @ wave)

    def fn(cids, x):
        return _put(len(x), D, degree_mask, np.cos(x @ wave + phase))

    return SmoothForm(model, fn, lam, f"fourier({','.join(f'{v:g}' for v in k)})[{degree_mask}]")


def legendre_table(lmax: int, c):
    """P_l, P_l', P_l'' for l = 0..lmax at c, each of shape (lmax + 1,) + c.shape."""
    c = np.asarray(c, dtype=float)
    P = np.zeros((lmax + 2,) + c.shape)
    dP = np.zeros_like(P)
    ddP = np.zeros_like(P)
    P[0] = 1.0
    if lmax >= 1:
        P[1] = c
        dP[1] = 1.0
    for l in range(1, lmax + 1):
        P[l + 1] = ((2 * l + 1) * c * P[l] - l * P[l - 1]) / (l + 1)
        dP[l + 1] = dP[l - 1] + (2 * l + 1) * P[l]
        ddP[l + 1] = ddP[l - 1] + (2 * l + 1) * dP[l]
    return P[: lmax + 1], dP[: lmax + 1], ddP[: lmax + 1]


def _unit_ambient(model, cids, u):
    return model.to_ambient(cids, u) / model.radius


def zonal_function(l: int, axis=(0.0, 0.0, 1.0)):
    """(value, tangential gradient) of P_l(n.X/r) as ambient functions, r from the model."""
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)

    def evaluate(model, X):
        Xh = X / model.radius
        c = Xh @ n
        P, dP, _ = legendre_table(max(l, 1), c)
        grad = dP[l][:, None] * (n[None, :] - c[:, None] * Xh) / model.radius
        return P[l], grad

    return evaluate


def sphere_function_form(model: RoundSphere, l: int, axis=(0.0, 0.0, 1.0)) -> SmoothForm:
    f = zonal_function(l, axis)

    def fn(cids, u):
        return _put(len(u), 4, 0, f(model, model.to_ambient(cids, u))[0])

    return SmoothForm(model, fn, l * (l + 1) / model.radius**2, f"Y{l}")


def sphere_exact_form(model: RoundSphere, l: int, axis=(0.0, 0.0, 1.0)) -> SmoothForm:
    if l < 1:
        raise ValueError("l must be at least 1")
    f = zonal_function(l, axis)

    def fn(cids, u):
        _, grad = f(model, model.to_ambient(cids, u))
        J = model.jacobian(cids, u)
        out = np.zeros((len(u), 4))
        out[:, [1, 2]] = np.einsum("bia,bi->ba", J, grad)
        return out

    return SmoothForm(model, fn, l * (l + 1) / model.radius**2, f"dY{l}")


def sphere_coexact_form(model: RoundSphere, l: int, axis=(0.0, 0.0, 1.0)) -> SmoothForm:
    """The 1-form v -> df(Xhat x v), i.e. the rotated gradient."""
    if l < 1:
        raise ValueError("l must be at least 1")
    f = zonal_function(l, axis)

    def fn(cids, u):
        X = model.to_ambient(cids, u)
        _, grad = f(model, X)
        cov = np.cross(grad, X / model.radius)
        J = model.jacobian(cids, u)
        out = np.zeros((len(u), 4))
        out[:, [1, 2]] = np.einsum("bia,bi->ba", J, cov)
        return out

    return SmoothForm(model, fn, l * (l + 1) / model.radius**2, f"*dY{l}")


def sphere_volume_form(model: RoundSphere, l: int, axis=(0.0, 0.0, 1.0)) -> SmoothForm:
    f = zonal_function(l, axis)

    def fn(cids, u):
        vals = f(model, model.to_ambient(cids, u))[0]
        return _put(len(u), 4, 3, vals * model._lam(u) ** 2)

    return SmoothForm(model, fn, l * (l + 1) / model.radius**2, f"Y{l}vol")


def radially_parallel_form(model, center: ChartPoint, frame_coeffs, scalar=None) -> SmoothForm:
    """f(y) times the form that is parallel along geodesics leaving ``center``.

    ``frame_coeffs`` are the form's coefficients at the center in its
    canonical frame; ``scalar(model, X)`` (ambient) or ``scalar(cids, coords)``
    gives f (default 1).  Supported on the sphere and on flat tori.
    """
    c0 = np.asarray(frame_coeffs, dtype=float)
    d = model.dim
    F0 = model.frame_at(center).vectors
    if isinstance(model, RoundSphere):
        X0 = model.to_ambient(center.chart_id, center.coords)
        E0 = model.jacobian(center.chart_id, center.coords) @ F0  # ambient frame at center

        def fn(cids, u):
            X = model.to_ambient(cids, u)
            Xh, X0h = X / model.radius, X0 / model.radius
            c = Xh @ X0h
            # transported ambient frame vectors at y
            T = E0[None, :, :] - (Xh + X0h)[:, :, None] * np.einsum("ik,bi->bk", E0, Xh)[:, None, :] / (1 + c)[:, None, None]
            J = model.jacobian(cids, u)
            lam2 = model._lam(u) ** 2
            Fy = np.einsum("bia,bik->bak", J, T) / lam2[:, None, None]  # chart columns of transported frame
            # coordinate coefficients: Lambda(Fy^-1)^T c0
            L = exterior_power_batch(np.linalg.inv(Fy))
            a = np.einsum("bij,i->bj", L, c0)
            s = np.ones(len(u)) if scalar is None else scalar(model, X)
            return a * s[:, None]

    elif isinstance(model, FlatTorus):
        L0 = exterior_power_batch(np.linalg.inv(F0)[None])[0]
        a0 = L0.T @ c0

        def fn(cids, x):
            s = np.ones(len(x)) if scalar is None else scalar(cids, x)
            return a0[None, :] * s[:, None]

    else:
        raise TypeError("radially parallel forms need a sphere or torus model")
    del d
    return SmoothForm(model, fn, None, "parallel")


# ---------------------------------------------------------------------------
# Laplace-Beltrami on forms


_D1 = ((-2, 1.0 / 12), (-1, -8.0 / 12), (1, 8.0 / 12), (2, -1.0 / 12))
_D2 = ((-2, -1.0 / 12), (-1, 16.0 / 12), (0, -30.0 / 12), (1, 16.0 / 12), (2, -1.0 / 12))


@dataclass
class LaplacianStencil:
    """Fourth-order finite-difference realisation of the form Laplacian.

    The operator is
        -g^{mn}(nabla_m nabla_n - Gamma^s_{mn} nabla_s) - Ric^p_e psi^e d_p
        - (1/2) R_{me}^{np} psi^m psi^e d_n d_p
    with nabla_m = (coefficient derivative) - Gamma^e_{mk} psi^k d_e, where
    psi^k is exterior multiplication by dx^k and d_e the contraction.
    """

    model: ManifoldModel
    h: float = 2e-3

    def __post_init__(self):
        d = self.model.dim
        self.E, self.I = creation_matrices(d)
        self.N = np.einsum("kab,ebc->keac", self.E, self.I)  # psi^k d_e
        self.EEII = np.einsum("mab,ebc,ncd,pdf->menpaf", self.E, self.E, self.I, self.I)

    def _derivatives(self, form: SmoothForm, cids, x):
        d = self.model.dim
        h = self.h * self.model.chart_scale
        cache = {}

        def at(offsets):
            key = tuple(offsets)
            if key not in cache:
                shift = np.zeros(d)
                for ax, k in offsets:
                    shift[ax] += k * h
                cache[key] = form.coords_values(cids, x + shift)
            return cache[key]

        a = at(())
        da = np.stack([sum(w * at(((l, k),)) for k, w in _D1) / h for l in range(d)], axis=1)
        dda = np.zeros((len(x), d, d, a.shape[1]))
        for l in range(d):
            dda[:, l, l] = sum(w * at(((l, k),)) if k else w * a for k, w in _D2) / h**2
            for j in range(l + 1, d):
                acc = 0.0
                for ka, wa in _D1:
                    for kb, wb in _D1:
                        acc = acc + wa * wb * at(((l, ka), (j, kb)))
                dda[:, l, j] = dda[:, j, l] = acc / h**2
        return a, da, dda

    def coords_apply(self, form: SmoothForm, cids, x) -> np.ndarray:
        """Coordinate coefficients of Delta(form) at the given points (single chart per call)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cids = np.broadcast_to(np.asarray(cids), x.shape[:1])
        out = np.zeros((len(x), 1 << self.model.dim))
        for cid in np.unique(cids):
            sel = cids == cid
            out[sel] = self._apply_chart(form, int(cid), x[sel])
        return out

    def _apply_chart(self, form, cid, x):
        model = self.model
        cids = np.full(len(x), cid)
        a, da, dda = self._derivatives(form, cids, x)
        g, dg, ddg = model.metric_jet(cid, x)
        gamma, dgamma, R, ric = curvature_from_jet(g, dg, ddg)
        ginv = np.linalg.inv(g)
        A = np.einsum("bhnk,khij->bnij", gamma, self.N)  # A_n = Gamma^h_{nk} psi^k d_h
        dA = np.einsum("bmhnk,khij->bmnij", dgamma, self.N)
        cov = da - np.einsum("bnij,bj->bni", A, a)  # nabla_n a
        second = (
            dda
            - np.einsum("bmnij,bj->bmni", dA, a)
            - np.einsum("bnij,bmj->bmni", A, da)
            - np.einsum("bmij,bnj->bmni", A, cov)
        )
        term1 = -np.einsum("bmn,bmni->bi", ginv, second) + np.einsum(
            "bmn,bsmn,bsi->bi", ginv, gamma, cov
        )
        ric_mixed = np.einsum("bps,bse->bpe", ginv, ric)  # Ric^p_e
        term2 = -np.einsum("bpe,epij,bj->bi", ric_mixed, self.N, a)
        low = np.einsum("bmnge,bed->bmngd", R, g)
        Rup = np.einsum("bmexy,bnx,bpy->bmenp", low, ginv, ginv)
        term3 = -0.5 * np.einsum("bmenp,menpij,bj->bi", Rup, self.EEII, a)
        return term1 + term2 + term3

    def frame_apply(self, form: SmoothForm, batch: PointBatch) -> np.ndarray:
        a = self.coords_apply(form, batch.chart_ids, batch.coords)
        L = exterior_power_batch(batch.frames)
        return np.einsum("bji,bj->bi", L, a)


def laplace_beltrami(model: ManifoldModel, grid, alpha: SmoothForm, h: float = 2e-3):
    """Delta(alpha) on the grid (or point batch), as frame coefficients.

    ``grid`` may be a QuadratureGrid (a FormField is returned) or a PointBatch
    (an array is returned).
    """
    st = LaplacianStencil(model, h)
    if isinstance(grid, PointBatch):
        return st.frame_apply(alpha, grid)
    from .evolution import FormField

    return FormField(grid, st.frame_apply(alpha, grid.batch))


# ---------------------------------------------------------------------------
# exact heat kernels


def theta_heat_kernel(model: FlatTorus, x, y, t: float, images: int | None = None):
    """Scalar heat kernel of e^{-t Delta/2} on a flat torus by lattice image sums."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d = model.dim
    L = model.sides
    if images is None:
        images = max(2, int(math.ceil(8 * math.sqrt(t) / L.min())) + 1)
    delta = model.wrap(y - x)
    rng = np.arange(-images, images + 1)
    shifts = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d) * L
    r2 = np.sum((delta[:, None, :] + shifts[None]) ** 2, axis=-1)
    return (2 * math.pi * t) ** (-d / 2) * np.exp(-r2 / (2 * t)).sum(axis=1)


def _spectral_lmax(t, r, tol=1e-14):
    l = 1
    while True:
        if (2 * l + 1) * math.exp(-l * (l + 1) * t / (2 * r * r)) < tol * 1e-2 and l > 4:
            return l
        l += 1


def exact_heat_blocks(model, xs: PointBatch, ys: PointBatch, t: float, degree: int) -> np.ndarray:
    """Degree block of the exact kernel of e^{-t Delta/2} for each pair, in the batch frames."""
    if not t > 0:
        raise ValueError("t must be positive")
    if degree < 0 or degree > model.dim:
        raise ValueError("degree out of range")
    if isinstance(model, FlatTorus):
        s = theta_heat_kernel(model, xs.coords, ys.coords, t)
        k = math.comb(model.dim, degree)
        idx = [m for m in range(1 << model.dim) if popcount(m) == degree]
        L = exterior_power_batch(np.einsum("bma,bmc->bac", xs.frames, ys.frames))
        return s[:, None, None] * L[:, idx][:, :, idx].reshape(-1, k, k)
    if isinstance(model, RoundSphere):
        if model.dim != 2:
            raise ValueError("sphere oracle supports dimension 2")
        r = model.radius
        X = model.to_ambient(xs.chart_ids, xs.coords) / r
        Y = model.to_ambient(ys.chart_ids, ys.coords) / r
        c = np.clip(np.einsum("bi,bi->b", X, Y), -1, 1)
        lmax = _spectral_lmax(t, r)
        P, dP, ddP = legendre_table(lmax, c)
        ls = np.arange(lmax + 1)
        w = (2 * ls + 1) / (4 * math.pi * r * r) * np.exp(-ls * (ls + 1) * t / (2 * r * r))
        if degree in (0, 2):
            return (w @ P)[:, None, None]
        Ex = model.ambient_frames(xs)
        Ey = model.ambient_frames(ys)
        inv = np.zeros_like(w)
        inv[1:] = w[1:] / (ls[1:] * (ls[1:] + 1))
        a1 = inv @ ddP  # coefficient of (e.yhat)(xhat.f)
        a2 = inv @ dP  # coefficient of (e.f)

        def mhat(e, f):
            ey = np.einsum("bia,bi->ba", e, Y)
            xf = np.einsum("bi,bik->bk", X, f)
            ef = np.einsum("bia,bik->bak", e, f)
            return a1[:, None, None] * ey[:, :, None] * xf[:, None, :] + a2[:, None, None] * ef

        JEx = np.cross(X[:, :, None], Ex, axis=1)
        JEy = np.cross(Y[:, :, None], Ey, axis=1)
        return mhat(Ex, Ey) + mhat(JEx, JEy)
    raise TypeError("exact heat kernels are available for flat tori and round spheres")


def exact_heat_kernel(model, x: ChartPoint, y: ChartPoint, t: float, degree: int) -> np.ndarray:
    """Degree block of the exact heat kernel between two points in their canonical frames."""
    def one(p):
        return PointBatch(np.array([p.chart_id]), p.coords[None, :], model.frame_at(p).vectors[None])

    return exact_heat_blocks(model, one(x), one(y), t, degree)[0]


# ---------------------------------------------------------------------------
# generator, delta and norm checks


def kernel_rows(model, samples: PointBatch, grid, t: float, opts: KernelOptions, transpose: bool = False):
    """Kernel blocks K(x_s, y_j) (or K(y_j, x_s) when ``transpose``) for all grid points, shape (S, n, D, D)."""
    pts = grid.batch
    R_s = model.curvature_frame(samples)
    R_g = model.curvature_frame(pts) if transpose else None
    out = []
    for s in range(len(samples)):
        xs = samples.take(np.full(len(pts), s))
        if transpose:
            geom = model.pair_geometry(pts, xs)
            K = mq_blocks(geom, R_g, t, opts, model.dim, model.injectivity_radius)
        else:
            geom = model.pair_geometry(xs, pts)
            K = mq_blocks(geom, np.broadcast_to(R_s[s], (len(pts),) + R_s.shape[1:]), t, opts, model.dim, model.injectivity_radius)
        out.append(K)
    return np.stack(out)


@dataclass
class GeneratorReport:
    times: np.ndarray
    residuals: np.ndarray
    monotone: bool
    fit_constant: float
    bound_ok: bool
    slope: float
    per_degree: np.ndarray = field(default=None)

    @property
    def passed(self) -> bool:
        return self.monotone and self.bound_ok


def generator_check(
    model,
    grid,
    alpha: SmoothForm,
    times,
    samples: PointBatch,
    opts: KernelOptions | None = None,
    laplacian: np.ndarray | None = None,
    h: float = 2e-3,
) -> GeneratorReport:
    """sup over samples of |(K(t) alpha - alpha)/t + Delta alpha / 2| for each t.

    The residual model is C sqrt(t) with C fitted at the largest t; the report
    passes when residuals decrease with t and the smallest-t residual is
    within 10x of the model.
    """
    opts = opts or KernelOptions()
    times = np.asarray(times, dtype=float)
    a_grid = alpha.frame_values(grid.batch)
    a_s = alpha.frame_values(samples)
    lap = laplacian if laplacian is not None else LaplacianStencil(model, h).frame_apply(alpha, samples)
    D = 1 << model.dim
    degs = popcount(np.arange(D))
    res = np.zeros(len(times))
    per_deg = np.zeros((len(times), model.dim + 1))
    for i, t in enumerate(times):
        K = kernel_rows(model, samples, grid, t, opts)
        Ka = np.einsum("j,sjab,jb->sa", grid.weights, K, a_grid)
        r = np.abs((Ka - a_s) / t + 0.5 * lap)
        res[i] = r.max()
        per_deg[i] = [r[:, degs == k].max() for k in range(model.dim + 1)]
    order = np.argsort(times)[::-1]
    rs = res[order]
    monotone = bool(np.all(np.diff(rs) < 0))
    C = rs[0] / math.sqrt(times[order][0])
    bound_ok = bool(rs[-1] <= 10 * C * math.sqrt(times[order][-1]))
    return GeneratorReport(times, res, monotone, float(C), bound_ok, loglog_slope(times, res), per_deg)


@dataclass
class DeltaReport:
    times: np.ndarray
    residuals: np.ndarray
    monotone: bool
    slope: float


def delta_convergence_check(
    model, grid, alpha: SmoothForm, times, samples: PointBatch, opts: KernelOptions | None = None
) -> DeltaReport:
    """sup over samples y of |int K(x, y; t)^T alpha(x) dx - alpha(y)|."""
    opts = opts or KernelOptions()
    times = np.asarray(times, dtype=float)
    a_grid = alpha.frame_values(grid.batch)
    a_s = alpha.frame_values(samples)
    res = np.zeros(len(times))
    for i, t in enumerate(times):
        K = kernel_rows(model, samples, grid, t, opts, transpose=True)
        out = np.einsum("j,sjab,ja->sb", grid.weights, K, a_grid)
        res[i] = np.abs(out - a_s).max()
    order = np.argsort(times)[::-1]
    monotone = bool(np.all(np.diff(res[order]) < 0))
    return DeltaReport(times, res, monotone, loglog_slope(times, res))


# ---------------------------------------------------------------------------
# normal-coordinate expansions and Jacobi fields


@dataclass
class OrderReport:
    name: str
    scales: np.ndarray
    errors: np.ndarray
    slope: float
    expected_order: float

    @property
    def passed(self) -> bool:
        return bool(self.slope >= self.expected_order - 0.3) or bool(np.all(self.errors < 1e-13))


def _directions(dim, count=3, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rndet_check(model, center: ChartPoint, scales=(0.2, 0.1, 0.05, 0.025)) -> OrderReport:
    """sqrt(det g) in normal coordinates versus 1 + (1/6) Ric(x, x)."""
    cd = curvature_at(model, center)
    F = model.frame_at(center).vectors
    Ric = F.T @ cd.ricci @ F
    errs = []
    for d in scales:
        e = 0.0
        for u in _directions(model.dim):
            x = d * u
            g = rnc_metric(model, center, x)
            e = max(e, abs(math.sqrt(np.linalg.det(g)) - 1 - x @ Ric @ x / 6))
        errs.append(e)
    return OrderReport("rndet", np.array(scales), np.array(errs), loglog_slope(scales, errs), 3.0)


def metric_expansion_check(model, center: ChartPoint, scales=(0.2, 0.1, 0.05, 0.025)) -> OrderReport:
    """g^{mn}(x) - delta + (1/3) R_{m s n t} x^s x^t in normal coordinates."""
    cd = curvature_at(model, center)
    F = model.frame_at(center).vectors
    Rf = frame_riemann(cd.riemann, cd.metric, F)
    errs = []
    for d in scales:
        e = 0.0
        for u in _directions(model.dim):
            x = d * u
            ginv = np.linalg.inv(rnc_metric(model, center, x))
            pred = np.eye(model.dim) - np.einsum("msnt,s,t->mn", Rf, x, x) / 3
            e = max(e, np.abs(ginv - pred).max())
        errs.append(e)
    return OrderReport("metric-2nd-order", np.array(scales), np.array(errs), loglog_slope(scales, errs), 3.0)


def gamma_expansion_check(model, center: ChartPoint, scales=(0.2, 0.1, 0.05, 0.025), h: float = 1e-4) -> OrderReport:
    """Christoffel symbols in normal coordinates versus -(1/3)[R_{mng}^d + R_{gnm}^d] x^n."""
    cd = curvature_at(model, center)
    F = model.frame_at(center).vectors
    Rf = frame_riemann(cd.riemann, cd.metric, F)  # orthonormal: upper = lower last index
    d = model.dim
    errs = []
    for s in scales:
        e = 0.0
        for u in _directions(d):
            x = s * u
            g = rnc_metric(model, center, x)
            dg = np.zeros((d, d, d))
            for l in range(d):
                step = np.zeros(d)
                step[l] = h
                dg[l] = (
                    -rnc_metric(model, center, x + 2 * step)
                    + 8 * rnc_metric(model, center, x + step)
                    - 8 * rnc_metric(model, center, x - step)
                    + rnc_metric(model, center, x - 2 * step)
                ) / (12 * h)
            gam = christoffel_from_jet(g, dg)  # [delta, mu, gamma]
            pred = -(np.einsum("mngd,n->dmg", Rf, x) + np.einsum("gnmd,n->dmg", Rf, x)) / 3
            e = max(e, np.abs(gam - pred).max())
        errs.append(e)
    return OrderReport("gamma-1st-order", np.array(scales), np.array(errs), loglog_slope(scales, errs), 2.0)


def pt_expansion_study(model, center: ChartPoint, scales=(0.2, 0.1, 0.05, 0.025)) -> OrderReport:
    F = model.frame_at(center).vectors
    errs = []
    for s in scales:
        e = 0.0
        for u, v in zip(_directions(model.dim, seed=1), _directions(model.dim, seed=2)):
            q = model.exp_map(center, F @ (s * u))
            e = max(e, pt_expansion_check(model, center, q, v))
        errs.append(e)
    return OrderReport("transport-2nd-order", np.array(scales), np.array(errs), loglog_slope(scales, errs), 3.0)


def jacobi_field_oracle(model, seg: GeodesicSegment, psi0, psi1, s: float, eps: float = 1e-5) -> np.ndarray:
    """Jacobi field of the geodesic family with perturbed endpoints, moved back to seg.start.

    Endpoints are displaced to exp(e psi0), exp(e psi1); the point at parameter
    s is differentiated in e by central differences in the chart of seg.start.
    The result is in the frame at seg.start.
    """
    psi0 = np.asarray(psi0, dtype=float)
    psi1 = np.asarray(psi1, dtype=float)
    a0, b0 = seg.start, seg.end
    Fa = model.frame_at(a0).vectors
    Fb = model.frame_at(b0).vectors
    cid = a0.chart_id

    def point(e):
        a = model.exp_map(a0, e * (Fa @ psi0))
        b = model.exp_map(b0, e * (Fb @ psi1))
        sg = model.log_map(a, b)
        return model.to_chart(model.exp_map(a, s * sg.log_vector), cid)

    mid = point(0.0)
    plus, minus = point(eps), point(-eps)
    diff = model._coord_diff(plus.coords, minus.coords, cid) if hasattr(model, "_coord_diff") else plus.coords - minus.coords
    J = diff / (2 * eps)  # chart vector at mid
    Fm = model.frame_at(mid).vectors
    Jf = np.linalg.solve(Fm, J)
    if s == 0:
        return Jf
    back = model.parallel_transport(model.log_map(mid, a0))
    return back @ Jf


def lemma22_study(model, center: ChartPoint, scales=(0.2, 0.1, 0.05, 0.025), svals=(0.25, 0.5, 0.75)) -> OrderReport:
    """Max discrepancy between geodesic_variation and the Jacobi-field oracle."""
    F = model.frame_at(center).vectors
    psi0 = np.array([0.3, 1.0] + [0.0] * (model.dim - 2))
    psi1 = np.array([1.0, -0.4] + [0.0] * (model.dim - 2))
    u = _directions(model.dim, count=1, seed=3)[0]
    errs = []
    for d in scales:
        q = model.exp_map(center, F @ (d * u))
        seg = model.log_map(center, q)
        e = 0.0
        for s in svals:
            e = max(e, np.linalg.norm(geodesic_variation(model, seg, psi0, psi1, s) - jacobi_field_oracle(model, seg, psi0, psi1, s)))
        errs.append(e)
    return OrderReport("geodesic-variation", np.array(scales), np.array(errs), loglog_slope(scales, errs), 3.0)


def flat_gaussian_check(f, lap_f, times=(0.1, 0.05, 0.025, 0.0125), dim: int = 2, order: int = 40) -> OrderReport:
    """Gauss-Hermite quadrature of H(0, y; t) f(y) versus f(0) - t Delta f(0) / 2.

    ``f`` maps (n, dim) points to values; ``lap_f`` is Delta f(0) with the
    positive sign convention Delta = -sum d^2.
    """
    z, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    mesh = np.stack(np.meshgrid(*([z] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    wm = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij"), axis=-1).reshape(-1, dim), axis=1)
    f0 = float(f(np.zeros((1, dim)))[0])
    errs = []
    for t in times:
        val = float(wm @ f(math.sqrt(t) * mesh))
        errs.append(abs(val - (f0 - t * lap_f / 2)))
    return OrderReport("flat-gaussian", np.array(times), np.array(errs), loglog_slope(times, errs), 2.0)
