"""Experiment drivers behind the command line.

Each driver takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` holding measurement rows and pass/fail checks.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, build_model
from .evolution import (
    FormField,
    Partition,
    UnderResolvedWarning,
    build_grid,
    compose_partition,
    evolve,
)
from .geometry import (
    ChartMetric,
    ChartPoint,
    FlatTorus,
    PointBatch,
    RoundSphere,
    curvature_at,
)
from .kernel import KernelOptions, check_operator_norm
from .oracles import (
    delta_convergence_check,
    flat_fourier_form,
    flat_gaussian_check,
    gamma_expansion_check,
    generator_check,
    lemma22_study,
    loglog_slope,
    metric_expansion_check,
    pt_expansion_study,
    radially_parallel_form,
    rndet_check,
    sphere_coexact_form,
    sphere_exact_form,
    sphere_function_form,
    sphere_volume_form,
    theta_heat_kernel,
    zonal_function,
)
from .supertrace import euler_characteristic, loop_trace

__all__ = ["Check", "ExperimentResult", "run_experiment", "DEFAULTS"]


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    relation: str = "<="

    def as_dict(self):
        v = self.value
        return {
            "name": self.name,
            "value": None if v is None or (isinstance(v, float) and math.isnan(v)) else v,
            "relation": self.relation,
            "tolerance": self.tolerance,
            "passed": bool(self.passed),
        }


def _le(name, value, tol):
    return Check(name, float(value), float(tol), bool(value <= tol), "<=")


def _ge(name, value, tol):
    return Check(name, float(value), float(tol), bool(value >= tol), ">=")


@dataclass
class ExperimentResult:
    kind: str
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
            "warnings": self.warnings,
            **self.meta,
        }


DEFAULTS = {
    "evolve": {"N": {"sphere": 48, "torus": 64, "chart": 48}, "t": 0.5, "n": 32},
    "generator-check": {"N": {"sphere": 96, "torus": 128, "chart": 96}, "t_seq": (0.02, 0.01, 0.005)},
    "norm-check": {"N": {"sphere": 96, "torus": 128, "chart": 96}, "t_seq": (0.1, 0.05, 0.025)},
    "delta-check": {"N": {"sphere": 96, "torus": 128, "chart": 96}, "t_seq": (0.1, 0.05, 0.025)},
    "supertrace": {"N": {"sphere": 48, "torus": 64, "chart": 48}, "t": 0.5, "n": 16},
    "lemma22": {"d_seq": (0.2, 0.1, 0.05, 0.025)},
    "expansion-checks": {"d_seq": (0.2, 0.1, 0.05, 0.025)},
    "convergence-study": {"N": {"sphere": 48, "torus": 64, "chart": 48}, "t": 0.5, "n_seq": (4, 8, 16, 32)},
}

TOLERANCES = {
    "evolve_rel_torus": 1e-3,
    "evolve_rel_sphere": 2e-2,
    "generator_bound_factor": 10.0,
    "ablation_plateau_slope": 0.5,
    "norm_ratio": 0.5,
    "norm_ratio_rel": 0.2,
    "norm_flat": 1e-6,
    "delta_flat": 1e-6,
    "chi_torus": 1e-3,
    "chi_sphere": 1e-2,
    "chi_t_spread": 2e-2,
    "lemma22_slope": 2.7,
    "expansion_slack": 0.3,
    "symmetry": 1e-8,
    "orthogonality": 1e-10,
    "holonomy": 1e-6,
    "convergence_slope": 0.8,
}


def _tol(cfg, key):
    return float(cfg.tolerances.get(key, TOLERANCES[key]))


def _N(cfg, kind):
    return cfg.N if cfg.N is not None else DEFAULTS[kind]["N"][cfg.model_name]


def _times(cfg, kind):
    return tuple(cfg.t_seq) if cfg.t_seq is not None else DEFAULTS[kind]["t_seq"]


def _partition(cfg, kind):
    t = cfg.t if cfg.t is not None else DEFAULTS[kind]["t"]
    if cfg.partition is not None:
        return Partition(cfg.partition_times(t))
    return Partition.uniform(t, DEFAULTS[kind]["n"])


def _sample_points(model, cfg, count=3):
    """Deterministic pseudo-random sample points (seeded)."""
    rng = np.random.default_rng(cfg.seed)
    if isinstance(model, RoundSphere):
        X = rng.normal(size=(count, model.dim + 1))
        X = model.radius * X / np.linalg.norm(X, axis=1, keepdims=True)
        cids, u = model.from_ambient(X)
        return PointBatch(cids, u, model.frames(cids, u))
    if isinstance(model, FlatTorus):
        c = rng.random((count, model.dim)) * model.sides
    elif model.periods is not None:
        c = rng.random((count, model.dim)) * np.asarray(model.periods)
    else:
        lo, hi = (np.asarray(b, float) for b in model.domain)
        c = lo + (0.25 + 0.5 * rng.random((count, model.dim))) * (hi - lo)
    cids = np.zeros(count, dtype=int)
    return PointBatch(cids, c, model.frames(cids, c))


def _axes(cfg, count):
    rng = np.random.default_rng(cfg.seed + 1)
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# evolve / convergence


def _torus_exact(model, grid, alpha: FormField, t: float) -> np.ndarray:
    """Apply the lattice image-sum heat kernel to grid data by FFT convolution."""
    N = int(round(len(grid) ** (1 / model.dim)))
    origin = np.zeros((len(grid), model.dim))
    row = theta_heat_kernel(model, origin, grid.batch.coords, t) * grid.weights
    # grid index = i1 * N + i0 with i0 the first coordinate
    kern = np.fft.fft2(row.reshape(N, N))
    vals = alpha.values.reshape(N, N, -1)
    out = np.fft.ifft2(np.fft.fft2(vals, axes=(0, 1)) * kern[:, :, None], axes=(0, 1)).real
    return out.reshape(len(grid), -1)


def _torus_initial(model, grid, cfg):
    rng = np.random.default_rng(cfg.seed)
    D = 1 << model.dim
    vals = np.zeros((len(grid), D))
    x = grid.batch.coords
    for J in range(D):
        for _ in range(3):
            k = rng.integers(-2, 3, size=model.dim)
            vals[:, J] += rng.normal() * np.cos(2 * np.pi * (x @ (k / model.sides)) + rng.random() * 2 * np.pi)
    return FormField(grid, vals)


def _sphere_eigen_mixture(model, cfg):
    """A seeded sum of eigenforms in every degree."""
    axes = _axes(cfg, 6)
    parts = [
        sphere_function_form(model, 1, axes[0]),
        sphere_function_form(model, 2, axes[1]).scaled(0.5),
        sphere_exact_form(model, 2, axes[2]).scaled(0.4),
        sphere_coexact_form(model, 1, axes[3]).scaled(0.6),
        sphere_volume_form(model, 1, axes[4]).scaled(0.7),
        sphere_volume_form(model, 3, axes[5]).scaled(0.3),
    ]
    return parts


def _evolution_errors(model, grid, partition, cfg, opts):
    """Per-degree sup errors of the evolved field against the exact semigroup."""
    t = partition.total
    if isinstance(model, FlatTorus):
        alpha = _torus_initial(model, grid, cfg)
        exact = _torus_exact(model, grid, alpha, t)
    elif isinstance(model, RoundSphere):
        parts = _sphere_eigen_mixture(model, cfg)
        alpha = FormField(grid, sum(p.frame_values(grid.batch) for p in parts))
        exact = sum(p.evolved_exactly(t).frame_values(grid.batch) for p in parts)
    else:
        raise ValueError("no exact oracle for chart metrics; use convergence-study")
    out = evolve(model, grid, partition, alpha, opts, cfg.storage, cfg.workers)
    rows = []
    from .grassmann import popcount

    degs = popcount(np.arange(1 << model.dim))
    for k in range(model.dim + 1):
        sel = degs == k
        err = float(np.abs(out.values[:, sel] - exact[:, sel]).max())
        scale = float(np.abs(exact[:, sel]).max())
        rows.append({"degree": k, "sup_error": err, "rel_error": err / scale if scale else float("nan")})
    return rows


def _kernel_vs_theta(model, grid, partition, cfg, opts):
    K = compose_partition(model, grid, partition, opts, cfg.storage, cfg.workers)
    t = partition.total
    idx = np.linspace(0, len(grid) - 1, 7).astype(int)
    err = 0.0
    peak = 0.0
    D = 1 << model.dim
    for i in idx:
        rb = K.row_blocks(int(i))
        th = theta_heat_kernel(model, np.repeat(grid.batch.coords[i][None], len(grid), 0), grid.batch.coords, t)
        err = max(err, float(np.abs(rb - th[:, None, None] * np.eye(D)).max()))
        peak = max(peak, float(th.max()))
    return err / peak


def _run_evolve(cfg: ExperimentConfig, model) -> ExperimentResult:
    res = ExperimentResult("evolve")
    opts = cfg.kernel
    grid = build_grid(model, _N(cfg, "evolve"), cfg.grid_kind)
    part = _partition(cfg, "evolve")
    base = {"model": cfg.model_name, "N": _N(cfg, "evolve"), "t": part.total, "n": len(part)}
    if isinstance(model, ChartMetric):
        a = _chart_initial(model, grid, cfg)
        fine = Partition(tuple(x / 2 for x in part.times for _ in (0, 1)))
        o1 = evolve(model, grid, part, a, opts, cfg.storage, cfg.workers)
        o2 = evolve(model, grid, fine, a, opts, cfg.storage, cfg.workers)
        diff = float(np.abs(o1.values - o2.values).max())
        res.rows.append({**base, "quantity": "refinement_difference", "value": diff})
        return res
    rows = _evolution_errors(model, grid, part, cfg, opts)
    key = "evolve_rel_torus" if isinstance(model, FlatTorus) else "evolve_rel_sphere"
    for r in rows:
        res.rows.append({**base, **r})
    worst = max(r["rel_error"] for r in rows)
    res.checks.append(_le(f"{cfg.model_name} evolution relative sup error", worst, _tol(cfg, key)))
    if isinstance(model, FlatTorus):
        kerr = _kernel_vs_theta(model, grid, part, cfg, opts)
        res.rows.append({**base, "degree": "kernel", "sup_error": None, "rel_error": kerr})
        res.checks.append(_le("composed kernel vs theta kernel (relative)", kerr, _tol(cfg, key)))
    return res


def _chart_initial(model, grid, cfg):
    rng = np.random.default_rng(cfg.seed)
    D = 1 << model.dim
    x = grid.batch.coords
    P = np.asarray(model.periods if model.periods is not None else np.ptp(np.asarray(model.domain, float), axis=0))
    vals = np.zeros((len(grid), D))
    for J in range(D):
        k = rng.integers(-1, 2, size=model.dim)
        vals[:, J] = np.cos(2 * np.pi * x @ (k / P) + rng.random())
    return FormField(grid, vals)


def _run_convergence(cfg: ExperimentConfig, model) -> ExperimentResult:
    res = ExperimentResult("convergence-study")
    opts = cfg.kernel
    t = cfg.t if cfg.t is not None else DEFAULTS["convergence-study"]["t"]
    n_seq = cfg.n_seq if cfg.n_seq is not None else (DEFAULTS["convergence-study"]["n_seq"] if cfg.N_seq is None else None)
    N0 = _N(cfg, "convergence-study")
    n0 = cfg.partition["n"] if cfg.partition and "n" in cfg.partition else 16
    sweeps = []
    if n_seq is not None:
        sweeps.append(("n", [(N0, n) for n in n_seq]))
    if cfg.N_seq is not None:
        sweeps.append(("N", [(N, n0) for N in cfg.N_seq]))
    for axis, pairs in sweeps:
        errs = []
        for N, n in pairs:
            grid = build_grid(model, N, cfg.grid_kind)
            part = Partition.uniform(t, n)
            if isinstance(model, ChartMetric):
                a = _chart_initial(model, grid, cfg)
                o1 = evolve(model, grid, part, a, opts, cfg.storage, cfg.workers)
                o2 = evolve(model, grid, Partition.uniform(t, 2 * n), a, opts, cfg.storage, cfg.workers)
                e = float(np.abs(o1.values - o2.values).max())
            else:
                rows = _evolution_errors(model, grid, part, cfg, opts)
                e = rows[0]["sup_error"]
            errs.append(e)
            res.rows.append({"model": cfg.model_name, "axis": axis, "N": N, "n": n, "t": t, "degree": 0, "sup_error": e})
        if len(pairs) >= 2:
            xs = [1.0 / n for _, n in pairs] if axis == "n" else [1.0 / N for N, _ in pairs]
            slope = loglog_slope(xs, errs)
            res.meta[f"slope_{axis}"] = slope
            if axis == "n" and max(errs) < 1e-8:
                # the flat kernel is exact for every n, so only the size of the error matters
                res.checks.append(_le("error for every n (exact flat kernel)", max(errs), 1e-8))
            elif axis == "n":
                res.checks.append(_ge("error slope in 1/n", slope, _tol(cfg, "convergence_slope")))
        else:
            res.meta[f"slope_{axis}"] = None
    return res


# ---------------------------------------------------------------------------
# generator / norm / delta


def _generator_forms(model, cfg):
    """(label, form, samples, role) tuples; role marks the ablation target degree."""
    samples = _sample_points(model, cfg, 3)
    out = []
    if isinstance(model, RoundSphere):
        axes = _axes(cfg, 2)
        Y1 = zonal_function(1, axes[0])
        x0 = samples.point(0)
        one = samples.take([0])
        out.append(("Y0", sphere_function_form(model, 0), samples, 0))
        out.append(("Y1", sphere_function_form(model, 1, axes[0]), samples, 0))
        out.append(("Y1*parallel-1form", radially_parallel_form(model, x0, [0, 1, 0.5, 0], lambda m, X: Y1(m, X)[0]), one, 1))
        out.append(("Y1*volume", radially_parallel_form(model, x0, [0, 0, 0, 1], lambda m, X: Y1(m, X)[0]), one, 2))
    elif isinstance(model, FlatTorus):
        out.append(("cos-0form", flat_fourier_form(model, (1, 0)), samples, 0))
        out.append(("cos-1form", flat_fourier_form(model, (1, 1), 1), samples, 1))
        out.append(("cos-volume", flat_fourier_form(model, (0, 1), 3), samples, 2))
        out.append(("constant-volume", flat_fourier_form(model, (0, 0), 3), samples, 2))
    else:
        from .oracles import SmoothForm

        P = np.asarray(model.periods if model.periods is not None else (1.0, 1.0), dtype=float)

        def f0(c, x):
            v = np.zeros((len(x), 4))
            v[:, 0] = np.cos(2 * np.pi * x[:, 0] / P[0])
            return v

        out.append(("cos-0form", SmoothForm(model, f0, None, "cos"), samples, 0))
    return out


def _run_generator(cfg, model):
    res = ExperimentResult("generator-check")
    grid = build_grid(model, _N(cfg, "generator-check"), cfg.grid_kind)
    times = _times(cfg, "generator-check")
    factor = _tol(cfg, "generator_bound_factor")
    full = cfg.kernel
    for label, form, samples, role in _generator_forms(model, cfg):
        rep = generator_check(model, grid, form, times, samples, full)
        for t, r in zip(rep.times, rep.residuals):
            res.rows.append({"form": label, "kernel": "full", "t": t, "residual": r})
        res.checks.append(Check(f"{label}: residual decreases in t", rep.slope, 0.0, rep.monotone, "monotone"))
        small = rep.residuals[np.argmin(rep.times)]
        bound = factor * rep.fit_constant * math.sqrt(min(times))
        res.checks.append(_le(f"{label}: residual at smallest t vs {factor:g}x C sqrt(t)", small, bound))
        if isinstance(model, RoundSphere) and role in (1, 2):
            for which in ("include_quadratic_rho", "include_linear_curvature"):
                if not getattr(full, which):
                    continue
                opts = KernelOptions(**{**full.__dict__, which: False})
                ab = generator_check(model, grid, form, times, samples, opts)
                for t, r in zip(ab.times, ab.residuals):
                    res.rows.append({"form": label, "kernel": f"no-{which[8:]}", "t": t, "residual": r})
                plateau = ab.slope < _tol(cfg, "ablation_plateau_slope")
                res.meta.setdefault("ablation", []).append(
                    {"form": label, "disabled": which, "slope": ab.slope, "plateau": bool(plateau)}
                )
                # the quadratic term only acts on top-degree forms in two dimensions
                expected = which == "include_linear_curvature" or role == model.dim
                if expected:
                    res.checks.append(
                        Check(f"ablation {which}=false breaks {label}", ab.slope, _tol(cfg, "ablation_plateau_slope"), bool(plateau), "<")
                    )
    return res


def _run_norm(cfg, model):
    res = ExperimentResult("norm-check")
    grid = build_grid(model, _N(cfg, "norm-check"), cfg.grid_kind)
    times = _times(cfg, "norm-check")
    samples = _sample_points(model, cfg, 3)
    rep = check_operator_norm(model, times, samples, grid, cfg.kernel)
    for i, t in enumerate(rep.times):
        row = {"model": cfg.model_name, "t": t, "deviation": rep.deviation[i]}
        row.update({f"deg{k}": rep.per_degree[i, k] for k in range(model.dim + 1)})
        res.rows.append(row)
    flat = float(np.max(rep.deviation)) < 1e-9 or isinstance(model, FlatTorus)
    if flat:
        res.checks.append(_le("| ||K(t)|| - 1 | on a flat model", float(np.max(rep.deviation)), _tol(cfg, "norm_flat")))
    else:
        target, rel = _tol(cfg, "norm_ratio"), _tol(cfg, "norm_ratio_rel")
        for i, r in enumerate(rep.ratios):
            res.checks.append(_le(f"halving ratio {i + 1} deviation from {target:g} (relative)", abs(r - target) / target, rel))
    res.meta["slope"] = rep.slope
    return res


def _delta_forms(model, cfg):
    if isinstance(model, RoundSphere):
        ax = _axes(cfg, 4)
        return [
            sphere_function_form(model, 2, ax[0]),
            sphere_exact_form(model, 2, ax[1]),
            sphere_coexact_form(model, 1, ax[2]),
            sphere_volume_form(model, 2, ax[3]),
        ]
    if isinstance(model, FlatTorus):
        return [
            flat_fourier_form(model, (0, 0)),
            flat_fourier_form(model, (0, 0), 3),
            flat_fourier_form(model, (1, 2), 1),
        ]
    return [_generator_forms(model, cfg)[0][1]]


def _run_delta(cfg, model):
    res = ExperimentResult("delta-check")
    grid = build_grid(model, _N(cfg, "delta-check"), cfg.grid_kind)
    times = _times(cfg, "delta-check")
    samples = _sample_points(model, cfg, 4)
    for form in _delta_forms(model, cfg):
        rep = delta_convergence_check(model, grid, form, times, samples, cfg.kernel)
        for t, r in zip(rep.times, rep.residuals):
            res.rows.append({"form": form.label, "t": t, "residual": r})
        if isinstance(model, FlatTorus) and form.eigenvalue == 0:
            res.checks.append(_le(f"{form.label}: residual for a constant form", float(rep.residuals.max()), _tol(cfg, "delta_flat")))
        else:
            res.checks.append(Check(f"{form.label}: residual decreases in t", rep.slope, 0.0, rep.monotone, "monotone"))
    return res


# ---------------------------------------------------------------------------


def _run_supertrace(cfg, model):
    res = ExperimentResult("supertrace")
    N = _N(cfg, "supertrace")
    grid = build_grid(model, N, cfg.grid_kind)
    part = _partition(cfg, "supertrace")
    n = len(part)
    ts = [part.total] if cfg.t_seq is None else list(cfg.t_seq)
    integrals = []
    for t in ts:
        rep = loop_trace(model, grid, t, n, cfg.kernel, cfg.storage, cfg.workers, resolution=N)
        integrals.append(rep.integral)
        res.rows.append(
            {"t": t, "n": n, "N": N, "integral": rep.integral, "target": rep.target_chi,
             "density_min": float(rep.str_density.min()), "density_max": float(rep.str_density.max())}
        )
    try:
        chi = euler_characteristic(model)
    except ValueError:
        chi = None
    if chi is not None:
        key = "chi_torus" if isinstance(model, FlatTorus) else "chi_sphere"
        for t, I in zip(ts, integrals):
            res.checks.append(_le(f"|integral - {chi}| at t={t:g}", abs(I - chi), _tol(cfg, key)))
    if len(ts) > 1:
        spread = max(integrals) - min(integrals)
        res.checks.append(_le("spread of the integral across t", spread, _tol(cfg, "chi_t_spread")))
    return res


def _center(model, cfg) -> ChartPoint:
    return _sample_points(model, cfg, 1).point(0)


def _scale_seq(cfg, kind, model):
    seq = cfg.d_seq if cfg.d_seq is not None else DEFAULTS[kind]["d_seq"]
    if isinstance(model, RoundSphere):
        seq = tuple(s * model.radius for s in seq)
    return seq


def _run_lemma22(cfg, model):
    res = ExperimentResult("lemma22")
    seq = _scale_seq(cfg, "lemma22", model)
    rep = lemma22_study(model, _center(model, cfg), seq)
    for d, e in zip(rep.scales, rep.errors):
        res.rows.append({"d": d, "error": e})
    res.meta["slope"] = rep.slope
    if np.all(rep.errors < 1e-12):
        res.checks.append(_le("discrepancy (flat model)", float(rep.errors.max()), 1e-10))
    else:
        res.checks.append(_ge("log-log slope of the discrepancy", rep.slope, _tol(cfg, "lemma22_slope")))
    return res


def _geometry_consistency(model, cfg):
    """Curvature symmetries, Bianchi sum, transport orthogonality and triangle holonomy."""
    out = []
    pts = _sample_points(model, cfg, 3)
    sym = bianchi = ortho = selfpar = 0.0
    for i in range(len(pts)):
        p = pts.point(i)
        cd = curvature_at(model, p)
        low = cd.riemann_lowered
        sym = max(
            sym,
            np.abs(cd.gamma - np.swapaxes(cd.gamma, 1, 2)).max(),
            np.abs(low + np.swapaxes(low, 0, 1)).max(),
            np.abs(low + np.swapaxes(low, 2, 3)).max(),
            np.abs(low - np.transpose(low, (2, 3, 0, 1))).max(),
            np.abs(cd.ricci - cd.ricci.T).max(),
        )
        bianchi = max(bianchi, np.abs(low + np.transpose(low, (1, 2, 0, 3)) + np.transpose(low, (2, 0, 1, 3))).max())
        F = model.frame_at(p).vectors
        v = F @ np.array([0.3, 0.2] + [0.0] * (model.dim - 2))
        q = model.exp_map(p, v)
        seg = model.log_map(p, q)
        P = model.parallel_transport(seg)
        ortho = max(ortho, np.abs(P.T @ P - np.eye(model.dim)).max())
        sdot0 = np.linalg.solve(F, seg.log_vector)
        back = model.log_map(q, p)
        sdot1 = -np.linalg.solve(model.frame_at(q).vectors, back.log_vector)
        selfpar = max(selfpar, np.abs(P @ sdot0 - sdot1).max())
    scale = max(1.0, float(np.abs(curvature_at(model, pts.point(0)).riemann_lowered).max()))
    out.append(_le("curvature and Christoffel symmetries", sym / scale, _tol(cfg, "symmetry")))
    out.append(_le("first Bianchi identity", bianchi / scale, _tol(cfg, "symmetry")))
    out.append(_le("transport orthogonality", ortho, _tol(cfg, "orthogonality")))
    out.append(_le("geodesic self-parallelism", selfpar, _tol(cfg, "orthogonality")))
    if isinstance(model, RoundSphere) and model.dim == 2:
        r = model.radius
        rng = np.random.default_rng(cfg.seed + 7)
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        basis = np.linalg.svd(c[None, :])[2][1:]
        verts = []
        for ang in (0.0, 2.1, 4.0):
            w = math.cos(ang) * basis[0] + math.sin(ang) * basis[1]
            verts.append(model.canonical(r * (math.cos(0.6) * c + math.sin(0.6) * w)))
        M = np.eye(2)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            M = model.parallel_transport(model.log_map(verts[a], verts[b])) @ M
        angle = math.atan2(M[1, 0], M[0, 0])
        X = [model.to_ambient(v.chart_id, v.coords) / r for v in verts]
        # spherical excess via the solid angle of the geodesic triangle
        num = abs(np.dot(X[0], np.cross(X[1], X[2])))
        den = 1 + X[0] @ X[1] + X[1] @ X[2] + X[2] @ X[0]
        area = 2 * math.atan2(num, den) * r * r
        out.append(_le("triangle holonomy minus enclosed curvature", abs(abs(angle) - area / r**2), _tol(cfg, "holonomy")))
    return out


def _run_expansions(cfg, model):
    res = ExperimentResult("expansion-checks")
    seq = _scale_seq(cfg, "expansion-checks", model)
    center = _center(model, cfg)
    slack = _tol(cfg, "expansion_slack")
    for fn in (rndet_check, metric_expansion_check, gamma_expansion_check, pt_expansion_study):
        rep = fn(model, center, seq)
        for d, e in zip(rep.scales, rep.errors):
            res.rows.append({"check": rep.name, "scale": d, "error": e})
        if np.all(rep.errors < 1e-11):
            res.checks.append(_le(f"{rep.name}: error (flat model)", float(rep.errors.max()), 1e-9))
        else:
            res.checks.append(_ge(f"{rep.name}: log-log slope", rep.slope, rep.expected_order - slack))

    def f(x):
        return np.cos(x[:, 0]) * np.exp(0.5 * np.sin(x[:, 1]))

    # Delta f(0) for f = cos(x) exp(sin(y)/2): -(f_xx + f_yy) = 1 - 1/4
    rep = flat_gaussian_check(f, 0.75)
    for d, e in zip(rep.scales, rep.errors):
        res.rows.append({"check": rep.name, "scale": d, "error": e})
    res.checks.append(_ge(f"{rep.name}: log-log slope", rep.slope, rep.expected_order - slack))
    res.checks.extend(_geometry_consistency(model, cfg))
    return res


_DRIVERS = {
    "evolve": _run_evolve,
    "generator-check": _run_generator,
    "norm-check": _run_norm,
    "delta-check": _run_delta,
    "supertrace": _run_supertrace,
    "lemma22": _run_lemma22,
    "expansion-checks": _run_expansions,
    "convergence-study": _run_convergence,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    model = build_model(cfg.model)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UnderResolvedWarning)
        res = _DRIVERS[cfg.kind](cfg, model)
    res.warnings.extend(sorted({str(w.message) for w in caught if issubclass(w.category, UnderResolvedWarning)}))
    res.meta["config"] = cfg.to_dict()
    return res
