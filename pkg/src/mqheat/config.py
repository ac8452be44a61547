"""Experiment configuration: a JSON document validated into :class:`ExperimentConfig`.

Example::

    {
      "kind": "supertrace",
      "model": {"name": "sphere", "radius": 1.0},
      "N": 48, "t": 0.5, "partition": {"n": 16},
      "kernel": {"include_quadratic_rho": true, "gaussian_cutoff": 7},
      "seed": 0
    }

Chart metrics take either expression strings in the chart coordinates x0, x1
(``"metric": [["1 + 0.2*cos(x0)", "0"], ["0", "1"]]``) or a tabulated grid
(``"table": "metric.npz"`` holding arrays ``x0``, ``x1`` and ``g`` of shape
(n0, n1, 2, 2)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import ChartMetric, FlatTorus, ManifoldModel, RoundSphere
from .kernel import KernelOptions

__all__ = ["ConfigError", "ExperimentConfig", "KINDS", "load_config", "parse_config", "build_model"]

KINDS = (
    "evolve",
    "generator-check",
    "norm-check",
    "delta-check",
    "supertrace",
    "lemma22",
    "expansion-checks",
    "convergence-study",
)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str, line: int | None = None):
        self.field = field_name
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}field '{field_name}': {message}")


_MODEL_KEYS = {
    "sphere": {"name", "radius"},
    "torus": {"name", "sides"},
    "chart": {"name", "metric", "table", "periods", "domain", "injectivity_radius", "volume"},
}

_TOP_KEYS = {
    "kind", "model", "N", "t", "partition", "kernel", "seed", "out", "format", "workers",
    "d_seq", "t_seq", "n_seq", "N_seq", "storage", "tolerances", "grid_kind",
}

_KERNEL_KEYS = {"include_ricci_scalar", "include_linear_curvature", "include_quadratic_rho", "gaussian_cutoff"}


@dataclass
class ExperimentConfig:
    kind: str
    model: dict = field(default_factory=lambda: {"name": "sphere", "radius": 1.0})
    N: int | None = None
    t: float | None = None
    partition: dict | None = None
    kernel: KernelOptions = field(default_factory=KernelOptions)
    seed: int = 0
    out: str | None = None
    format: str = "csv"
    workers: int = 1
    d_seq: tuple | None = None
    t_seq: tuple | None = None
    n_seq: tuple | None = None
    N_seq: tuple | None = None
    storage: str = "auto"
    tolerances: dict = field(default_factory=dict)
    grid_kind: str = "auto"

    @property
    def model_name(self) -> str:
        return self.model["name"]

    def partition_times(self, t: float | None = None, n: int | None = None) -> tuple:
        t = self.t if t is None else t
        if n is not None:
            return (t / n,) * n
        p = self.partition or {"n": 16}
        if "times" in p:
            return tuple(float(x) for x in p["times"])
        return (t / p["n"],) * int(p["n"])

    def with_overrides(self, **kw) -> "ExperimentConfig":
        clean = {k: v for k, v in kw.items() if v is not None}
        cfg = replace(self, **clean)
        return validate(cfg)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "model": self.model,
            "N": self.N,
            "t": self.t,
            "partition": self.partition,
            "kernel": {
                "include_ricci_scalar": self.kernel.include_ricci_scalar,
                "include_linear_curvature": self.kernel.include_linear_curvature,
                "include_quadratic_rho": self.kernel.include_quadratic_rho,
                "gaussian_cutoff": self.kernel.gaussian_cutoff,
            },
            "seed": self.seed,
            "format": self.format,
            "workers": self.workers,
            "storage": self.storage,
            "grid_kind": self.grid_kind,
        }
        for k in ("d_seq", "t_seq", "n_seq", "N_seq"):
            v = getattr(self, k)
            if v is not None:
                d[k] = list(v)
        if self.tolerances:
            d["tolerances"] = self.tolerances
        return d


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _seq(name, value, cast):
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(name, "expected a non-empty list")
    try:
        return tuple(cast(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def _positive(name, v, cast=float):
    try:
        v = cast(v)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a number, got {v!r}") from None
    if not v > 0 or (cast is float and not math.isfinite(v)):
        raise ConfigError(name, "must be positive")
    return v


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.kind not in KINDS:
        raise ConfigError("kind", f"unknown experiment kind {cfg.kind!r}; expected one of {', '.join(KINDS)}")
    m = dict(cfg.model)
    name = m.get("name")
    if name not in _MODEL_KEYS:
        raise ConfigError("model.name", f"unknown model {name!r}")
    extra = set(m) - _MODEL_KEYS[name]
    if extra:
        raise ConfigError(f"model.{sorted(extra)[0]}", "unknown key")
    if name == "sphere":
        m["radius"] = _positive("model.radius", m.get("radius", 1.0))
    elif name == "torus":
        sides = m.get("sides", [2 * math.pi, 2 * math.pi])
        if not isinstance(sides, (list, tuple)) or len(sides) % 2:
            raise ConfigError("model.sides", "expected an even number of side lengths")
        m["sides"] = [_positive("model.sides", s) for s in sides]
    else:
        if ("metric" in m) == ("table" in m):
            raise ConfigError("model.metric", "give exactly one of 'metric' or 'table'")
        if "periods" not in m and "domain" not in m:
            raise ConfigError("model.periods", "chart metrics need 'periods' or 'domain'")
        m["injectivity_radius"] = _positive("model.injectivity_radius", m.get("injectivity_radius", 0.5))
    cfg.model = m
    if cfg.N is not None:
        cfg.N = _positive("N", cfg.N, int)
        if cfg.N < 8:
            raise ConfigError("N", "resolution must be at least 8")
    if cfg.t is not None:
        cfg.t = _positive("t", cfg.t)
    if cfg.partition is not None:
        p = cfg.partition
        if not isinstance(p, dict) or set(p) - {"n", "times"} or len(p) != 1:
            raise ConfigError("partition", "expected {'n': int} or {'times': [...]}")
        if "n" in p:
            p = {"n": _positive("partition.n", p["n"], int)}
        else:
            p = {"times": [_positive("partition.times", x) for x in _seq("partition.times", p["times"], float)]}
        cfg.partition = p
    if cfg.format not in ("csv", "json"):
        raise ConfigError("format", "expected 'csv' or 'json'")
    cfg.workers = _positive("workers", cfg.workers, int)
    if cfg.storage not in ("auto", "sparse", "circulant"):
        raise ConfigError("storage", "expected auto, sparse or circulant")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed", "expected an integer")
    cfg.d_seq = _seq("d_seq", cfg.d_seq, float)
    cfg.t_seq = _seq("t_seq", cfg.t_seq, float)
    cfg.n_seq = _seq("n_seq", cfg.n_seq, int)
    cfg.N_seq = _seq("N_seq", cfg.N_seq, int)
    for name_, seq in (("d_seq", cfg.d_seq), ("t_seq", cfg.t_seq), ("n_seq", cfg.n_seq), ("N_seq", cfg.N_seq)):
        if seq is not None and any(not s > 0 for s in seq):
            raise ConfigError(name_, "entries must be positive")
    if not isinstance(cfg.tolerances, dict) or any(not isinstance(v, (int, float)) for v in cfg.tolerances.values()):
        raise ConfigError("tolerances", "expected a mapping of names to numbers")
    return cfg


def parse_config(data: dict, text: str | None = None) -> ExperimentConfig:
    """Validate a decoded JSON mapping; ``text`` (the raw file) improves diagnostics."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(key, "unknown key", _line_of(text, key))
    if "kind" not in data:
        raise ConfigError("kind", "missing")
    kern = data.get("kernel", {}) or {}
    if not isinstance(kern, dict):
        raise ConfigError("kernel", "expected an object")
    bad = set(kern) - _KERNEL_KEYS
    if bad:
        key = sorted(bad)[0]
        raise ConfigError(f"kernel.{key}", "unknown key", _line_of(text, key))
    try:
        opts = KernelOptions(**kern)
    except (TypeError, ValueError) as exc:
        raise ConfigError("kernel", str(exc), _line_of(text, "kernel")) from None
    kw = {k: v for k, v in data.items() if k != "kernel"}
    try:
        cfg = ExperimentConfig(kernel=opts, **kw)
        return validate(cfg)
    except ConfigError as exc:
        if exc.line is None and text:
            raise ConfigError(exc.field, str(exc).split(": ", 1)[-1], _line_of(text, exc.field.split(".")[-1])) from None
        raise


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", exc.msg, exc.lineno) from None
    return parse_config(data, text)


# ---------------------------------------------------------------------------


def _stack(funcs, coords, shape):
    """Evaluate scalar callables f(*coords) and reshape into trailing ``shape``."""
    coords = np.asarray(coords, dtype=float)
    cols = [coords[..., k] for k in range(coords.shape[-1])]
    vals = [np.broadcast_to(np.asarray(f(*cols), dtype=float), coords.shape[:-1]) for f in funcs]
    return np.stack(vals, axis=-1).reshape(coords.shape[:-1] + shape)


def _expression_metric(entries, dim):
    """Metric and its exact first derivatives from sympy expressions in x0, x1, ..."""
    import sympy

    syms = sympy.symbols([f"x{i}" for i in range(dim)])
    if len(entries) != dim or any(len(row) != dim for row in entries):
        raise ConfigError("model.metric", f"expected a {dim}x{dim} matrix of expressions")
    exprs = []
    for i, row in enumerate(entries):
        for j, expr in enumerate(row):
            try:
                e = sympy.sympify(expr)
            except (sympy.SympifyError, TypeError) as exc:
                raise ConfigError(f"model.metric[{i}][{j}]", f"cannot parse {expr!r}: {exc}") from None
            if e.free_symbols - set(syms):
                raise ConfigError(f"model.metric[{i}][{j}]", f"unknown symbols {sorted(map(str, e.free_symbols - set(syms)))}")
            exprs.append(e)
    funcs = [sympy.lambdify(syms, e, "numpy") for e in exprs]
    dfuncs = [sympy.lambdify(syms, sympy.diff(e, x), "numpy") for x in syms for e in exprs]

    def metric_fn(coords):
        g = _stack(funcs, coords, (dim, dim))
        return 0.5 * (g + np.swapaxes(g, -1, -2))

    def derivative_fn(coords):
        return _stack(dfuncs, coords, (dim, dim, dim))

    return metric_fn, derivative_fn


def _table_metric(path):
    """Quintic spline interpolation of a tabulated metric (npz with x0, x1, g)."""
    from scipy.interpolate import RectBivariateSpline

    with np.load(path) as f:
        x0, x1, g = f["x0"], f["x1"], f["g"]
    if g.shape != (len(x0), len(x1), 2, 2):
        raise ConfigError("model.table", "g must have shape (len(x0), len(x1), 2, 2)")
    splines = [[RectBivariateSpline(x0, x1, g[:, :, i, j], kx=5, ky=5) for j in range(2)] for i in range(2)]

    def evaluate(coords, dx=0, dy=0):
        coords = np.asarray(coords, dtype=float)
        a, b = coords[..., 0].ravel(), coords[..., 1].ravel()
        out = np.zeros((len(a), 2, 2))
        for i in range(2):
            for j in range(2):
                out[:, i, j] = splines[i][j].ev(a, b, dx=dx, dy=dy)
        out = 0.5 * (out + np.swapaxes(out, 1, 2))
        return out.reshape(coords.shape[:-1] + (2, 2))

    def derivative_fn(coords):
        return np.stack([evaluate(coords, 1, 0), evaluate(coords, 0, 1)], axis=-3)

    return evaluate, derivative_fn


def build_model(spec: dict) -> ManifoldModel:
    name = spec["name"]
    if name == "sphere":
        return RoundSphere(spec.get("radius", 1.0))
    if name == "torus":
        return FlatTorus(tuple(spec.get("sides", (2 * math.pi, 2 * math.pi))))
    dim = 2
    if "metric" in spec:
        fn, dfn = _expression_metric(spec["metric"], dim)
    else:
        fn, dfn = _table_metric(spec["table"])
    periods = spec.get("periods")
    domain = spec.get("domain")
    scale = float(np.max(periods)) if periods is not None else float(np.max(np.ptp(np.asarray(domain, float), axis=0)))
    return ChartMetric(
        fn,
        dim=dim,
        periods=tuple(periods) if periods is not None else None,
        domain=tuple(map(tuple, domain)) if domain is not None else None,
        injectivity_radius=spec.get("injectivity_radius", 0.5),
        chart_scale=scale,
        volume_hint=spec.get("volume"),
        metric_derivative_fn=dfn,
    )
