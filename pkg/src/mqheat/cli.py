"""``mqheat run <kind>``: run one experiment and write CSV or JSON results."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import KINDS, ConfigError, ExperimentConfig, load_config, validate
from .kernel import KernelOptions

SCHEMA = "mqheat-results v1"


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqheat", description="Path-integral heat kernels on differential forms.")
    p.add_argument("--version", action="version", version=f"mqheat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("kind", choices=KINDS)
    r.add_argument("--config", help="JSON experiment file; flags override its values")
    r.add_argument("--model", choices=("sphere", "torus"), help="built-in model")
    r.add_argument("--radius", type=float, help="sphere radius")
    r.add_argument("--sides", type=_floats, help="torus side lengths, comma separated")
    r.add_argument("--N", type=int, help="grid resolution")
    r.add_argument("--t", type=float, help="total time")
    r.add_argument("--n", type=int, help="number of equal partition steps")
    r.add_argument("--partition", type=_floats, help="explicit partition step lengths, comma separated")
    r.add_argument("--d-seq", type=_floats, dest="d_seq")
    r.add_argument("--t-seq", type=_floats, dest="t_seq")
    r.add_argument("--n-seq", type=_ints, dest="n_seq")
    r.add_argument("--N-seq", type=_ints, dest="N_seq")
    r.add_argument("--no-ricci-scalar", action="store_true")
    r.add_argument("--no-linear-curvature", action="store_true")
    r.add_argument("--no-quadratic-rho", action="store_true")
    r.add_argument("--cutoff", type=float, help="Gaussian support cutoff in units of sqrt(t)")
    r.add_argument("--storage", choices=("auto", "sparse", "circulant"))
    r.add_argument("--grid", choices=("auto", "gauss", "icosahedral"), dest="grid_kind")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--format", choices=("csv", "json"))
    r.add_argument("--out", help="output file (default stdout)")
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate(ExperimentConfig(kind=args.kind))
    if args.config and cfg.kind != args.kind:
        raise ConfigError("kind", f"config file declares {cfg.kind!r} but {args.kind!r} was requested")
    model = dict(cfg.model)
    if args.model and args.model != model.get("name"):
        model = {"name": args.model}
    if args.radius is not None:
        if model["name"] != "sphere":
            raise ConfigError("radius", "only applies to the sphere")
        model["radius"] = args.radius
    if args.sides is not None:
        if model["name"] != "torus":
            raise ConfigError("sides", "only applies to the torus")
        model["sides"] = args.sides
    kern = cfg.kernel
    kw = dict(kern.__dict__)
    if args.no_ricci_scalar:
        kw["include_ricci_scalar"] = False
    if args.no_linear_curvature:
        kw["include_linear_curvature"] = False
    if args.no_quadratic_rho:
        kw["include_quadratic_rho"] = False
    if args.cutoff is not None:
        kw["gaussian_cutoff"] = args.cutoff
    try:
        kern = KernelOptions(**kw)
    except ValueError as exc:
        raise ConfigError("cutoff", str(exc)) from None
    partition = None
    if args.n is not None and args.partition is not None:
        raise ConfigError("partition", "give --n or --partition, not both")
    if args.n is not None:
        partition = {"n": args.n}
    elif args.partition is not None:
        partition = {"times": args.partition}
        if args.t is not None and not math.isclose(sum(args.partition), args.t, rel_tol=1e-9):
            raise ConfigError("partition", "step lengths must sum to --t")
    return cfg.with_overrides(
        model=model,
        kernel=kern,
        N=args.N,
        t=args.t if args.t is not None else (sum(args.partition) if args.partition else None),
        partition=partition,
        d_seq=args.d_seq,
        t_seq=args.t_seq,
        n_seq=args.n_seq,
        N_seq=args.N_seq,
        storage=args.storage,
        grid_kind=args.grid_kind,
        seed=args.seed,
        workers=args.workers,
        format=args.format,
        out=args.out,
    )


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def render_csv(result) -> str:
    buf = io.StringIO()
    buf.write(f"# {SCHEMA} kind={result.kind} passed={str(result.passed).lower()}\n")
    for c in result.checks:
        d = c.as_dict()
        buf.write(f"# check {'PASS' if d['passed'] else 'FAIL'} {d['name']}: {d['value']} {d['relation']} {d['tolerance']}\n")
    for w in result.warnings:
        buf.write(f"# warning {w}\n")
    cols = []
    for row in result.rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for row in result.rows:
        wr.writerow([_cell(row.get(k)) for k in cols])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def render_json(result) -> str:
    doc = {"schema": SCHEMA, "summary": result.summary(), "rows": result.rows}
    return json.dumps(_jsonable(doc), indent=2)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"mqheat: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mqheat: cannot read config: {exc}", file=sys.stderr)
        return 2
    from .experiments import run_experiment

    result = run_experiment(cfg)
    text = render_json(result) if cfg.format == "json" else render_csv(result)
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
        if cfg.format == "csv":
            summary = Path(cfg.out).with_suffix(".summary.json")
            summary.write_text(render_json(result) + "\n")
    else:
        sys.stdout.write(text)
    for c in result.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"[{status}] {c.name}", file=sys.stderr)
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
