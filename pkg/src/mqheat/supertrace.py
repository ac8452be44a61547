"""Loop supertrace of the composed kernel and the Euler characteristic."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .evolution import KernelField, Partition, QuadratureGrid, compose_partition
from .geometry import FlatTorus, ManifoldModel, RoundSphere
from .grassmann import popcount
from .kernel import KernelOptions

__all__ = [
    "LoopTraceReport",
    "EulerDensityReport",
    "supertrace_field",
    "loop_trace",
    "euler_characteristic",
    "euler_form_density",
]


def _signs(D):
    return np.where(popcount(np.arange(D)) % 2 == 0, 1.0, -1.0)


def supertrace_field(k: KernelField) -> tuple[np.ndarray, float]:
    """Per-point fiber supertrace of the diagonal blocks and its integral."""
    diag = k.diagonal_blocks()
    dens = np.einsum("bii,i->b", diag, _signs(diag.shape[-1]))
    return dens, float(k.grid.weights @ dens)


@dataclass
class LoopTraceReport:
    t: float
    n: int
    N: int
    str_density: np.ndarray
    integral: float
    target_chi: int

    @property
    def error(self) -> float:
        return abs(self.integral - self.target_chi)

    def summary(self) -> dict:
        d = asdict(self)
        dens = d.pop("str_density")
        d.update(
            density_min=float(np.min(dens)),
            density_max=float(np.max(dens)),
            error=self.error,
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [repr(self.t), self.n, self.N, repr(self.integral), self.target_chi]
        )
        return buf.getvalue()


def euler_characteristic(model: ManifoldModel) -> int:
    """Known Euler characteristic of the built-in models."""
    if isinstance(model, FlatTorus):
        return 0
    if isinstance(model, RoundSphere):
        return 2 if model.dim % 2 == 0 else 0
    raise ValueError("Euler characteristic is only known for built-in models")


def loop_trace(
    model: ManifoldModel,
    grid: QuadratureGrid,
    t: float,
    n: int,
    opts: KernelOptions | None = None,
    storage: str = "auto",
    workers: int = 1,
    resolution: int | None = None,
) -> LoopTraceReport:
    """Supertrace integral of MQ(t/n)^n over the grid."""
    k = compose_partition(model, grid, Partition.uniform(t, n), opts, storage, workers)
    dens, total = supertrace_field(k)
    try:
        chi = euler_characteristic(model)
    except ValueError:
        chi = int(round(total))
    if resolution is not None:
        N = resolution
    elif grid.rings is not None:
        N = grid.rings.rings
    else:
        N = int(round(math.sqrt(len(grid))))
    return LoopTraceReport(float(t), int(n), N, dens, total, chi)


@dataclass
class EulerDensityReport:
    density: np.ndarray
    gauss_bonnet: np.ndarray
    max_error: float
    integral: float
    raw: dict


def euler_form_density(
    model: ManifoldModel,
    grid: QuadratureGrid,
    t: float,
    ns=(8, 16),
    opts: KernelOptions | None = None,
    storage: str = "auto",
) -> EulerDensityReport:
    """Supertrace density extrapolated to n -> infinity, against K / (2 pi).

    The density error of MQ(t/n)^n is first order in 1/n, so two partitions
    n and 2n are combined by Richardson extrapolation.
    """
    if model.dim != 2:
        raise ValueError("the Gauss-Bonnet comparison is implemented for surfaces")
    ns = tuple(sorted(ns))
    raw = {}
    for n in ns:
        k = compose_partition(model, grid, Partition.uniform(t, n), opts, storage)
        raw[n] = supertrace_field(k)[0]
    if len(ns) >= 2:
        a, b = ns[-2], ns[-1]
        dens = (b * raw[b] - a * raw[a]) / (b - a)
    else:
        dens = raw[ns[0]]
    # Gauss curvature at the grid points from the frame curvature tensor
    Rf = model.curvature_frame(grid.batch)
    K = -Rf[:, 0, 1, 0, 1]
    gb = K / (2 * math.pi)
    return EulerDensityReport(dens, gb, float(np.max(np.abs(dens - gb))), float(grid.weights @ dens), raw)
