"""Short-time path-integral approximations to the heat semigroup on differential forms.

The package builds the finite-dimensional kernel ``MQ(x, y; t)`` from local
geometry, composes it along a time partition, and checks the result against
exact heat kernels and the Euler characteristic.
"""

__version__ = "0.1.0"

from .geometry import ChartMetric, ChartPoint, FlatTorus, RoundSphere  # noqa: E402
from .kernel import KernelOptions, build_mq_kernel  # noqa: E402
from .evolution import FormField, Partition, build_grid, compose_partition, evolve  # noqa: E402
from .supertrace import loop_trace  # noqa: E402

__all__ = [
    "ChartMetric",
    "ChartPoint",
    "FlatTorus",
    "RoundSphere",
    "KernelOptions",
    "build_mq_kernel",
    "FormField",
    "Partition",
    "build_grid",
    "compose_partition",
    "evolve",
    "loop_trace",
]
