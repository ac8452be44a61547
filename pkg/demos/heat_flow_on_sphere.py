#!/usr/bin/env python3
"""Evolve a mixture of spherical harmonics and compare against the spectral answer.

Each degree-l harmonic should decay by exp(-l(l+1) t / 2).  Doubling the number
of steps roughly halves the error.
"""

import numpy as np

from mqheat.evolution import FormField, Partition, build_grid, evolve
from mqheat.geometry import RoundSphere
from mqheat.oracles import loglog_slope, sphere_function_form


def main():
    sphere = RoundSphere(1.0)
    grid = build_grid(sphere, 48)
    t = 0.5
    parts = [
        sphere_function_form(sphere, 1, (0, 0, 1)),
        sphere_function_form(sphere, 2, (1, 0, 0)).scaled(0.5),
        sphere_function_form(sphere, 3, (0.6, 0.8, 0)).scaled(0.3),
    ]
    start = FormField(grid, sum(p.frame_values(grid.batch) for p in parts))
    exact = sum(p.evolved_exactly(t).frame_values(grid.batch) for p in parts)[:, 0]

    ns, errs = (4, 8, 16, 32), []
    for n in ns:
        out = evolve(sphere, grid, Partition.uniform(t, n), start)
        errs.append(np.abs(out.values[:, 0] - exact).max())
        print(f"n = {n:>2}: sup error {errs[-1]:.3e}")
    print(f"fitted order in 1/n: {loglog_slope([1 / n for n in ns], errs):.3f}")


if __name__ == "__main__":
    main()
