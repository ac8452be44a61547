#!/usr/bin/env python3
"""A short walk through the Grassmann engine with exact rational arithmetic."""

import numpy as np
import sympy

from mqheat.grassmann import (
    GeneratorSet,
    GrassmannElement,
    berezin,
    exp_pairing,
    exterior_power,
    grassmann_exp,
    to_fiber_operator,
)


def main():
    gens = GeneratorSet([("rho", 2), ("psi_x", 2), ("psi_y", 2)])
    P = np.array([[sympy.Rational(1, 2), -2], [3, sympy.Rational(5, 7)]], dtype=object)
    minus_id = -np.eye(2, dtype=int).astype(object)

    # exp(i <rho, P psi_x - psi_y>), integrated over rho, acts as pull-back by P
    expr = grassmann_exp(exp_pairing(gens, "rho", [("psi_x", P), ("psi_y", minus_id)], dtype=object))
    op = to_fiber_operator(expr).matrix
    print("fiber operator on the basis 1, psi1, psi2, psi1psi2:")
    sympy.pprint(sympy.Matrix(op))
    print("exterior power of P^T:")
    sympy.pprint(sympy.Matrix(exterior_power(P.T)))

    # Berezin integration keeps only the top rho monomial
    g2 = GeneratorSet([("rho", 2), ("psi", 2)])
    rho1 = GrassmannElement.generator(g2, "rho", 0, dtype=object)
    rho2 = GrassmannElement.generator(g2, "rho", 1, dtype=object)
    print("\nberezin(rho1 rho2) =", berezin("rho", rho1 * rho2).coeffs[0])
    print("berezin(rho2 rho1) =", berezin("rho", rho2 * rho1).coeffs[0])


if __name__ == "__main__":
    main()
