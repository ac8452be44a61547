from fractions import Fraction
from itertools import product

import numpy as np
import pytest
import sympy

from mqheat.grassmann import (
    FiberOperator,
    GeneratorSet,
    GrassmannElement,
    berezin,
    contract,
    creation_matrices,
    exp_pairing,
    exterior_power,
    exterior_power_batch,
    grassmann_exp,
    popcount,
    supertrace_fiber,
    to_fiber_operator,
    wedge,
)


def rational_matrix(rng, d):
    return np.array([[sympy.Rational(int(rng.integers(-9, 10)), int(rng.integers(1, 7))) for _ in range(d)] for _ in range(d)], dtype=object)


def substitute(gens, family_src, J, P, family_dst, dtype=object):
    """The monomial psi_src^J with each psi_src^k replaced by sum_m P[k, m] psi_dst^m."""
    out = GrassmannElement.scalar(gens, 1, dtype=dtype)
    for k in range(P.shape[0]):
        if J >> k & 1:
            out = out * GrassmannElement.linear(gens, family_dst, P[k], dtype=dtype)
    return out


def psi_monomial(gens, family, J, dtype=object):
    out = GrassmannElement.scalar(gens, 1, dtype=dtype)
    for k in range(gens.count(family)):
        if J >> k & 1:
            out = out * GrassmannElement.generator(gens, family, k, dtype=dtype)
    return out


@pytest.fixture
def three_families():
    return GeneratorSet([("rho", 2), ("psi_x", 2), ("psi_y", 2)])


def test_generators_anticommute_and_square_to_zero():
    gens = GeneratorSet([("psi", 3)])
    a = GrassmannElement.generator(gens, "psi", 0)
    b = GrassmannElement.generator(gens, "psi", 2)
    assert a * b == -(b * a)
    assert a * a == GrassmannElement(gens)
    assert (a * b).degree() == 2


def test_wedge_is_associative_on_random_elements():
    gens = GeneratorSet([("a", 2), ("b", 3)])
    rng = np.random.default_rng(0)
    x, y, z = (GrassmannElement(gens, rng.normal(size=gens.size)) for _ in range(3))
    left = wedge(wedge(x, y), z)
    right = wedge(x, wedge(y, z))
    assert np.allclose(left.coeffs, right.coeffs, atol=1e-12)


def test_contraction_is_a_graded_derivation():
    gens = GeneratorSet([("psi", 4)])
    rng = np.random.default_rng(1)
    # homogeneous odd element a and arbitrary b: d(ab) = (da) b - a (db)
    a = GrassmannElement.linear(gens, "psi", rng.normal(size=4))
    b = GrassmannElement(gens, rng.normal(size=gens.size))
    for k in range(4):
        lhs = contract(k, a * b)
        rhs = contract(k, a) * b - a * contract(k, b)
        assert np.allclose(lhs.coeffs, rhs.coeffs, atol=1e-12)


def test_exp_of_commuting_even_elements_multiplies():
    gens = GeneratorSet([("psi", 4)])
    p = [GrassmannElement.generator(gens, "psi", k) for k in range(4)]
    a = 0.3 * (p[0] * p[1])
    b = -1.7 * (p[2] * p[3]) + 0.5
    assert np.allclose(grassmann_exp(a + b).coeffs, (grassmann_exp(a) * grassmann_exp(b)).coeffs)
    # exp(c psi0 psi1) = 1 + c psi0 psi1 exactly
    assert np.allclose(grassmann_exp(a).coeffs, (1 + a).coeffs)


def test_exp_keeps_rational_coefficients_exact(three_families):
    P = np.array([[sympy.Rational(1, 2), -2], [3, sympy.Rational(5, 7)]], dtype=object)
    minus_id = -np.eye(2, dtype=int).astype(object)
    expr = grassmann_exp(exp_pairing(three_families, "rho", [("psi_x", P), ("psi_y", minus_id)], dtype=object))
    assert not any(sympy.sympify(c).atoms(sympy.Float) for c in expr.coeffs)
    op = to_fiber_operator(expr).matrix
    assert op[3, 3] == sympy.Rational(89, 14)


def test_exp_rejects_odd_argument():
    gens = GeneratorSet([("psi", 2)])
    with pytest.raises(ValueError):
        grassmann_exp(GrassmannElement.generator(gens, "psi", 0))


def test_berezin_strips_the_leading_top_monomial():
    gens = GeneratorSet([("rho", 2), ("psi", 2)])
    r0, r1 = (GrassmannElement.generator(gens, "rho", k) for k in range(2))
    f = GrassmannElement.generator(gens, "psi", 1)
    assert berezin("rho", r0 * r1 * f) == f
    assert berezin("rho", r1 * r0 * f) == -f
    assert berezin("rho", r0 * f) == GrassmannElement(gens)


@pytest.mark.parametrize("m", [1, 2])
def test_worked_example_exp_pairing_picks_out_degree_zero(m):
    """int exp(i <rho, psi>) g(psi) drho = g(0) psi^1 ... psi^2m, exactly."""
    d = 2 * m
    gens = GeneratorSet([("rho", d), ("psi", d)])
    rng = np.random.default_rng(m)
    g = GrassmannElement(gens, dtype=object)
    for J in range(1 << d):
        g = g + sympy.Rational(int(rng.integers(-20, 21)), 3) * psi_monomial(gens, "psi", J)
    pairing = exp_pairing(gens, "rho", [("psi", np.eye(d, dtype=int))], dtype=object)
    result = berezin("rho", grassmann_exp(pairing) * g)
    expected = g.coeffs[0] * psi_monomial(gens, "psi", (1 << d) - 1)
    diff = result - expected
    assert all(sympy.simplify(c) == 0 for c in diff.coeffs)


def test_transport_identity_is_exact_for_random_rational_maps(three_families):
    """int int exp(i<rho, P psi_x - psi_y>) alpha(psi_y) = alpha(P psi_x) for every basis alpha."""
    gens = three_families
    rng = np.random.default_rng(7)
    minus_id = -np.eye(2, dtype=int).astype(object)
    for _ in range(20):
        P = rational_matrix(rng, 2)
        expr = grassmann_exp(exp_pairing(gens, "rho", [("psi_x", P), ("psi_y", minus_id)], dtype=object))
        op = to_fiber_operator(expr)
        for J in range(4):
            want = substitute(gens, "psi", J, P, "psi_x")
            col = [want.coeffs[I << gens.offset("psi_x")] for I in range(4)]
            assert all(sympy.simplify(op.matrix[I, J] - col[I]) == 0 for I in range(4))
        assert all(sympy.simplify(a - b) == 0 for a, b in zip(op.matrix.ravel(), exterior_power(P.T).ravel()))


def test_contraction_identity_is_exact(three_families):
    """int int rho_mu exp(...) alpha = i (d alpha / d psi^mu)(P psi_x)."""
    gens = three_families
    rng = np.random.default_rng(11)
    minus_id = -np.eye(2, dtype=int).astype(object)
    _, I_mat = creation_matrices(2)
    for _ in range(20):
        P = rational_matrix(rng, 2)
        expr = grassmann_exp(exp_pairing(gens, "rho", [("psi_x", P), ("psi_y", minus_id)], dtype=object))
        base = exterior_power(P.T)
        for mu in range(2):
            rho_mu = GrassmannElement.generator(gens, "rho", mu, dtype=object)
            op = to_fiber_operator(rho_mu * expr)
            want = sympy.I * base.dot(I_mat[mu].astype(int).astype(object))
            assert all(sympy.simplify(a - b) == 0 for a, b in zip(op.matrix.ravel(), want.ravel()))


def test_exterior_power_is_multiplicative_and_batched():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(2, 3, 3))
    assert np.allclose(exterior_power(A @ B), exterior_power(A) @ exterior_power(B))
    batch = rng.normal(size=(5, 2, 2))
    assert np.allclose(exterior_power_batch(batch), np.stack([exterior_power(p) for p in batch]))


def test_exterior_power_exact_with_fractions():
    P = np.array([[Fraction(1, 2), Fraction(3)], [Fraction(-1, 3), Fraction(2, 5)]], dtype=object)
    L = exterior_power(P)
    assert L[3, 3] == Fraction(1, 2) * Fraction(2, 5) + Fraction(3) * Fraction(1, 3)


def test_supertrace_of_exterior_power_is_det_of_one_minus():
    rng = np.random.default_rng(3)
    for d in (2, 4):
        P = rng.normal(size=(d, d))
        st = supertrace_fiber(FiberOperator(exterior_power(P)))
        assert st == pytest.approx(np.linalg.det(np.eye(d) - P), abs=1e-12)


def test_supertrace_rejects_mismatched_frames():
    op = FiberOperator(np.eye(4), source_frame="a", target_frame="b")
    with pytest.raises(ValueError):
        supertrace_fiber(op)


def test_creation_matrices_match_element_operations_and_anticommute():
    d = 3
    E, I = creation_matrices(d)
    gens = GeneratorSet([("psi", d)])
    rng = np.random.default_rng(4)
    a = GrassmannElement(gens, rng.normal(size=gens.size))
    for k in range(d):
        gk = GrassmannElement.generator(gens, "psi", k)
        assert np.allclose(E[k] @ a.coeffs, (gk * a).coeffs)
        assert np.allclose(I[k] @ a.coeffs, contract(k, a).coeffs)
    for k, l in product(range(d), repeat=2):
        anti = E[k] @ I[l] + I[l] @ E[k]
        assert np.allclose(anti, np.eye(1 << d) * (k == l))


def test_popcount_and_generator_layout():
    assert list(popcount(np.arange(8))) == [0, 1, 1, 2, 1, 2, 2, 3]
    gens = GeneratorSet([("rho", 2), ("psi_x", 2), ("psi_y", 2)])
    assert gens.n == 6 and gens.size == 64
    assert gens.index("psi_y", 1) == 5
    assert gens.family_mask("psi_x") == 0b001100
