"""Finite exterior (Grassmann) algebra with named generator families.

Elements are stored densely: one coefficient per subset of generators,
indexed by bitmask, for the monomial written in ascending generator order.
The coefficient dtype is whatever the caller supplies (complex by default);
object arrays holding exact numbers (``fractions``/``sympy``) work through
the same code paths, which is how the exact Berezin identities are checked.

Berezin integration follows the left convention: the top monomial of the
family is brought to the far left in ascending order and stripped, so that
``berezin(rho, rho_1 rho_2 ... rho_k * f) = f``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Sequence

import numpy as np
import sympy

__all__ = [
    "GeneratorSet",
    "GrassmannElement",
    "FiberOperator",
    "wedge",
    "contract",
    "grassmann_exp",
    "berezin",
    "to_fiber_operator",
    "supertrace_fiber",
    "exterior_power",
    "exterior_power_batch",
    "creation_matrices",
    "exp_pairing",
    "degree_slices",
    "popcount",
]

MAX_GENERATORS = 16


def popcount(masks):
    """Number of set bits, elementwise."""
    return np.bitwise_count(np.asarray(masks, dtype=np.int64)).astype(np.int64)


@dataclass(frozen=True)
class GeneratorSet:
    """Ordered generator families, e.g. ``[("rho", 2), ("psi_x", 2), ("psi_y", 2)]``."""

    families: tuple[tuple[str, int], ...]

    def __init__(self, families: Sequence[tuple[str, int]]):
        fam = tuple((str(name), int(count)) for name, count in families)
        names = [name for name, _ in fam]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate family names in {names}")
        if any(count < 0 for _, count in fam):
            raise ValueError("family sizes must be nonnegative")
        if sum(count for _, count in fam) > MAX_GENERATORS:
            raise ValueError(f"at most {MAX_GENERATORS} generators supported")
        object.__setattr__(self, "families", fam)

    @property
    def n(self) -> int:
        return sum(count for _, count in self.families)

    @property
    def size(self) -> int:
        return 1 << self.n

    def offset(self, family: str) -> int:
        off = 0
        for name, count in self.families:
            if name == family:
                return off
            off += count
        raise KeyError(f"unknown generator family {family!r}")

    def count(self, family: str) -> int:
        for name, count in self.families:
            if name == family:
                return count
        raise KeyError(f"unknown generator family {family!r}")

    def index(self, family: str, k: int) -> int:
        """Global generator index of the k-th (0-based) generator of ``family``."""
        if not 0 <= k < self.count(family):
            raise IndexError(f"generator {k} out of range for family {family!r}")
        return self.offset(family) + k

    def family_mask(self, family: str) -> int:
        return ((1 << self.count(family)) - 1) << self.offset(family)


def _row_signs(a: int, n: int) -> np.ndarray:
    """Koszul sign of ``mono(a) * mono(b)`` for every b (0 where they overlap)."""
    bs = np.arange(1 << n, dtype=np.int64)
    swaps = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        if a >> i & 1:
            swaps += popcount(bs & ((1 << i) - 1))
    signs = np.where(swaps % 2 == 0, 1, -1).astype(np.int64)
    signs[(bs & a) != 0] = 0
    return signs


@lru_cache(maxsize=None)
def _sign_table(n: int) -> np.ndarray:
    table = np.stack([_row_signs(a, n) for a in range(1 << n)])
    table.setflags(write=False)
    return table


def _signs_for(a: int, n: int) -> np.ndarray:
    if n <= 10:
        return _sign_table(n)[a]
    return _row_signs(a, n)


class GrassmannElement:
    """Element of the exterior algebra generated by a :class:`GeneratorSet`."""

    __slots__ = ("gens", "coeffs")

    def __init__(self, gens: GeneratorSet, coeffs=None, dtype=complex):
        self.gens = gens
        if coeffs is None:
            coeffs = np.zeros(gens.size, dtype=dtype)
        coeffs = np.asarray(coeffs)
        if coeffs.shape != (gens.size,):
            raise ValueError(f"expected {gens.size} coefficients, got shape {coeffs.shape}")
        self.coeffs = coeffs

    # constructors ---------------------------------------------------------

    @classmethod
    def scalar(cls, gens: GeneratorSet, value=1, dtype=complex) -> "GrassmannElement":
        out = cls(gens, dtype=dtype)
        out.coeffs[0] = value
        return out

    @classmethod
    def generator(cls, gens: GeneratorSet, family: str, k: int, coeff=1, dtype=complex):
        out = cls(gens, dtype=dtype)
        out.coeffs[1 << gens.index(family, k)] = coeff
        return out

    @classmethod
    def monomial(cls, gens: GeneratorSet, family: str, ks: Sequence[int], coeff=1, dtype=complex):
        """Product of family generators in the given order (sign included)."""
        out = cls.scalar(gens, coeff, dtype=dtype)
        for k in ks:
            out = out * cls.generator(gens, family, k, dtype=dtype)
        return out

    @classmethod
    def linear(cls, gens: GeneratorSet, family: str, vec, dtype=complex):
        """The odd element ``sum_k vec[k] * gen_k`` of one family."""
        out = cls(gens, dtype=dtype)
        for k, value in enumerate(vec):
            out.coeffs[1 << gens.index(family, k)] = value
        return out

    # arithmetic -----------------------------------------------------------

    def _check(self, other: "GrassmannElement") -> None:
        if self.gens != other.gens:
            raise ValueError("Grassmann elements have different generator sets")

    def __add__(self, other):
        if isinstance(other, GrassmannElement):
            self._check(other)
            return GrassmannElement(self.gens, self.coeffs + other.coeffs)
        out = GrassmannElement(self.gens, self.coeffs.copy())
        out.coeffs[0] = out.coeffs[0] + other
        return out

    __radd__ = __add__

    def __neg__(self):
        return GrassmannElement(self.gens, -self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, GrassmannElement):
            return wedge(self, other)
        return GrassmannElement(self.gens, self.coeffs * other)

    def __rmul__(self, other):
        return GrassmannElement(self.gens, other * self.coeffs)

    def __truediv__(self, other):
        return GrassmannElement(self.gens, self.coeffs / other)

    def __eq__(self, other):
        if not isinstance(other, GrassmannElement):
            return NotImplemented
        return self.gens == other.gens and bool(np.all(self.coeffs == other.coeffs))

    __hash__ = None

    def __repr__(self):
        terms = [f"{c}*{self._mono_name(int(m))}" for m, c in self.terms()]
        return "GrassmannElement(" + (" + ".join(terms) if terms else "0") + ")"

    def _mono_name(self, mask: int) -> str:
        if mask == 0:
            return "1"
        names = []
        for fam, count in self.gens.families:
            off = self.gens.offset(fam)
            names += [f"{fam}{k + 1}" for k in range(count) if mask >> (off + k) & 1]
        return "".join(names)

    # queries ----------------------------------------------------------------

    def terms(self):
        nz = np.flatnonzero(self.coeffs != 0)
        return [(int(m), self.coeffs[m]) for m in nz]

    def coefficient(self, mask: int):
        return self.coeffs[mask]

    @property
    def scalar_part(self):
        return self.coeffs[0]

    def is_even(self) -> bool:
        nz = np.flatnonzero(self.coeffs != 0)
        return bool(np.all(popcount(nz) % 2 == 0))

    def is_homogeneous(self) -> bool:
        nz = np.flatnonzero(self.coeffs != 0)
        return len(set(popcount(nz).tolist())) <= 1

    def degree(self) -> int:
        nz = np.flatnonzero(self.coeffs != 0)
        degs = set(popcount(nz).tolist())
        if len(degs) > 1:
            raise ValueError("element is not homogeneous")
        return degs.pop() if degs else 0


def wedge(a: GrassmannElement, b: GrassmannElement) -> GrassmannElement:
    """Exterior product with Koszul signs."""
    a._check(b)
    n = a.gens.n
    dtype = np.result_type(a.coeffs, b.coeffs)
    out = np.zeros(a.gens.size, dtype=dtype)
    bs = np.arange(a.gens.size, dtype=np.int64)
    b_nz = b.coeffs != 0
    for ma in np.flatnonzero(a.coeffs != 0):
        signs = _signs_for(int(ma), n)
        keep = (signs != 0) & b_nz
        if not keep.any():
            continue
        out[ma | bs[keep]] += a.coeffs[ma] * (signs[keep] * b.coeffs[keep])
    return GrassmannElement(a.gens, out)


def contract(index: int, a: GrassmannElement) -> GrassmannElement:
    """Left odd derivation d/d(gen_index)."""
    n = a.gens.n
    if not 0 <= index < n:
        raise IndexError(f"unknown generator index {index}")
    masks = np.arange(a.gens.size, dtype=np.int64)
    has = (masks >> index & 1).astype(bool)
    signs = np.where(popcount(masks & ((1 << index) - 1)) % 2 == 0, 1, -1)
    out = np.zeros_like(a.coeffs)
    src = masks[has]
    out[src ^ (1 << index)] = signs[has] * a.coeffs[src]
    return GrassmannElement(a.gens, out)


def grassmann_exp(a: GrassmannElement) -> GrassmannElement:
    """exp(a) for even a; the series terminates because a - a_0 is nilpotent."""
    if not a.is_even():
        raise ValueError("grassmann_exp needs an even (commuting) element")
    s = a.coeffs[0]
    nil = GrassmannElement(a.gens, a.coeffs.copy())
    nil.coeffs[0] = 0
    term = GrassmannElement.scalar(a.gens, 1, dtype=a.coeffs.dtype)
    total = GrassmannElement(a.gens, term.coeffs.copy())
    exact = a.coeffs.dtype == object
    for k in range(1, a.gens.n // 2 + 1):
        term = wedge(term, nil) / (sympy.Integer(k) if exact else k)
        if not np.any(term.coeffs != 0):
            break
        total = total + term
    if s != 0:
        total = total * (sympy.exp(s) if exact else np.exp(s))
    return total


def berezin(family: str, a: GrassmannElement) -> GrassmannElement:
    """Berezin integral over one family, result kept on the same generator set."""
    gens = a.gens
    fmask = gens.family_mask(family)
    k = gens.count(family)
    below = (1 << gens.offset(family)) - 1
    masks = np.arange(gens.size, dtype=np.int64)
    full = (masks & fmask) == fmask
    src = masks[full]
    signs = np.where((k * popcount(src & below)) % 2 == 0, 1, -1)
    out = np.zeros_like(a.coeffs)
    out[src ^ fmask] = signs * a.coeffs[src]
    return GrassmannElement(gens, out)


def degree_slices(dim: int) -> list[np.ndarray]:
    """Bitmask indices of Lambda(R^dim) grouped by form degree."""
    masks = np.arange(1 << dim)
    degs = popcount(masks)
    return [masks[degs == k] for k in range(dim + 1)]


def exterior_power(P) -> np.ndarray:
    """Matrix of Lambda(P) on the bitmask-ordered basis: entry [I, J] = det P[I, J]."""
    P = np.asarray(P)
    d = P.shape[0]
    out = np.zeros((1 << d, 1 << d), dtype=P.dtype)
    out[0, 0] = 1
    for k in range(1, d + 1):
        subsets = list(combinations(range(d), k))
        for rows in subsets:
            I = sum(1 << r for r in rows)
            for cols in subsets:
                J = sum(1 << c for c in cols)
                out[I, J] = _det(P[np.ix_(rows, cols)])
    return out


def exterior_power_batch(P) -> np.ndarray:
    """Batched :func:`exterior_power` for float arrays of shape (..., d, d)."""
    P = np.asarray(P, dtype=float)
    d = P.shape[-1]
    out = np.zeros(P.shape[:-2] + (1 << d, 1 << d))
    out[..., 0, 0] = 1.0
    for k in range(1, d + 1):
        subsets = list(combinations(range(d), k))
        masks = [sum(1 << r for r in s) for s in subsets]
        for rows, I in zip(subsets, masks):
            for cols, J in zip(subsets, masks):
                out[..., I, J] = np.linalg.det(P[..., list(rows), :][..., list(cols)])
    return out


def _det(M):
    if M.dtype == object:
        # cofactor expansion keeps exact arithmetic exact
        if M.shape[0] == 1:
            return M[0, 0]
        return sum(
            (-1) ** j * M[0, j] * _det(np.delete(M[1:], j, axis=1)) for j in range(M.shape[0])
        )
    return np.linalg.det(M)


@dataclass
class FiberOperator:
    """Linear map Lambda(T_y M) -> Lambda(T_x M) in orthonormal frames.

    ``matrix[I, J]`` is the coefficient of the target monomial I in the
    image of source monomial J (both bitmask ordered).
    """

    matrix: np.ndarray
    source_frame: object = None
    target_frame: object = None

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0]).bit_length() - 1

    def block(self, degree: int) -> np.ndarray:
        idx = degree_slices(self.dim)[degree]
        return self.matrix[np.ix_(idx, idx)]

    def __matmul__(self, other: "FiberOperator") -> "FiberOperator":
        return FiberOperator(self.matrix @ other.matrix, other.source_frame, self.target_frame)

    def apply(self, coeffs):
        return self.matrix @ np.asarray(coeffs)


def to_fiber_operator(
    expr: GrassmannElement,
    source_frame=None,
    target_frame=None,
    rho: str = "rho",
    psi_x: str = "psi_x",
    psi_y: str = "psi_y",
    imag_tol: float = 1e-12,
) -> FiberOperator:
    """Materialise a kernel integrand as the matrix of alpha -> int int expr alpha drho dpsi_y."""
    gens = expr.gens
    d = gens.count(psi_y)
    if gens.count(psi_x) != d:
        raise ValueError("psi_x and psi_y families must have equal size")
    xoff = gens.offset(psi_x)
    exact = expr.coeffs.dtype == object
    mat = np.zeros((1 << d, 1 << d), dtype=object if exact else complex)
    for J in range(1 << d):
        alpha = GrassmannElement.scalar(gens, 1, dtype=expr.coeffs.dtype)
        for k in range(d):
            if J >> k & 1:
                alpha = alpha * GrassmannElement.generator(gens, psi_y, k, dtype=expr.coeffs.dtype)
        res = berezin(psi_y, berezin(rho, expr * alpha))
        for I in range(1 << d):
            mat[I, J] = res.coeffs[I << xoff]
        leftover = res.coeffs.copy()
        leftover[[I << xoff for I in range(1 << d)]] = 0
        if np.any(leftover != 0):
            raise ValueError("integrand left generators outside psi_x after integration")
    if exact:
        return FiberOperator(mat, source_frame, target_frame)
    if np.max(np.abs(mat.imag), initial=0.0) > imag_tol:
        raise ValueError(f"fiber operator has imaginary part {np.max(np.abs(mat.imag)):.3e}")
    return FiberOperator(mat.real.copy(), source_frame, target_frame)


def supertrace_fiber(op: FiberOperator) -> float:
    """sum over degrees of (-1)^degree * trace of the degree block."""
    if (
        op.source_frame is not None
        and op.target_frame is not None
        and op.source_frame is not op.target_frame
        and op.source_frame != op.target_frame
    ):
        raise ValueError("supertrace needs the same frame on both sides")
    m = op.matrix
    signs = np.where(popcount(np.arange(m.shape[0])) % 2 == 0, 1, -1)
    return sum(int(s) * m[i, i] for i, s in enumerate(signs))


def exp_pairing(gens: GeneratorSet, rho: str, terms: Sequence[tuple[str, np.ndarray]], dtype=complex):
    """The even element i <rho, sum_f M_f psi_f> for a list of (family, matrix) terms."""
    out = GrassmannElement(gens, dtype=dtype)
    k = gens.count(rho)
    unit = 1j if dtype is not object else _exact_i()
    for family, M in terms:
        M = np.asarray(M)
        for a in range(k):
            rho_a = GrassmannElement.generator(gens, rho, a, dtype=dtype)
            lin = GrassmannElement.linear(gens, family, M[a], dtype=dtype)
            out = out + unit * (rho_a * lin)
    return out


def _exact_i():
    import sympy

    return sympy.I



def creation_matrices(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Matrices of left multiplication by psi^k and of the derivation d/dpsi^k.

    Both act on coefficient vectors over the bitmask basis of Lambda(R^dim);
    returns arrays of shape (dim, 2^dim, 2^dim).
    """
    D = 1 << dim
    E = np.zeros((dim, D, D))
    I = np.zeros((dim, D, D))
    for k in range(dim):
        bit = 1 << k
        for J in range(D):
            below = popcount(J & (bit - 1))
            sign = -1.0 if below % 2 else 1.0
            if J & bit:
                I[k, J ^ bit, J] = sign
            else:
                E[k, J | bit, J] = sign
    return E, I
