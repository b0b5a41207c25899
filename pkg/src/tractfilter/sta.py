"""Spherical tensor algebra.

Convention table (single source of truth for the whole package):

* complex spherical harmonics with Condon-Shortley phase,
  ``Y^j_m = N_jm P^m_j(cos theta) exp(i m phi)``, orthonormal on the sphere;
* coefficient vectors are stored with ``m = -j..j`` in ascending order along
  the last axis;
* the coefficient vector of a direction ``n`` is ``Y^j(n)`` itself, a real
  orientation function is expanded as ``f(n') = sum_m v_m conj(Y^j_m(n'))``
  (equivalently ``v_m = <Y_m, f>``);
* ``wigner_d(j, g)`` is the matrix acting on such coefficient vectors, defined
  by ``Y^j(R n) = D^j(g) Y^j(n)``.  In Euler angles (ZYZ, active) this is
  ``D_{m'm} = exp(i m' alpha) d^j_{m'm}(beta) exp(i m gamma)``, the complex
  conjugate of the usual quantum-mechanics matrix;
* a coefficient vector of a real function obeys
  ``v[-m] = (-1)^m conj(v[m])``.  A spherical product of two such vectors is
  real in the same sense when ``j1 + j2 + j`` is even and real up to a global
  factor ``i`` otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg
from numpy.polynomial import polynomial as nppoly

from .errors import (
    AsymmetryError,
    InvalidArgumentError,
    InvalidCouplingError,
    UnsupportedOrderError,
)

MAX_WIGNER_ORDER = 8


def triangle(j1: int, j2: int, j: int) -> bool:
    return abs(j1 - j2) <= j <= j1 + j2


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients


@lru_cache(maxsize=None)
def _cg_exact(j: int, m: int, j1: int, m1: int, j2: int, m2: int) -> tuple[int, Fraction]:
    """Return ``(sign, square)`` of <j m | j1 m1, j2 m2> via the Racah sum."""
    f = math.factorial
    pre = Fraction(
        (2 * j + 1) * f(j + j1 - j2) * f(j - j1 + j2) * f(j1 + j2 - j),
        f(j1 + j2 + j + 1),
    )
    pre *= f(j + m) * f(j - m) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)
    kmin = max(0, j2 - j - m1, j1 - j + m2)
    kmax = min(j1 + j2 - j, j1 - m1, j2 + m2)
    total = Fraction(0)
    for k in range(kmin, kmax + 1):
        den = (
            f(k)
            * f(j1 + j2 - j - k)
            * f(j1 - m1 - k)
            * f(j2 + m2 - k)
            * f(j - j2 + m1 + k)
            * f(j - j1 - m2 + k)
        )
        total += Fraction((-1) ** k, den)
    if total == 0:
        return 0, Fraction(0)
    return (1 if total > 0 else -1), pre * total * total


@lru_cache(maxsize=None)
def clebsch_gordan(j: int, m: int, j1: int, m1: int, j2: int, m2: int) -> float:
    """<j m | j1 m1, j2 m2> for integer angular momenta."""
    if min(j, j1, j2) < 0:
        raise InvalidArgumentError("angular momenta must be non-negative")
    if abs(m) > j or abs(m1) > j1 or abs(m2) > j2:
        raise InvalidArgumentError("|m| must not exceed its order")
    if m != m1 + m2 or not triangle(j1, j2, j):
        return 0.0
    sign, square = _cg_exact(j, m, j1, m1, j2, m2)
    if sign == 0:
        return 0.0
    # square root of a rational: split to keep full double precision
    root = math.sqrt(square.numerator) / math.sqrt(square.denominator)
    return sign * root


@lru_cache(maxsize=None)
def cg_terms(j: int, j1: int, j2: int) -> tuple[tuple[int, int, int, float], ...]:
    """Nonzero couplings as ``(m, m1, m2, coefficient)``, indices in place."""
    if not triangle(j1, j2, j):
        raise InvalidCouplingError(f"({j1}, {j2}) cannot couple to {j}")
    terms = []
    for m in range(-j, j + 1):
        for m1 in range(max(-j1, m - j2), min(j1, m + j2) + 1):
            c = clebsch_gordan(j, m, j1, m1, j2, m - m1)
            if c != 0.0:
                terms.append((m + j, m1 + j1, m - m1 + j2, c))
    return tuple(terms)


def spherical_product(j: int, v, w) -> np.ndarray:
    """Couple two coefficient arrays to order ``j``.

    ``v`` and ``w`` carry their orders in the length of the last axis; the
    leading axes broadcast, so the same function serves single vectors and
    whole voxel grids.
    """
    v = np.asarray(v)
    w = np.asarray(w)
    j1 = (v.shape[-1] - 1) // 2
    j2 = (w.shape[-1] - 1) // 2
    if v.shape[-1] != 2 * j1 + 1 or w.shape[-1] != 2 * j2 + 1:
        raise InvalidArgumentError("coefficient arrays must have odd length")
    terms = cg_terms(j, j1, j2)
    shape = np.broadcast_shapes(v.shape[:-1], w.shape[:-1]) + (2 * j + 1,)
    out = np.zeros(shape, dtype=np.result_type(v, w, np.complex64))
    for im, i1, i2, c in terms:
        out[..., im] += c * (v[..., i1] * w[..., i2])
    return out


# ---------------------------------------------------------------------------
# Rotations and Wigner-D matrices


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Rotation:
    """Proper rotation ``R = Rz(alpha) Ry(beta) Rz(gamma)`` (radians)."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return _rz(self.alpha) @ _ry(self.beta) @ _rz(self.gamma)

    @classmethod
    def from_matrix(cls, R, tol: float = 1e-9) -> "Rotation":
        R = np.asarray(R, dtype=float)
        if R.shape != (3, 3):
            raise InvalidArgumentError("rotation matrix must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=tol) or np.linalg.det(R) < 0:
            raise InvalidArgumentError("matrix is not a proper rotation")
        sb = math.hypot(R[0, 2], R[1, 2])
        beta = math.atan2(sb, R[2, 2])
        if sb > 1e-12:
            alpha = math.atan2(R[1, 2], R[0, 2])
            gamma = math.atan2(R[2, 1], -R[2, 0])
        elif R[2, 2] > 0:
            alpha, gamma = math.atan2(R[1, 0], R[0, 0]), 0.0
        else:
            alpha, gamma = math.atan2(-R[1, 0], -R[0, 0]), 0.0
        return cls(alpha, beta, gamma)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        # Haar measure: uniform alpha, gamma and cos(beta)
        return cls(
            rng.uniform(0, 2 * np.pi),
            math.acos(rng.uniform(-1.0, 1.0)),
            rng.uniform(0, 2 * np.pi),
        )

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation.from_matrix(self.matrix @ other.matrix)


def _as_rotation(g) -> Rotation:
    return g if isinstance(g, Rotation) else Rotation.from_matrix(g)


def wigner_small_d(j: int, beta: float) -> np.ndarray:
    """Real matrix ``d^j_{m'm}(beta)``, rows m', columns m, ascending."""
    f = math.factorial
    c, s = math.cos(beta / 2), math.sin(beta / 2)
    d = np.zeros((2 * j + 1, 2 * j + 1))
    for mp in range(-j, j + 1):
        for m in range(-j, j + 1):
            pref = math.sqrt(f(j + mp) * f(j - mp) * f(j + m) * f(j - m))
            total = 0.0
            for k in range(max(0, m - mp), min(j + m, j - mp) + 1):
                total += (
                    (-1) ** (mp - m + k)
                    * c ** (2 * j + m - mp - 2 * k)
                    * s ** (mp - m + 2 * k)
                    / (f(j + m - k) * f(k) * f(mp - m + k) * f(j - mp - k))
                )
            d[mp + j, m + j] = pref * total
    return d


def wigner_d(j: int, g) -> np.ndarray:
    """Matrix ``D^j(g)`` with ``Y^j(R(g) n) = D^j(g) Y^j(n)``.

    ``g`` is a :class:`Rotation` or a proper 3x3 rotation matrix.
    """
    if j < 0:
        raise InvalidArgumentError("order must be non-negative")
    if j > MAX_WIGNER_ORDER:
        raise UnsupportedOrderError(f"Wigner-D only supported up to j={MAX_WIGNER_ORDER}")
    g = _as_rotation(g)
    m = np.arange(-j, j + 1)
    left = np.exp(1j * m * g.alpha)
    right = np.exp(1j * m * g.gamma)
    return left[:, None] * wigner_small_d(j, g.beta) * right[None, :]


def orthogonal_action(j: int, Q) -> np.ndarray:
    """Coefficient action of any orthogonal matrix, reflections included.

    Improper ``Q = -R`` acts as ``(-1)^j D^j(R)``, the action on the harmonic
    vector ``Y^j(Q n)``.
    """
    Q = np.asarray(Q, dtype=float)
    if np.linalg.det(Q) < 0:
        return (-1) ** j * wigner_d(j, -Q)
    return wigner_d(j, Q)


# ---------------------------------------------------------------------------
# Spherical and solid harmonics


@lru_cache(maxsize=None)
def _legendre_derivative(j: int, m: int) -> np.ndarray:
    """Power-series coefficients of d^m/dt^m P_j(t)."""
    basis = np.zeros(j + 1)
    basis[j] = 1.0
    coeffs = npleg.leg2poly(basis)
    return nppoly.polyder(coeffs, m) if m else coeffs


def solid_harmonic(j: int, r) -> np.ndarray:
    """Regular solid harmonics ``|r|^j Y^j(r/|r|)``, shape ``r.shape[:-1] + (2j+1,)``.

    Every component is evaluated as a homogeneous polynomial in (x, y, z),
    so ``r = 0`` needs no special casing.
    """
    if j < 0:
        raise InvalidArgumentError("order must be non-negative")
    r = np.asarray(r)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    r2 = x * x + y * y + z * z
    xy = x + 1j * y
    out = np.zeros(r.shape[:-1] + (2 * j + 1,), dtype=np.result_type(r, np.complex128))
    for m in range(0, j + 1):
        norm = math.sqrt((2 * j + 1) / (4 * math.pi) * math.factorial(j - m) / math.factorial(j + m))
        poly = np.zeros(r.shape[:-1], dtype=out.dtype)
        for k, ck in enumerate(_legendre_derivative(j, m)):
            if ck == 0.0 or (j - m - k) % 2:
                continue
            poly = poly + ck * z**k * r2 ** ((j - m - k) // 2)
        val = norm * (-1) ** m * xy**m * poly
        out[..., j + m] = val
        if m:
            out[..., j - m] = (-1) ** m * np.conj(val)
    return out


def eval_sph_harmonics(j: int, n) -> np.ndarray:
    """``Y^j(n)`` for unit vector(s) ``n``."""
    n = np.asarray(n, dtype=float)
    if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-9):
        raise InvalidArgumentError("direction must be a unit vector")
    return solid_harmonic(j, n)


# ---------------------------------------------------------------------------
# Order-2 tensors as symmetric traceless matrices


def _st2_basis() -> np.ndarray:
    """Traceless matrices ``B_m`` with ``n^T B_m n = conj(Y^2_m(n))`` on the sphere."""
    B = np.zeros((5, 3, 3), dtype=complex)
    c0 = math.sqrt(5 / (16 * math.pi))
    c1 = math.sqrt(15 / (8 * math.pi))
    c2 = math.sqrt(15 / (32 * math.pi))
    B[2] = c0 * np.diag([-1.0, -1.0, 2.0])
    for sgn, idx in ((1, 3), (-1, 1)):
        # Y^2_{+-1} = -+ c1 (x +- iy) z, conjugated
        M = np.zeros((3, 3), dtype=complex)
        M[0, 2] = M[2, 0] = 0.5
        M[1, 2] = M[2, 1] = -0.5j * sgn
        B[idx] = -sgn * c1 * M
    for sgn, idx in ((1, 4), (-1, 0)):
        M = np.zeros((3, 3), dtype=complex)
        M[0, 0], M[1, 1] = 1.0, -1.0
        M[0, 1] = M[1, 0] = -1j * sgn
        B[idx] = c2 * M
    return B


ST2_BASIS = _st2_basis()
# |v|^2 = ST2_FROBENIUS_RATIO * ||M||_F^2 for the mapping below
ST2_FROBENIUS_RATIO = 8 * math.pi / 15


def reality_defect(v) -> float:
    """Largest violation of ``v[-m] = (-1)^m conj(v[m])``."""
    v = np.asarray(v)
    j = (v.shape[-1] - 1) // 2
    sign = (-1.0) ** np.arange(-j, j + 1)
    mirrored = sign * np.conj(v[..., ::-1])
    return float(np.max(np.abs(v - mirrored))) if v.size else 0.0


def st2_to_matrix(v, check: bool = True) -> np.ndarray:
    """Symmetric traceless matrix with ``n^T M n = sum_m v_m conj(Y^2_m(n))``.

    Works on stacks: ``v`` of shape ``(..., 5)`` gives ``(..., 3, 3)``.
    """
    v = np.asarray(v)
    if v.shape[-1] != 5:
        raise InvalidArgumentError("order-2 tensors have 5 components")
    if check:
        scale = max(1.0, float(np.max(np.abs(v)))) if v.size else 1.0
        if reality_defect(v) > 1e-8 * scale:
            raise AsymmetryError("coefficients do not describe a real function")
    return np.einsum("...m,mab->...ab", v, ST2_BASIS).real


def matrix_to_st2(M) -> np.ndarray:
    """Inverse of :func:`st2_to_matrix` for symmetric traceless input."""
    M = np.asarray(M, dtype=float)
    # B_m are orthogonal w.r.t. the Frobenius product, <B_m, B_m> = 3/(8 pi)
    norm = np.einsum("mab,mab->m", np.conj(ST2_BASIS), ST2_BASIS).real
    return np.einsum("mab,...ab->...m", np.conj(ST2_BASIS), M) / norm


@dataclass(frozen=True)
class PrincipalDirection:
    direction: np.ndarray
    magnitude: float
    degenerate: bool


def _canonical_sign(d: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(d) > 1e-15)
    if nz.size and d[nz[0]] < 0:
        return -d
    return d


def principal_direction(v) -> PrincipalDirection:
    """Top eigenvector of the matrix form of an order-2 tensor.

    Directions are axial; the sign is fixed so the first nonzero component is
    positive.  A degenerate top eigenvalue falls back to the lexicographically
    largest eigenvector among the tied ones.
    """
    v = np.asarray(v)
    mag = float(np.linalg.norm(v))
    M = st2_to_matrix(v)
    evals, evecs = np.linalg.eigh(M)
    gap = evals[2] - evals[1]
    degenerate = mag == 0.0 or gap < 1e-12 * mag
    if degenerate:
        tied = [_canonical_sign(evecs[:, k]) for k in range(3) if evals[2] - evals[k] <= 1e-12 * max(mag, 1.0)]
        if mag == 0.0:
            tied = [np.array([1.0, 0.0, 0.0])]
        d = max(tied, key=lambda e: tuple(e))
    else:
        d = _canonical_sign(evecs[:, 2])
    return PrincipalDirection(d, mag, bool(degenerate))


def principal_directions(v) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized top eigenvectors and magnitudes for ``(..., 5)`` arrays.

    No sign canonicalization; callers align axial signs themselves.
    """
    v = np.asarray(v)
    M = st2_to_matrix(v, check=False)
    _, evecs = np.linalg.eigh(M)
    return evecs[..., :, 2], np.linalg.norm(v, axis=-1)
