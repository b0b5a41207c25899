"""Feature enumeration and computation for one filter scale.

Linear features ``b = <d^L o (g * a^j)>_J`` are combined either pairwise,

    f = <d^K o (g'' * <b o b'>_l)>_2,

or with a spherical power ``y_k`` (order ``2k``) of the previous scale's
output,

    f = <d^K o (g'' * <b o y_k>_l)>_2.

Selection rules: ``j in {0, 2}``, ``J <= cutoff(g)``, triangle rules at every
coupling, ``|l - K| <= 2 <= l + K``, and the mirror rule
``K + L + L' + j + j'`` even (``K + L + j`` even for link features).  The
mirror rule is exactly the condition under which a feature is a true order-2
tensor under reflections; it also makes every feature satisfy the reality
symmetry, so real weights produce real outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import sta
from .errors import InvalidArgumentError, InvalidCouplingError
from .fields import MIN_MARGIN, RadialKernel, Spectral, STField

FINAL_SMOOTHING = RadialKernel("gaussian", 1.0)
SIGNAL_ORDERS = (0, 2)
POWER_INDICES = (1, 2, 3)
# relative stabilizer for the division in spherical_powers
POWER_EPS = 1e-6


@dataclass(frozen=True)
class LinearFeatureSpec:
    J: int
    L: int
    j: int
    kernel: RadialKernel

    def __post_init__(self):
        if not sta.triangle(self.L, self.j, self.J):
            raise InvalidCouplingError(f"linear feature {self} violates the triangle rule")

    def label(self) -> str:
        return f"J={self.J} L={self.L} j={self.j} {self.kernel.tag}"


@dataclass(frozen=True)
class QuadFeatureSpec:
    left: int  # index into ScaleConfig.linear
    right: int
    ell: int
    K: int


@dataclass(frozen=True)
class LinkFeatureSpec:
    left: int
    k: int
    ell: int
    K: int


@dataclass(frozen=True)
class ScaleConfig:
    s: int
    kernels: tuple[tuple[RadialKernel, int], ...]
    linear: tuple[LinearFeatureSpec, ...]
    quad_specs: tuple[QuadFeatureSpec, ...]
    link_specs: tuple[LinkFeatureSpec, ...]
    max_K: int | None = None

    @property
    def N(self) -> int:
        return len(self.quad_specs)

    @property
    def N_s(self) -> int:
        return len(self.link_specs)

    def manifest(self) -> str:
        """Canonical text listing of every spec tuple."""
        lines = [f"scale {self.s}"]
        lines += [f"kernel {k.kind} {k.sigma!r} cutoff {c}" for k, c in self.kernels]
        lines.append(f"max_K {self.max_K}")
        lines += [f"linear {i} {b.J} {b.L} {b.j} {b.kernel.kind} {b.kernel.sigma!r}" for i, b in enumerate(self.linear)]
        lines += [f"quad {q.left} {q.right} {q.ell} {q.K}" for q in self.quad_specs]
        lines += [f"link {q.left} {q.k} {q.ell} {q.K}" for q in self.link_specs]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.manifest().encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "kernels": [[k.kind, k.sigma, c] for k, c in self.kernels],
            "max_K": self.max_K,
            "previous_output": bool(self.link_specs) or None,
        }


def _readout_orders(ell: int, max_K: int | None):
    for K in range(abs(ell - 2), ell + 3):
        if max_K is not None and K > max_K:
            break
        if 2 <= ell + K:
            yield K


def enumerate_linear(kernels) -> list[LinearFeatureSpec]:
    out = []
    for kernel, cutoff in kernels:
        for j in SIGNAL_ORDERS:
            for J in range(0, cutoff + 1):
                for L in range(abs(J - j), J + j + 1):
                    out.append(LinearFeatureSpec(J, L, j, kernel))
    return out


def enumerate_features(kernels, previous_output_present: bool, s: int = 0, max_K: int | None = None) -> ScaleConfig:
    """All admissible feature tuples for a scale, in canonical order.

    ``kernels`` is a sequence of ``(RadialKernel, cutoff)``; a negative cutoff
    disables the kernel.  Pairs are unordered; a self-pair coupled to odd
    ``l`` vanishes identically by Clebsch-Gordan symmetry and is dropped.
    ``max_K`` optionally caps the readout derivative order.
    """
    kernels = tuple((k, int(c)) for k, c in kernels)
    if any(not isinstance(k, RadialKernel) for k, _ in kernels):
        raise InvalidArgumentError("kernels must be RadialKernel instances")
    linear = enumerate_linear(kernels)
    quad = []
    for a, ba in enumerate(linear):
        for b in range(a, len(linear)):
            bb = linear[b]
            for ell in range(abs(ba.J - bb.J), ba.J + bb.J + 1):
                if a == b and ell % 2:
                    continue
                for K in _readout_orders(ell, max_K):
                    if (K + ba.L + bb.L + ba.j + bb.j) % 2 == 0:
                        quad.append(QuadFeatureSpec(a, b, ell, K))
    link = []
    if previous_output_present:
        for a, ba in enumerate(linear):
            for k in POWER_INDICES:
                for ell in range(abs(ba.J - 2 * k), ba.J + 2 * k + 1):
                    for K in _readout_orders(ell, max_K):
                        if (K + ba.L + ba.j) % 2 == 0:
                            link.append(LinkFeatureSpec(a, k, ell, K))
    return ScaleConfig(s, kernels, tuple(linear), tuple(quad), tuple(link), max_K)


# ---------------------------------------------------------------------------
# Computation


def compute_linear_features(data: dict, specs) -> list[STField]:
    """``b_I`` for each spec, in order.  ``data`` maps order -> STField."""
    needed = {b.j for b in specs}
    missing = needed - set(data)
    if missing:
        raise InvalidArgumentError(f"data lacks orders {sorted(missing)}")
    cache = {}
    out = []
    for b in specs:
        a = data[b.j]
        key = (b.kernel, b.j)
        if key not in cache:
            sp = Spectral(a.grid, b.kernel.support)
            cache[key] = (sp, sp.smoothed(a.data, b.kernel))
        sp, spec = cache[key]
        out.append(STField(a.grid, sp.inverse(sp.couple_derivative(spec, b.L, b.J))))
    return out


class _Readout:
    """Smooth-and-differentiate stage shared by quadratic and link features."""

    def __init__(self, grid, final: RadialKernel = FINAL_SMOOTHING):
        self.sp = Spectral(grid, max(MIN_MARGIN, final.support))
        self.kernel = final
        self._key = None
        self._spec = None

    def __call__(self, key, product_fn, K: int) -> np.ndarray:
        if key != self._key:
            product = product_fn()
            self._spec = self.sp.smoothed(product, self.kernel)
            self._key = key
        return self.sp.inverse(self.sp.couple_derivative(self._spec, K, 2))


def compute_quad_feature(bL: STField, bR: STField, spec: QuadFeatureSpec, final: RadialKernel = FINAL_SMOOTHING) -> STField:
    if not sta.triangle(bL.j, bR.j, spec.ell) or not sta.triangle(spec.K, spec.ell, 2):
        raise InvalidCouplingError(f"orders ({bL.j}, {bR.j}) do not fit {spec}")
    ro = _Readout(bL.grid, final)
    data = ro(0, lambda: sta.spherical_product(spec.ell, bL.data, bR.data), spec.K)
    return STField(bL.grid, data)


def compute_link_feature(b: STField, yk: STField, spec: LinkFeatureSpec, final: RadialKernel = FINAL_SMOOTHING) -> STField:
    if yk.j != 2 * spec.k or not sta.triangle(b.j, yk.j, spec.ell) or not sta.triangle(spec.K, spec.ell, 2):
        raise InvalidCouplingError(f"orders ({b.j}, {yk.j}) do not fit {spec}")
    ro = _Readout(b.grid, final)
    data = ro(0, lambda: sta.spherical_product(spec.ell, b.data, yk.data), spec.K)
    return STField(b.grid, data)


def iter_quad_features(linear: list[STField], specs, final: RadialKernel = FINAL_SMOOTHING):
    """Yield quadratic feature arrays in spec order, sharing each product."""
    if not specs:
        return
    ro = _Readout(linear[0].grid, final)
    for q in specs:
        bl, br = linear[q.left], linear[q.right]
        yield ro((q.left, q.right, q.ell), lambda: sta.spherical_product(q.ell, bl.data, br.data), q.K)


def iter_link_features(linear: list[STField], powers: list[STField], specs, final: RadialKernel = FINAL_SMOOTHING):
    if not specs:
        return
    ro = _Readout(linear[0].grid, final)
    for q in specs:
        b, yk = linear[q.left], powers[q.k - 1]
        yield ro((q.left, q.k, q.ell), lambda: sta.spherical_product(q.ell, b.data, yk.data), q.K)


def weighted_readout(grid, entries, final: RadialKernel = FINAL_SMOOTHING) -> np.ndarray:
    """``sum c <d^K o (g'' * p)>_2`` over ``(key, ell, K, c, product_fn)`` entries.

    The readout is linear, so products are summed per ``(ell, K)`` before a
    single transform each.  Entries sharing a key must be consecutive.
    """
    sp = Spectral(grid, max(MIN_MARGIN, final.support))
    by_ell: dict = {}
    for e in entries:
        if e[3] != 0.0:
            by_ell.setdefault(e[1], []).append(e)
    out = None
    for ell in sorted(by_ell):
        acc = {}
        key, prod = None, None
        for k, _, K, c, fn in by_ell[ell]:
            if k != key:
                key, prod = k, fn()
            if K in acc:
                acc[K] += c * prod
            else:
                acc[K] = c * prod
        for K in sorted(acc):
            part = sp.couple_derivative(sp.smoothed(acc[K], final), K, 2)
            out = part if out is None else out + part
        del acc, prod
    if out is None:
        return np.zeros(grid.dims + (5,), dtype=np.complex128)
    return sp.inverse(out)


def quad_entries(linear: list[STField], specs, coefs):
    for q, c in zip(specs, coefs):
        bl, br = linear[q.left], linear[q.right]
        yield (q.left, q.right, q.ell), q.ell, q.K, float(c), lambda bl=bl, br=br, ell=q.ell: sta.spherical_product(ell, bl.data, br.data)


def link_entries(linear: list[STField], powers: list[STField], specs, coefs):
    for q, c in zip(specs, coefs):
        b, yk = linear[q.left], powers[q.k - 1]
        yield (q.left, q.k, q.ell), q.ell, q.K, float(c), lambda b=b, yk=yk, ell=q.ell: sta.spherical_product(ell, b.data, yk.data)


def power_stabilizer(mag: np.ndarray) -> float:
    return POWER_EPS * max(float(np.median(mag)), float(np.finfo(float).eps))


def spherical_powers(y: STField) -> list[STField]:
    """``[y_1, y_2, y_3]`` with ``y_k = <y_{k-1} o y>_{2k} / (|y| + eps)``."""
    if y.j != 2:
        raise InvalidArgumentError("spherical powers need an order-2 field")
    mag = y.magnitude()
    denom = (mag + power_stabilizer(mag))[..., None]
    out = [y]
    for k in POWER_INDICES[1:]:
        out.append(STField(y.grid, sta.spherical_product(2 * k, out[-1].data, y.data) / denom))
    return out
