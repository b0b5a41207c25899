"""Spherical tensor fields on voxel grids.

Field data are stored as ``(X, Y, Z, 2j+1)`` complex arrays: array axes are
world x, y, z and the channel axis runs over ``m = -j..j``.  Spatial
operators are evaluated in Fourier space on a zero-padded periodic grid whose
size is forced odd, so every frequency has its mirror partner and flips or
axis permutations of the input commute exactly with the filters.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.ndimage

from . import sta
from .errors import (
    GridTooSmallError,
    InsufficientDirectionsError,
    InvalidArgumentError,
    InvalidCouplingError,
)

# Presmoothing width (in finest-grid voxels) for pyramid level s is
# PYRAMID_SMOOTHING * gamma**(-s): 0.75 voxels at every level's own resolution.
PYRAMID_SMOOTHING = 0.75
MIN_MARGIN = 3
MIN_RESAMPLED_DIM = 4
DELTA_SIGMA = 0.25


@dataclass(frozen=True)
class VolumeGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidArgumentError(f"bad grid dims {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise InvalidArgumentError(f"bad grid spacing {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def nvox(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    @property
    def center(self) -> np.ndarray:
        return self.index_to_world(np.array([(d - 1) / 2 for d in self.dims]))

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.spacing)

    def world_to_index(self, r) -> np.ndarray:
        return (np.asarray(r, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_coords(self) -> np.ndarray:
        """Voxel-center world coordinates, shape ``(X, Y, Z, 3)``."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class STField:
    grid: VolumeGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or tuple(data.shape[:3]) != self.grid.dims or data.shape[3] % 2 != 1:
            raise InvalidArgumentError(
                f"field data shape {data.shape} does not match grid {self.grid.dims}"
            )
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        object.__setattr__(self, "data", data)

    @property
    def j(self) -> int:
        return (self.data.shape[3] - 1) // 2

    @classmethod
    def zeros(cls, grid: VolumeGrid, j: int) -> "STField":
        return cls(grid, np.zeros(grid.dims + (2 * j + 1,), dtype=np.complex128))

    def magnitude(self) -> np.ndarray:
        """Voxelwise Euclidean norm of the coefficient vector."""
        d = self.data
        return np.sqrt(np.sum(d.real**2 + d.imag**2, axis=-1))

    def energy(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))

    def with_data(self, data) -> "STField":
        return STField(self.grid, data)

    def __mul__(self, c) -> "STField":
        return STField(self.grid, self.data * c)

    __rmul__ = __mul__

    def __add__(self, other: "STField") -> "STField":
        return STField(self.grid, self.data + other.data)


@dataclass(frozen=True)
class DwiVolume:
    """b0 volume plus one diffusion-weighted volume per gradient.

    ``dwi`` has shape ``(X, Y, Z, G)``; ``gradients`` ``(G, 3)``; ``bvals`` ``(G,)``.
    """

    grid: VolumeGrid
    b0: np.ndarray
    gradients: np.ndarray
    bvals: np.ndarray
    dwi: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gradients, dtype=float).reshape(-1, 3)
        b = np.asarray(self.bvals, dtype=float).reshape(-1)
        if len(g) != len(b) or np.asarray(self.dwi).shape != self.grid.dims + (len(g),):
            raise InvalidArgumentError("gradient table and DWI volumes disagree")
        if np.asarray(self.b0).shape != self.grid.dims:
            raise InvalidArgumentError("b0 volume does not match grid")
        if len(g) and np.max(np.abs(np.linalg.norm(g, axis=1) - 1.0)) > 1e-6:
            raise InvalidArgumentError("gradient directions must be unit vectors")
        object.__setattr__(self, "gradients", g)
        object.__setattr__(self, "bvals", b)

    @property
    def shells(self) -> list[float]:
        return sorted({float(round(b)) for b in self.bvals})


@dataclass(frozen=True)
class RadialKernel:
    kind: str = "gaussian"  # "gaussian" | "log"
    sigma: float = 1.0  # voxels at the current scale

    def __post_init__(self):
        if self.kind not in ("gaussian", "log"):
            raise InvalidArgumentError(f"unknown kernel kind {self.kind!r}")
        if not self.sigma > 0:
            raise InvalidArgumentError("kernel sigma must be positive")

    @property
    def tag(self) -> str:
        prefix = "G" if self.kind == "gaussian" else "LoG"
        return f"{prefix}{self.sigma:g}"

    @property
    def support(self) -> int:
        """Padding (voxels) that keeps periodic wrap-around off the data."""
        return max(MIN_MARGIN, int(math.ceil(3.0 * self.sigma)))


# ---------------------------------------------------------------------------
# Fourier machinery


def _padded_size(n: int, pad: int) -> int:
    p = n + 2 * pad
    return p + 1 if p % 2 == 0 else p


@lru_cache(maxsize=16)
def _frequencies(shape: tuple[int, int, int], spacing: tuple[float, float, float]) -> np.ndarray:
    """Frequency vectors (cycles/mm), shape ``shape + (3,)``."""
    axes = [np.fft.fftfreq(n, d=h) for n, h in zip(shape, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@lru_cache(maxsize=12)
def _derivative_multiplier(shape, spacing, L: int) -> np.ndarray:
    """Fourier symbol of the spherical derivative, ``R^L(2 pi i kappa)``, channel-first."""
    kappa = _frequencies(shape, spacing)
    mult = (2j * np.pi) ** L * sta.solid_harmonic(L, kappa)
    return np.ascontiguousarray(np.moveaxis(mult, -1, 0))


@lru_cache(maxsize=16)
def _kernel_transform(shape: tuple[int, int, int], kind: str, sigma: float) -> np.ndarray:
    offsets = [np.fft.fftfreq(n) * n for n in shape]
    d2 = sum(np.meshgrid(*[o**2 for o in offsets], indexing="ij"))
    if sigma <= DELTA_SIGMA:
        k = (d2 == 0).astype(float)
        if kind == "log":
            k = np.zeros_like(k)
    else:
        gauss = np.exp(-d2 / (2 * sigma**2))
        gauss /= gauss.sum()
        if kind == "gaussian":
            k = gauss
        else:
            # scale-normalized Laplacian of Gaussian; DC removed with a Gaussian
            # profile so the correction stays local
            k = sigma**2 * (d2 / sigma**4 - 3 / sigma**2) * gauss
            k -= k.sum() * gauss
    return scipy.fft.fftn(k).real


class Spectral:
    """Padded FFT workspace for one grid and padding width.

    Spectra are stored channel-first, ``(C, Px, Py, Pz)``; spatial arrays
    keep the channel last.
    """

    def __init__(self, grid: VolumeGrid, pad: int = MIN_MARGIN):
        self.grid = grid
        self.pad = int(pad)
        self.shape = tuple(_padded_size(n, self.pad) for n in grid.dims)

    def forward(self, data: np.ndarray) -> np.ndarray:
        buf = np.zeros((data.shape[3],) + self.shape, dtype=np.complex128)
        p = self.pad
        X, Y, Z = self.grid.dims
        buf[:, p : p + X, p : p + Y, p : p + Z] = np.moveaxis(data, -1, 0)
        return scipy.fft.fftn(buf, axes=(1, 2, 3), overwrite_x=True)

    def smoothed(self, data: np.ndarray, k: "RadialKernel") -> np.ndarray:
        spec = self.forward(data)
        spec *= self.kernel(k)
        return spec

    def inverse(self, spec: np.ndarray) -> np.ndarray:
        out = scipy.fft.ifftn(spec, axes=(1, 2, 3))
        p = self.pad
        X, Y, Z = self.grid.dims
        return np.ascontiguousarray(np.moveaxis(out[:, p : p + X, p : p + Y, p : p + Z], 0, -1))

    def kernel(self, k: RadialKernel) -> np.ndarray:
        return _kernel_transform(self.shape, k.kind, float(k.sigma))

    def derivative(self, L: int) -> np.ndarray:
        return _derivative_multiplier(self.shape, self.grid.spacing, L)

    def couple_derivative(self, spec: np.ndarray, L: int, J: int) -> np.ndarray:
        """``<d^L o spec>_J`` on a channel-first spectrum."""
        j = (spec.shape[0] - 1) // 2
        if not sta.triangle(L, j, J):
            raise InvalidCouplingError(f"derivative order {L} and field order {j} cannot give {J}")
        if L == 0:
            return spec * sta.solid_harmonic(0, np.zeros(3))[0]
        mult = self.derivative(L)
        out = np.zeros((2 * J + 1,) + spec.shape[1:], dtype=np.complex128)
        tmp = np.empty(spec.shape[1:], dtype=np.complex128)
        for im, i1, i2, c in sta.cg_terms(J, L, j):
            np.multiply(mult[i1], spec[i2], out=tmp)
            tmp *= c
            out[im] += tmp
        return out


# ---------------------------------------------------------------------------
# Operations


def convolve_radial(f: STField, k: RadialKernel) -> STField:
    """Componentwise FFT convolution with a sampled radial kernel."""
    sp = Spectral(f.grid, k.support)
    return f.with_data(sp.inverse(sp.smoothed(f.data, k)))


def linear_feature(a: STField, L: int, J: int, k: RadialKernel) -> STField:
    """``<d^L o (k * a)>_J``.

    ``d^0`` is the constant ``Y^0_0 = 1/sqrt(4 pi)``, so ``L = 0, J = j`` is the
    smoothed field times that constant.
    """
    if not sta.triangle(L, a.j, J):
        raise InvalidCouplingError(f"|{L}-{a.j}| <= {J} <= {L}+{a.j} violated")
    sp = Spectral(a.grid, k.support)
    return STField(a.grid, sp.inverse(sp.couple_derivative(sp.smoothed(a.data, k), L, J)))


def spherical_derivative(f: STField, L: int, J: int, pad: int = MIN_MARGIN) -> STField:
    """``<d^L o f>_J`` without smoothing."""
    sp = Spectral(f.grid, pad)
    return STField(f.grid, sp.inverse(sp.couple_derivative(sp.forward(f.data), L, J)))


def _interp_matrix(pos: np.ndarray, n_in: int) -> np.ndarray:
    """Dense linear-interpolation weights, clamped at the edges."""
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    W = np.zeros((len(pos), n_in))
    rows = np.arange(len(pos))
    np.add.at(W, (rows, i0), 1.0 - w)
    np.add.at(W, (rows, i1), w)
    return W


def _apply_separable(data: np.ndarray, mats) -> np.ndarray:
    out = data
    for axis, W in enumerate(mats):
        out = np.moveaxis(np.tensordot(W, out, axes=([1], [axis])), 0, axis)
    return out


def downsampled_grid(grid: VolumeGrid, factor: float) -> VolumeGrid:
    dims = tuple(int(math.ceil(n / factor - 1e-9)) for n in grid.dims)
    spacing = tuple(h * factor for h in grid.spacing)
    center = grid.center
    origin = tuple(center[a] - (dims[a] - 1) / 2 * spacing[a] for a in range(3))
    return VolumeGrid(dims, spacing, origin)


def upsampled_grid(grid: VolumeGrid, factor: float) -> VolumeGrid:
    dims = tuple(int(round(n * factor)) for n in grid.dims)
    spacing = tuple(h / factor for h in grid.spacing)
    center = grid.center
    origin = tuple(center[a] - (dims[a] - 1) / 2 * spacing[a] for a in range(3))
    return VolumeGrid(dims, spacing, origin)


def resample_onto(f: STField, target: VolumeGrid) -> STField:
    """Trilinear sampling of every component at the target voxel centers."""
    mats = []
    for a in range(3):
        world = target.origin[a] + target.spacing[a] * np.arange(target.dims[a])
        pos = (world - f.grid.origin[a]) / f.grid.spacing[a]
        mats.append(_interp_matrix(pos, f.grid.dims[a]))
    return STField(target, _apply_separable(f.data, mats))


def presmooth_field(f: STField, sigma: float) -> STField:
    """Anti-alias smoothing with replicated edges, so constants stay constant."""
    if sigma <= DELTA_SIGMA:
        return f
    out = np.empty_like(f.data)
    for c in range(f.data.shape[-1]):
        comp = np.ascontiguousarray(f.data[..., c])
        out[..., c] = scipy.ndimage.gaussian_filter(comp.real, sigma, mode="nearest", truncate=4.0)
        out[..., c] += 1j * scipy.ndimage.gaussian_filter(comp.imag, sigma, mode="nearest", truncate=4.0)
    return f.with_data(out)


def resample(
    f: STField,
    factor: float,
    direction: str = "down",
    presmooth: float = 0.0,
    target: VolumeGrid | None = None,
) -> STField:
    """Change resolution by ``factor`` keeping the grid center fixed in world space.

    ``down`` optionally presmooths (sigma in input voxels) before decimation.
    ``up`` interpolates onto ``target`` or, by default, the grid with
    ``round(n * factor)`` voxels per axis.
    """
    if not factor > 1:
        raise InvalidArgumentError("resampling factor must exceed 1")
    if direction == "down":
        if presmooth > 0:
            f = presmooth_field(f, presmooth)
        target = target or downsampled_grid(f.grid, factor)
    elif direction == "up":
        target = target or upsampled_grid(f.grid, factor)
    else:
        raise InvalidArgumentError(f"direction must be 'down' or 'up', got {direction!r}")
    if min(target.dims) < MIN_RESAMPLED_DIM:
        raise GridTooSmallError(f"resampled grid {target.dims} is smaller than {MIN_RESAMPLED_DIM}")
    return resample_onto(f, target)


def window_profile(n: int, margin: int) -> np.ndarray:
    i = np.arange(n)
    d = np.minimum(i, n - 1 - i).astype(float)
    if margin <= 0:
        return np.ones(n)
    return np.where(d >= margin, 1.0, 0.5 * (1.0 - np.cos(np.pi * d / margin)))


def window_weights(grid: VolumeGrid, margin: int) -> np.ndarray:
    wx, wy, wz = (window_profile(n, margin) for n in grid.dims)
    return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]


def window(f: STField, margin: int) -> STField:
    """Separable raised-cosine taper: 0 on the faces, 1 from ``margin`` inward."""
    if margin < 0:
        raise InvalidArgumentError("margin must be non-negative")
    if margin == 0:
        return f
    return f.with_data(f.data * window_weights(f.grid, margin)[..., None])


def _sh_design(directions: np.ndarray, lmax: int) -> np.ndarray:
    # signal model x(n) = sum_j sum_m a^j_m conj(Y^j_m(n)), even j only
    return np.concatenate(
        [np.conj(sta.eval_sph_harmonics(j, directions)) for j in range(0, lmax + 1, 2)], axis=1
    )


def sh_project(dwi: DwiVolume, shell: float | None = None, lmax: int = 2, shell_tol: float = 50.0):
    """Least-squares even-order SH coefficients of the b0-normalized signal.

    Returns ``{j: STField}`` for ``j = 0, 2, ..., lmax``.  Voxels with
    ``b0 <= 0`` are zero.  ``shell`` defaults to the highest b-value present.
    """
    if lmax < 0 or lmax % 2:
        raise InvalidArgumentError("lmax must be even and non-negative")
    bvals = dwi.bvals
    if shell is None:
        if not len(bvals):
            raise InsufficientDirectionsError("no diffusion-weighted volumes")
        shell = float(np.max(bvals))
    sel = np.flatnonzero(np.abs(bvals - shell) <= shell_tol)
    ncoef = (lmax + 1) * (lmax + 2) // 2
    dirs = dwi.gradients[sel]
    # antipodal directions are the same measurement for even orders
    canon = np.round(np.where((dirs[:, 2:3] < 0), -dirs, dirs), 6)
    ndistinct = len({tuple(d) for d in canon})
    if ndistinct < ncoef:
        raise InsufficientDirectionsError(
            f"shell b={shell:g} has {ndistinct} distinct directions, need {ncoef}"
        )
    A = _sh_design(dirs, lmax)
    if np.linalg.matrix_rank(A) < ncoef:
        raise InsufficientDirectionsError("gradient directions do not determine the expansion")
    pinv = np.linalg.pinv(A)
    b0 = np.asarray(dwi.b0, dtype=float)
    mask = b0 > 0
    signal = np.zeros(dwi.grid.dims + (len(sel),))
    signal[mask] = dwi.dwi[mask][:, sel] / b0[mask][:, None]
    coef = signal @ pinv.T
    out, start = {}, 0
    for j in range(0, lmax + 1, 2):
        out[j] = STField(dwi.grid, np.ascontiguousarray(coef[..., start : start + 2 * j + 1]))
        start += 2 * j + 1
    return out


def sh_synthesize(coeffs: dict, directions: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_j a^j . conj(Y^j(n))`` at each direction; ``(X, Y, Z, G)`` real."""
    total = None
    for j, f in coeffs.items():
        v = f.data @ np.conj(sta.eval_sph_harmonics(j, directions)).T
        total = v if total is None else total + v
    return total.real


# ---------------------------------------------------------------------------
# Grid symmetries


def grid_rotations() -> list[np.ndarray]:
    """The 24 proper signed permutation matrices."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            Q = np.zeros((3, 3))
            for a in range(3):
                Q[a, perm[a]] = signs[a]
            if np.linalg.det(Q) > 0:
                mats.append(Q)
    return mats


def transform_array(data: np.ndarray, Q) -> np.ndarray:
    """Spatial part of a grid symmetry: ``out[p] = data[Q^T (p - c) + c]``.

    ``Q`` is a signed permutation, the center ``c`` is the grid center.
    """
    Q = np.asarray(Q)
    perm = [int(np.flatnonzero(Q[a])[0]) for a in range(3)]
    out = np.transpose(data, perm + list(range(3, data.ndim)))
    for a in range(3):
        if Q[a, perm[a]] < 0:
            out = np.flip(out, axis=a)
    return np.ascontiguousarray(out)


def transform_field(f: STField, Q, parity: int = 1) -> STField:
    """Apply a signed-permutation symmetry to spatial layout and values.

    The value action is ``orthogonal_action(j, Q)``; ``parity=-1`` marks a
    pseudo-tensor, which picks up an extra sign under improper ``Q``.
    """
    Q = np.asarray(Q, dtype=float)
    D = sta.orthogonal_action(f.j, Q)
    if parity < 0 and np.linalg.det(Q) < 0:
        D = -D
    perm = [int(np.flatnonzero(Q[a])[0]) for a in range(3)]
    g = f.grid
    dims = tuple(g.dims[p] for p in perm)
    spacing = tuple(g.spacing[p] for p in perm)
    center = g.center
    grid = VolumeGrid(dims, spacing, tuple(center[a] - (dims[a] - 1) / 2 * spacing[a] for a in range(3)))
    data = transform_array(f.data, Q) @ D.T
    return STField(grid, data)
