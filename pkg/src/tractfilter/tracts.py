"""Ground truth: tract labels from streamlines, waypoint selection, synthetic phantoms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import sta
from .errors import InvalidArgumentError
from .fields import DwiVolume, STField, VolumeGrid

# detectability constant as a fraction of the voxel size (mm)
DEFAULT_EPS_FRACTION = 0.1
D_PAR = 1.7e-3
D_PERP = 0.3e-3
D_ISO = 0.8e-3


@dataclass(frozen=True)
class Streamline:
    points: np.ndarray  # (P, 3) world mm

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 2:
            raise InvalidArgumentError("a streamline needs at least two 3-D points")
        if np.any(np.linalg.norm(np.diff(p, axis=0), axis=1) == 0):
            raise InvalidArgumentError("consecutive streamline points must be distinct")
        object.__setattr__(self, "points", p)

    def reversed(self) -> "Streamline":
        return Streamline(self.points[::-1].copy())

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass(frozen=True)
class TractLabel:
    field: STField
    epsilon: float
    raw: STField | None = None  # accumulated density before normalization


@dataclass(frozen=True)
class WaypointSpec:
    points: np.ndarray
    tolerances: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        t = np.asarray(self.tolerances, dtype=float).reshape(-1)
        if len(p) != len(t) or len(p) == 0:
            raise InvalidArgumentError("waypoints and tolerances must have the same nonzero length")
        if np.any(t <= 0):
            raise InvalidArgumentError("tolerances must be positive")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "tolerances", t)


def _as_points(s) -> np.ndarray:
    return s.points if isinstance(s, Streamline) else np.asarray(s, dtype=float)


def default_epsilon(grid: VolumeGrid) -> float:
    return DEFAULT_EPS_FRACTION * float(np.mean(grid.spacing))


# ---------------------------------------------------------------------------
# Labels


def splat_streamlines(streamlines, grid: VolumeGrid) -> np.ndarray:
    """Unnormalized density ``sum (segment length) Y2(tangent)`` by nearest voxel."""
    acc = np.zeros(grid.dims + (5,), dtype=np.complex128)
    half = 0.5 * min(grid.spacing)
    dims = np.asarray(grid.dims)
    for s in streamlines:
        p = _as_points(s)
        seg = np.diff(p, axis=0)
        seglen = np.linalg.norm(seg, axis=1)
        nsub = np.maximum(1, np.ceil(seglen / half - 1e-12)).astype(int)
        # subdivide each segment into equal parts no longer than half a voxel
        rep = np.repeat(np.arange(len(seg)), nsub)
        frac = np.concatenate([(np.arange(n) + 0.5) / n for n in nsub])
        mids = p[rep] + frac[:, None] * seg[rep]
        lengths = (seglen / nsub)[rep]
        tangents = seg[rep] / seglen[rep][:, None]
        idx = np.rint(grid.world_to_index(mids)).astype(int)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        if not inside.any():
            continue
        idx, lengths, tangents = idx[inside], lengths[inside], tangents[inside]
        vals = lengths[:, None] * sta.eval_sph_harmonics(2, tangents)
        flat = np.ravel_multi_index(idx.T, grid.dims)
        for m in range(5):
            acc.reshape(-1, 5)[:, m] += np.bincount(flat, weights=vals[:, m].real, minlength=grid.nvox)
            acc.reshape(-1, 5)[:, m] += 1j * np.bincount(flat, weights=vals[:, m].imag, minlength=grid.nvox)
    return acc


def normalize_label(y: np.ndarray, eps: float) -> np.ndarray:
    mag = np.sqrt(np.sum(np.abs(y) ** 2, axis=-1, keepdims=True))
    return y / (mag + eps)


def rasterize_label(streamlines, grid: VolumeGrid, eps: float | None = None) -> TractLabel:
    """Order-2 tract label: density of ``Y2`` of the tangents, normalized by ``|y| + eps``."""
    if eps is None:
        eps = default_epsilon(grid)
    if not eps > 0:
        raise InvalidArgumentError("epsilon must be positive")
    raw = splat_streamlines(streamlines, grid)
    return TractLabel(STField(grid, normalize_label(raw, eps)), float(eps), STField(grid, raw))


# ---------------------------------------------------------------------------
# Waypoint selection


def _passes(points: np.ndarray, spec: WaypointSpec) -> bool:
    start = 0
    for x, t in zip(spec.points, spec.tolerances):
        d = np.linalg.norm(points[start:] - x, axis=1)
        hit = np.flatnonzero(d < t)
        if len(hit) == 0:
            return False
        # earliest hit leaves the most room for the remaining waypoints
        start += int(hit[0])
    return True


def select_tract(streamlines, spec: WaypointSpec) -> list:
    """Streamlines visiting every waypoint within tolerance, in order, in either direction."""
    out = []
    for s in streamlines:
        p = _as_points(s)
        if _passes(p, spec) or _passes(p[::-1], spec):
            out.append(s)
    return out


def load_waypoint_table() -> dict:
    """The bundled 12-tract template table, ``{name: WaypointSpec or None}``."""
    text = resources.files("tractfilter").joinpath("data/tract_waypoints.json").read_text()
    raw = json.loads(text)["tracts"]
    out = {}
    for name, rows in raw.items():
        if rows is None:
            out[name] = None
        else:
            a = np.asarray(rows, dtype=float)
            out[name] = WaypointSpec(a[:, :3], a[:, 3])
    return out


# ---------------------------------------------------------------------------
# Phantoms


@dataclass(frozen=True)
class Bundle:
    centerline: np.ndarray  # (P, 3) world mm, densely sampled
    radius: float
    d_par: float = D_PAR
    d_perp: float = D_PERP

    def __post_init__(self):
        c = np.asarray(self.centerline, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3 or len(c) < 2:
            raise InvalidArgumentError("a centerline needs at least two points")
        if not self.radius > 0:
            raise InvalidArgumentError("bundle radius must be positive")
        object.__setattr__(self, "centerline", c)

    @classmethod
    def straight(cls, start, end, radius, samples: int = 64, **kw) -> "Bundle":
        t = np.linspace(0.0, 1.0, samples)[:, None]
        return cls(np.asarray(start, float) * (1 - t) + np.asarray(end, float) * t, radius, **kw)

    @classmethod
    def arc(cls, center, radius_of_curvature, normal, start_dir, angle, radius, samples: int = 96, **kw) -> "Bundle":
        """Circular arc in the plane with the given normal, starting along ``start_dir``."""
        n = np.asarray(normal, float)
        n /= np.linalg.norm(n)
        u = np.asarray(start_dir, float)
        u = u - (u @ n) * n
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        phi = np.linspace(0.0, angle, samples)[:, None]
        pts = np.asarray(center, float) + radius_of_curvature * (np.cos(phi) * u + np.sin(phi) * v)
        return cls(pts, radius, **kw)


@dataclass(frozen=True)
class PhantomSpec:
    grid: VolumeGrid
    bundles: tuple
    gradients: np.ndarray
    bvals: np.ndarray
    sigma: float = 0.05  # noise level relative to s0
    seed: int = 0
    s0: float = 1000.0
    d_iso: float = D_ISO
    streamline_spacing: float = 1.0  # mm between ground-truth streamlines

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgumentError("noise sigma must be non-negative")
        if not self.streamline_spacing > 0:
            raise InvalidArgumentError("streamline spacing must be positive")
        object.__setattr__(self, "bundles", tuple(self.bundles))


def hemisphere_directions(n: int) -> np.ndarray:
    """``n`` roughly uniform unit vectors on the upper hemisphere (Fibonacci lattice)."""
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z**2)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def default_scheme(ndirs: int = 30, bval: float = 1000.0):
    g = hemisphere_directions(ndirs)
    return g, np.full(ndirs, bval)


def _nearest_on_polyline(X: np.ndarray, c: np.ndarray):
    """Distance and unit tangent of the closest centerline segment for each point."""
    seg = np.diff(c, axis=0)
    seglen2 = np.sum(seg**2, axis=1)
    best_d2 = np.full(len(X), np.inf)
    best_t = np.zeros((len(X), 3))
    for a, s, l2 in zip(c[:-1], seg, seglen2):
        u = np.clip(((X - a) @ s) / l2, 0.0, 1.0)
        d2 = np.sum((X - a - u[:, None] * s) ** 2, axis=1)
        closer = d2 < best_d2
        best_d2[closer] = d2[closer]
        best_t[closer] = s / math.sqrt(l2)
    return np.sqrt(best_d2), best_t


def partial_volume(dist: np.ndarray, radius: float, voxel: float) -> np.ndarray:
    """Linear ramp of width one voxel across the tube wall."""
    return np.clip((radius - dist) / voxel + 0.5, 0.0, 1.0)


def _frames(c: np.ndarray):
    """Rotation-minimizing frames along a centerline."""
    t = np.gradient(c, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    ref = np.eye(3)[int(np.argmin(np.abs(t[0])))]
    n1 = [np.cross(t[0], ref)]
    n1[0] /= np.linalg.norm(n1[0])
    for i in range(1, len(c)):
        v = n1[-1] - (n1[-1] @ t[i]) * t[i]
        n1.append(v / np.linalg.norm(v))
    n1 = np.array(n1)
    return t, n1, np.cross(t, n1)


def bundle_streamlines(b: Bundle, spacing: float = 1.0) -> list[Streamline]:
    """Centerline-parallel streamlines on a square cross-section lattice inside the tube."""
    _, n1, n2 = _frames(b.centerline)
    k = int(math.floor(b.radius / spacing))
    offs = [
        (u * spacing, v * spacing)
        for u in range(-k, k + 1)
        for v in range(-k, k + 1)
        if (u * u + v * v) * spacing**2 <= b.radius**2
    ]
    return [Streamline(b.centerline + u * n1 + v * n2) for u, v in offs]


def phantom_signal(spec: PhantomSpec):
    """Noise-free ``(b0, dwi)`` volumes for the phantom geometry."""
    grid = spec.grid
    X = grid.world_coords().reshape(-1, 3)
    g = np.asarray(spec.gradients, float)
    b = np.asarray(spec.bvals, float)
    voxel = float(np.mean(grid.spacing))
    fracs, sigs = [], []
    for bd in spec.bundles:
        dist, tang = _nearest_on_polyline(X, bd.centerline)
        f = partial_volume(dist, bd.radius, voxel)
        cos2 = (tang @ g.T) ** 2
        sigs.append(np.exp(-b * (bd.d_perp + (bd.d_par - bd.d_perp) * cos2)))
        fracs.append(f)
    iso = np.exp(-b * spec.d_iso)[None, :]
    if fracs:
        F = np.stack(fracs)
        tot = F.sum(axis=0)
        # overlapping tubes share the voxel in proportion to their fractions
        scale = np.where(tot > 1.0, 1.0 / np.maximum(tot, 1e-300), 1.0)
        F = F * scale
        f_iso = 1.0 - F.sum(axis=0)
        dwi = f_iso[:, None] * iso + np.einsum("kv,kvg->vg", F, np.stack(sigs))
    else:
        dwi = np.broadcast_to(iso, (len(X), len(b))).copy()
    dwi = spec.s0 * dwi
    b0 = np.full(len(X), spec.s0)
    return b0.reshape(grid.dims), dwi.reshape(grid.dims + (len(b),))


def rician(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return signal.copy()
    n1 = rng.normal(0.0, sigma, size=signal.shape)
    n2 = rng.normal(0.0, sigma, size=signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2**2)


def generate_phantom(spec: PhantomSpec):
    """``(DwiVolume, ground-truth streamlines)``; deterministic given ``spec.seed``."""
    b0, dwi = phantom_signal(spec)
    rng = np.random.default_rng(spec.seed)
    sigma = spec.sigma * spec.s0
    b0 = rician(b0, sigma, rng)
    dwi = rician(dwi, sigma, rng)
    vol = DwiVolume(spec.grid, b0, spec.gradients, spec.bvals, dwi)
    lines = [s for bd in spec.bundles for s in bundle_streamlines(bd, spec.streamline_spacing)]
    return vol, lines


def crossing_bundles(grid: VolumeGrid, rng: np.random.Generator, radius_range=(4.0, 6.0), curved: bool = True) -> list[Bundle]:
    """Two bundles crossing near the center with random orientation and radius.

    One is straight; the other is a gentle arc when ``curved``.  Both span
    the whole field of view.
    """
    c = grid.center
    ext = 0.5 * np.asarray(grid.dims) * np.asarray(grid.spacing)
    half = float(np.linalg.norm(ext))
    d1 = rng.normal(size=3)
    d1 /= np.linalg.norm(d1)
    # second direction 50..90 degrees away from the first
    ang = math.radians(rng.uniform(50.0, 90.0))
    w = np.cross(d1, rng.normal(size=3))
    w /= np.linalg.norm(w)
    d2 = math.cos(ang) * d1 + math.sin(ang) * w
    shift = rng.uniform(-0.15, 0.15, size=(2, 3)) * ext
    r1, r2 = rng.uniform(*radius_range, size=2)
    b1 = Bundle.straight(c + shift[0] - half * d1, c + shift[0] + half * d1, r1)
    if not curved:
        b2 = Bundle.straight(c + shift[1] - half * d2, c + shift[1] + half * d2, r2)
        return [b1, b2]
    # arc through the center tangent to d2, bending in a random perpendicular plane
    roc = rng.uniform(2.0, 3.0) * half
    bend = np.cross(d2, rng.normal(size=3))
    bend /= np.linalg.norm(bend)
    mid = c + shift[1]
    center = mid + roc * bend
    span = 2.2 * half / roc
    start = -bend  # direction from arc center to the midpoint
    u = math.cos(-span / 2) * start + math.sin(-span / 2) * d2
    normal = np.cross(start, d2)
    b2 = Bundle.arc(center, roc, normal, u, span, r2)
    return [b1, b2]


def random_crossing_spec(seed: int, grid: VolumeGrid | None = None, sigma: float = 0.05, noise_seed: int | None = None, ndirs: int = 30, bval: float = 1000.0, curved: bool = True) -> PhantomSpec:
    """Crossing-bundle phantom whose geometry depends on ``seed`` only."""
    if grid is None:
        grid = VolumeGrid((48, 48, 48), (2.0, 2.0, 2.0))
    rng = np.random.default_rng([seed, 7])
    bundles = crossing_bundles(grid, rng, curved=curved)
    g, b = default_scheme(ndirs, bval)
    return PhantomSpec(grid, tuple(bundles), g, b, sigma=sigma, seed=seed if noise_seed is None else noise_seed)


def bundle_mask(spec: PhantomSpec, index: int | None = None) -> np.ndarray:
    """Voxels whose center lies inside any (or the given) bundle tube."""
    X = spec.grid.world_coords().reshape(-1, 3)
    mask = np.zeros(len(X), dtype=bool)
    sel = spec.bundles if index is None else [spec.bundles[index]]
    for bd in sel:
        d, _ = _nearest_on_polyline(X, bd.centerline)
        mask |= d <= bd.radius
    return mask.reshape(spec.grid.dims)


def bundle_tangents(spec: PhantomSpec):
    """Per-voxel tangent of the nearest containing bundle and containment mask."""
    X = spec.grid.world_coords().reshape(-1, 3)
    best = np.full(len(X), np.inf)
    tang = np.zeros((len(X), 3))
    for bd in spec.bundles:
        d, t = _nearest_on_polyline(X, bd.centerline)
        closer = (d <= bd.radius) & (d < best)
        best[closer] = d[closer]
        tang[closer] = t[closer]
    inside = np.isfinite(best)
    return tang.reshape(spec.grid.dims + (3,)), inside.reshape(spec.grid.dims)
