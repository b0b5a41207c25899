"""Euler streamline tracking on order-2 fields and reliability metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sta
from .errors import InvalidArgumentError, UndefinedICCError
from .fields import STField


@dataclass(frozen=True)
class TrackingParams:
    step: float = 0.5  # mm
    threshold: float = 0.0
    seeds: int | np.ndarray = 1000  # count or explicit (S, 3) world positions
    max_steps: int = 1000
    seed: int = 0

    def validate(self, grid):
        if not self.step > 0:
            raise InvalidArgumentError("step must be positive")
        if self.step > min(grid.spacing) + 1e-12:
            raise InvalidArgumentError("step must not exceed the voxel size")
        if self.threshold < 0 or self.max_steps < 1:
            raise InvalidArgumentError("threshold must be >= 0 and max_steps >= 1")


def interpolate(y: STField, idx: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of all channels at fractional voxel indices ``(S, 3)``."""
    dims = np.array(y.grid.dims)
    p = np.clip(idx, 0, dims - 1)
    i0 = np.minimum(np.floor(p).astype(int), dims - 1)
    i1 = np.minimum(i0 + 1, dims - 1)
    t = p - i0
    out = np.zeros((len(idx), y.data.shape[-1]), dtype=y.data.dtype)
    for cx in (0, 1):
        wx = t[:, 0] if cx else 1 - t[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = t[:, 1] if cy else 1 - t[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = t[:, 2] if cz else 1 - t[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                out += (wx * wy * wz)[:, None] * y.data[ix, iy, iz]
    return out


def draw_seeds(y: STField, params: TrackingParams) -> np.ndarray:
    """Seed positions (world mm): uniform over suprathreshold voxels, jittered inside each."""
    if not np.isscalar(params.seeds):
        return np.asarray(params.seeds, dtype=float).reshape(-1, 3)
    mag = y.magnitude()
    cand = np.argwhere(mag >= params.threshold) if params.threshold > 0 else np.argwhere(mag > 0)
    if len(cand) == 0 or params.seeds <= 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(params.seed)
    pick = cand[rng.integers(0, len(cand), size=int(params.seeds))]
    jitter = rng.uniform(-0.5, 0.5, size=pick.shape)
    return y.grid.index_to_world(pick + jitter)


def _inside(idx: np.ndarray, dims) -> np.ndarray:
    d = np.asarray(dims)
    return np.all((idx >= -0.5) & (idx <= d - 0.5), axis=1)


def _trace(y: STField, start_idx: np.ndarray, start_dir: np.ndarray, params: TrackingParams, scale: np.ndarray):
    """March all seeds in lockstep; returns per-seed lists of index positions."""
    n = len(start_idx)
    pos = start_idx.copy()
    direction = start_dir.copy()
    active = np.ones(n, dtype=bool)
    paths = [[pos[i].copy()] for i in range(n)]
    for _ in range(params.max_steps):
        if not active.any():
            break
        ids = np.flatnonzero(active)
        v = interpolate(y, pos[ids])
        d, mag = sta.principal_directions(v)
        ok = mag >= max(params.threshold, 1e-300)
        # axial sign: keep turning <= 90 degrees
        flip = np.sum(d * direction[ids], axis=1) < 0
        d[flip] *= -1
        stop = ids[~ok]
        active[stop] = False
        ids, d = ids[ok], d[ok]
        newpos = pos[ids] + params.step * d / scale
        inside = _inside(newpos, y.grid.dims)
        active[ids[~inside]] = False
        ids, d, newpos = ids[inside], d[inside], newpos[inside]
        pos[ids] = newpos
        direction[ids] = d
        for k, i in enumerate(ids):
            paths[i].append(newpos[k].copy())
    return paths


def track(y: STField, params: TrackingParams) -> list[np.ndarray]:
    """Bidirectional fixed-step Euler integration along the principal direction.

    Returns streamlines as ``(P, 3)`` arrays of world coordinates (mm).
    Tracking stops below the magnitude threshold, outside the grid, or after
    ``max_steps`` steps in each direction.
    """
    if y.j != 2:
        raise InvalidArgumentError("tracking needs an order-2 field")
    params.validate(y.grid)
    seeds = draw_seeds(y, params)
    if len(seeds) == 0:
        return []
    scale = np.asarray(y.grid.spacing)
    idx = y.grid.world_to_index(seeds)
    v = interpolate(y, idx)
    d0, mag0 = sta.principal_directions(v)
    keep = (mag0 >= params.threshold) & (mag0 > 0) & _inside(idx, y.grid.dims)
    idx, d0 = idx[keep], d0[keep]
    fwd = _trace(y, idx, d0, params, scale)
    bwd = _trace(y, idx, -d0, params, scale)
    lines = []
    for f, b in zip(fwd, bwd):
        pts = np.array(b[::-1] + f[1:])
        if len(pts) >= 2:
            lines.append(y.grid.index_to_world(pts))
    return lines


def apparent_volume(y: STField) -> float:
    """Integrated squared magnitude, ``sum |y|^2 * voxel volume``."""
    return float(np.sum(np.abs(y.data) ** 2) * y.grid.voxel_volume)


def icc(x1, x2) -> float:
    """``1 - sum_i (x1_i - x2_i)^2 / sum_ij (x^j_i - mean)^2`` with the pooled mean."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 1 or len(x1) < 2:
        raise InvalidArgumentError("ICC needs two equal-length vectors of at least two values")
    pooled = np.concatenate([x1, x2])
    denom = np.sum((pooled - pooled.mean()) ** 2)
    if denom <= 0:
        raise UndefinedICCError("pooled variance is zero")
    return float(1.0 - np.sum((x1 - x2) ** 2) / denom)


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgumentError("masks live on different grids")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
