"""Hierarchical covariant filter: pyramid, forward pass and layer-wise training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import features as fb
from .errors import CorruptModelError, InvalidArgumentError, RankDeficiencyError
from .fields import (
    PYRAMID_SMOOTHING,
    STField,
    presmooth_field,
    resample,
    resample_onto,
    window,
    window_weights,
)
from .tracking import dice

DEFAULT_SCALES = (-2, -1, 0)
DEFAULT_GAMMA = 2.0
DEFAULT_LAMBDA = 1e-3
DEFAULT_MARGIN = 3
# voxels whose window weight is below this are left out of the fit
TRAIN_WINDOW_MIN = 0.5
SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# Pyramid


def pyramid_level(f: STField, s: int, gamma: float = DEFAULT_GAMMA) -> STField:
    factor = gamma ** (-s)
    sigma = PYRAMID_SMOOTHING * factor
    if factor == 1:
        return presmooth_field(f, sigma)
    return resample(f, factor, "down", presmooth=sigma)


def build_pyramid(data: dict, scales=DEFAULT_SCALES, gamma: float = DEFAULT_GAMMA) -> dict:
    """``{s: {j: STField}}`` from finest-scale data ``{j: STField}``.

    Every level is built directly from the finest grid: presmoothing with
    ``0.75 * gamma**-s`` fine voxels, then decimation by ``gamma**-s``.
    """
    if any(s > 0 for s in scales):
        raise InvalidArgumentError("scales must be <= 0 (0 is the input resolution)")
    return {s: {j: pyramid_level(f, s, gamma) for j, f in data.items()} for s in sorted(scales)}


# ---------------------------------------------------------------------------
# Model


@dataclass
class ScaleWeights:
    config: fb.ScaleConfig
    weights: np.ndarray  # on power-normalized columns: [kappa] + alpha + beta
    powers: np.ndarray
    residual: float = float("nan")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.powers = np.asarray(self.powers, dtype=float)

    @property
    def ncols(self) -> int:
        return len(self.weights)

    def split(self, previous: bool):
        """``(kappa, alpha, beta)`` on normalized columns."""
        w = self.weights
        if previous:
            return float(w[0]), w[1 : 1 + self.config.N], w[1 + self.config.N :]
        return None, w[: self.config.N], w[self.config.N :]


@dataclass
class FilterModel:
    scales: list[ScaleWeights]
    gamma: float = DEFAULT_GAMMA
    lam: float = DEFAULT_LAMBDA
    label_name: str = "tract"
    detect_threshold: float = 0.0
    margin: int = DEFAULT_MARGIN
    lmax: int = 2
    shell: float | None = None

    @property
    def scale_indices(self) -> list[int]:
        return [sw.config.s for sw in self.scales]

    def validate(self):
        powers_ok = all(np.all(sw.powers > 0) for sw in self.scales)
        if not powers_ok:
            raise CorruptModelError("feature powers must be positive")
        for i, sw in enumerate(self.scales):
            expect = ncolumns(sw.config, previous=i > 0)
            if sw.ncols != expect or len(sw.powers) != expect:
                raise CorruptModelError(
                    f"scale {sw.config.s}: {sw.ncols} weights for {expect} feature columns"
                )
        if self.scales and self.scales[0].config.N_s:
            raise CorruptModelError("the lowest scale cannot have link features")


def ncolumns(config: fb.ScaleConfig, previous: bool) -> int:
    return (1 if previous else 0) + config.N + (config.N_s if previous else 0)


def iter_columns(config: fb.ScaleConfig, data: dict, y_up: STField | None):
    """Yield the feature columns of one scale as ``(X, Y, Z, 5)`` arrays.

    Order: ``y_up`` (the kappa term), ``|y_up| * f_quad`` for each quad spec,
    then the link features.  Without a previous output only ``f_quad``.
    """
    lin = fb.compute_linear_features(data, config.linear)
    if y_up is None:
        yield from fb.iter_quad_features(lin, config.quad_specs)
        return
    yield y_up.data
    mag = y_up.magnitude()[..., None]
    for f in fb.iter_quad_features(lin, config.quad_specs):
        yield mag * f
    if config.link_specs:
        powers = fb.spherical_powers(y_up)
        yield from fb.iter_link_features(lin, powers, config.link_specs)


def scale_forward(sw: ScaleWeights, data: dict, y_up: STField | None) -> STField:
    """``sum_i w_i col_i`` for the columns of :func:`iter_columns`.

    Computed without materializing the columns: ``|y_up|`` is common to all
    quad columns and the readout is linear (see ``weighted_readout``).
    """
    config = sw.config
    previous = y_up is not None
    if sw.ncols != ncolumns(config, previous):
        raise CorruptModelError(f"scale {config.s}: weights do not match feature columns")
    grid = next(iter(data.values())).grid
    kappa, alpha, beta = ScaleWeights(config, sw.weights / sw.powers, sw.powers).split(previous)
    lin = fb.compute_linear_features(data, config.linear) if np.any(alpha) or np.any(beta) else None
    quad = fb.weighted_readout(grid, fb.quad_entries(lin, config.quad_specs, alpha) if lin else ())
    if not previous:
        return STField(grid, quad)
    out = kappa * y_up.data + y_up.magnitude()[..., None] * quad
    if config.link_specs and np.any(beta):
        powers = fb.spherical_powers(y_up)
        out = out + fb.weighted_readout(grid, fb.link_entries(lin, powers, config.link_specs, beta))
    return STField(grid, out)


def upsample_to(y: STField, target_grid) -> STField:
    return resample_onto(y, target_grid)


def forward(model: FilterModel, pyramid: dict, return_levels: bool = False):
    """Run every scale coarse to fine; returns the finest-scale order-2 field."""
    model.validate()
    missing = [s for s in model.scale_indices if s not in pyramid]
    if missing:
        raise InvalidArgumentError(f"pyramid lacks scales {missing}")
    y = None
    levels = {}
    for sw in model.scales:
        data = pyramid[sw.config.s]
        grid = next(iter(data.values())).grid
        y_up = None if y is None else upsample_to(y, grid)
        y = scale_forward(sw, data, y_up)
        levels[sw.config.s] = y
    return (y, levels) if return_levels else y


# ---------------------------------------------------------------------------
# Ridge regression


def real_rows(arr: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Real coordinates of order-2 tensors with the same squared norm.

    For fields with the reality symmetry, ``m = -1, -2`` carry no extra
    information; ``[Re a0, sqrt2 Re a1, sqrt2 Im a1, sqrt2 Re a2, sqrt2 Im a2]``.
    """
    v = arr[mask] if mask is not None else arr.reshape(-1, arr.shape[-1])
    out = np.empty((v.shape[0], 5))
    out[:, 0] = v[:, 2].real
    out[:, 1] = SQRT2 * v[:, 3].real
    out[:, 2] = SQRT2 * v[:, 3].imag
    out[:, 3] = SQRT2 * v[:, 4].real
    out[:, 4] = SQRT2 * v[:, 4].imag
    return out.reshape(-1)


def _ridge_from_gram(G: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise InvalidArgumentError("lambda must be non-negative")
    n = len(r)
    if n == 0:
        return np.zeros(0)
    A = G + lam * np.eye(n)
    if lam == 0:
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 1e-13 * max(ev[-1], np.finfo(float).tiny):
            raise RankDeficiencyError("normal equations are singular; use lambda > 0")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("normal equations are singular; use lambda > 0") from exc
    return scipy.linalg.cho_solve(factor, r)


def solve_ridge(F, Y, lam: float) -> np.ndarray:
    """Real ``w`` minimizing ``sum_m |Y_m - F_m w|^2 + lam |w|^2``.

    ``F`` is a sequence of complex ``(rows, N)`` matrices (one per spherical
    component) and ``Y`` the matching complex vectors.
    """
    F = [np.asarray(f) for f in F]
    Y = [np.asarray(y) for y in Y]
    if len(F) != len(Y) or any(f.shape[0] != y.shape[0] for f, y in zip(F, Y)):
        raise InvalidArgumentError("inconsistent system dimensions")
    A = np.concatenate([np.concatenate([f.real, f.imag]) for f in F])
    b = np.concatenate([np.concatenate([y.real, y.imag]) for y in Y])
    return _ridge_from_gram(A.T @ A, A.T @ b, lam)


def normalized_ridge(G: np.ndarray, r: np.ndarray, lam: float):
    """Ridge on power-normalized columns; returns ``(weights, powers)``."""
    powers = np.sqrt(np.clip(np.diag(G), 0.0, None))
    powers[powers == 0] = 1.0
    Gn = G / np.outer(powers, powers)
    rn = r / powers
    return _ridge_from_gram(Gn, rn, lam), powers


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingSample:
    pyramid: dict  # {s: {j: STField}}
    labels: dict  # {s: STField}
    masks: dict  # {s: bool array}


def prepare_sample(data: dict, label: STField, scales=DEFAULT_SCALES, gamma: float = DEFAULT_GAMMA, margin: int = DEFAULT_MARGIN) -> TrainingSample:
    """Window the finest-scale data and build data/label/mask pyramids."""
    pyr = build_pyramid(window_data(data, margin), scales, gamma)
    labels = {s: pyramid_level(label, s, gamma) for s in sorted(scales)}
    grid = label.grid
    w = STField(grid, window_weights(grid, margin)[..., None].astype(complex))
    masks = {}
    for s in sorted(scales):
        target = next(iter(pyr[s].values())).grid
        ws = w if target == grid else resample_onto(w, target)
        masks[s] = ws.data[..., 0].real >= TRAIN_WINDOW_MIN
    return TrainingSample(pyr, labels, masks)


def window_data(data: dict, margin: int) -> dict:
    return {j: window(f, margin) for j, f in data.items()}


@dataclass
class FitResult:
    model: FilterModel
    predictions: list  # finest-scale STField per sample
    label_energy: list = field(default_factory=list)


def _accumulate(config, samples, level_inputs, s, previous):
    n = ncolumns(config, previous)
    G = np.zeros((n, n))
    r = np.zeros(n)
    yy = 0.0
    for smp, y_up in zip(samples, level_inputs):
        mask = smp.masks[s]
        target = real_rows(smp.labels[s].data, mask)
        A = np.empty((target.size, n))
        for i, col in enumerate(iter_columns(config, smp.pyramid[s], y_up)):
            A[:, i] = real_rows(col, mask)
        G += A.T @ A
        r += A.T @ target
        yy += float(target @ target)
        del A
    return G, r, yy


def fit_filter(
    samples: list[TrainingSample],
    configs: list[fb.ScaleConfig],
    lam: float = DEFAULT_LAMBDA,
    gamma: float = DEFAULT_GAMMA,
    label_name: str = "tract",
    margin: int = DEFAULT_MARGIN,
    detect_threshold: float | None = None,
) -> FitResult:
    """Layer-wise training from the coarsest scale to the finest.

    At each scale the normal equations are accumulated over the masked voxels
    of every sample, the columns are normalized by their power and the ridge
    system is solved; the resulting predictions are upsampled to feed the
    next scale.
    """
    if not samples:
        raise InvalidArgumentError("training needs at least one sample")
    configs = sorted(configs, key=lambda c: c.s)
    if configs[0].N_s:
        raise InvalidArgumentError("the coarsest scale cannot use link features")
    model = FilterModel([], gamma=gamma, lam=lam, label_name=label_name, margin=margin)
    preds = [None] * len(samples)
    for level, config in enumerate(configs):
        s = config.s
        previous = level > 0
        if previous:
            y_ups = [upsample_to(p, next(iter(smp.pyramid[s].values())).grid) for p, smp in zip(preds, samples)]
        else:
            y_ups = [None] * len(samples)
        G, r, yy = _accumulate(config, samples, y_ups, s, previous)
        w, powers = normalized_ridge(G, r, lam)
        wr = w / powers
        resid = yy - 2 * wr @ r + wr @ G @ wr
        sw = ScaleWeights(config, w, powers, residual=float(resid / yy) if yy > 0 else 0.0)
        model.scales.append(sw)
        preds = [scale_forward(sw, smp.pyramid[s], y_up) for smp, y_up in zip(samples, y_ups)]
    finest = configs[-1].s
    if detect_threshold is None:
        detect_threshold = choose_threshold(preds, [smp.labels[finest] for smp in samples], [smp.masks[finest] for smp in samples])
    model.detect_threshold = float(detect_threshold)
    energies = [smp.labels[finest].energy() for smp in samples]
    return FitResult(model, preds, energies)


def train(samples, configs, lam: float = DEFAULT_LAMBDA, **kwargs) -> FilterModel:
    return fit_filter(samples, configs, lam, **kwargs).model


def choose_threshold(preds, labels, masks, ncandidates: int = 200) -> float:
    """Threshold on ``|y|`` maximizing mean Dice against ``|label| > 0.5``."""
    mags = [p.magnitude() for p in preds]
    top = max(float(m.max()) for m in mags)
    if top <= 0:
        return 0.0
    truth = [(lab.magnitude() > 0.5) & m for lab, m in zip(labels, masks)]
    best, best_t = -1.0, 0.0
    for t in np.linspace(0.0, top, ncandidates + 1)[1:]:
        score = float(np.mean([dice((m >= t) & mk, tr) for m, mk, tr in zip(mags, masks, truth)]))
        if score > best:
            best, best_t = score, float(t)
    return best_t
