import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_field, y2
from tractfilter import fields, sta
from tractfilter.errors import InvalidArgumentError, UndefinedICCError
from tractfilter.fields import STField, VolumeGrid
from tractfilter.tracking import TrackingParams, apparent_volume, dice, icc, interpolate, track


# ---------------------------------------------------------------------------
# Metrics


def test_icc_examples():
    assert icc([0, 2], [2, 0]) == pytest.approx(-1.0)
    assert icc([1, 2, 3], [1, 2, 3]) == 1.0
    with pytest.raises(UndefinedICCError):
        icc([1, 1], [1, 1])
    with pytest.raises(InvalidArgumentError):
        icc([1], [1])
    with pytest.raises(InvalidArgumentError):
        icc([1, 2], [1, 2, 3])


def _icc_oracle(x1, x2):
    x = np.stack([x1, x2])
    mu = x.mean()
    return 1 - np.sum((x[0] - x[1]) ** 2) / np.sum((x - mu) ** 2)


@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=20),
    st.floats(-50, 50),
    st.floats(0.1, 10),
    st.integers(0, 2**31),
)
@settings(max_examples=100, deadline=None)
def test_icc_properties(base, shift, scale, seed):
    x1 = np.asarray(base)
    x2 = x1 + np.random.default_rng(seed).normal(size=len(x1))
    if np.ptp(np.concatenate([x1, x2])) < 1e-6:
        return
    v = icc(x1, x2)
    assert v <= 1.0
    assert v == pytest.approx(_icc_oracle(x1, x2), abs=1e-9)
    assert icc(x1 * scale + shift, x2 * scale + shift) == pytest.approx(v, abs=1e-8)
    assert icc(x2, x1) == pytest.approx(v, abs=1e-12)


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    assert dice(a, a) == 1.0
    b = a.copy()
    b[0, :2] = True
    c = a.copy()
    c[0, 1:3] = True
    assert dice(b, b) == 1.0
    assert dice(b, c) == pytest.approx(0.5)
    assert dice(b, a) == 0.0
    with pytest.raises(InvalidArgumentError):
        dice(a, np.zeros((3, 3), bool))


def test_apparent_volume_examples(rng):
    grid = VolumeGrid((3, 3, 3), (2.0, 2.0, 2.0))
    assert apparent_volume(STField.zeros(grid, 2)) == 0.0
    d = np.zeros(grid.dims + (5,), complex)
    d[1, 1, 1] = y2([0, 0, 1])
    assert apparent_volume(STField(grid, d)) == pytest.approx(8.0 * 5 / (4 * math.pi))
    f = random_field(rng, 2, (4, 4, 4))
    D = sta.wigner_d(2, sta.Rotation.random(rng))
    assert apparent_volume(f.with_data(f.data @ D.T)) == pytest.approx(apparent_volume(f))
    assert apparent_volume(f * 3.0) == pytest.approx(9 * apparent_volume(f))


# ---------------------------------------------------------------------------
# Tracking


def _uniform(direction, dims=(12, 12, 12), spacing=(1.0, 1.0, 1.0)):
    grid = VolumeGrid(dims, spacing)
    v = y2(np.asarray(direction, float) / np.linalg.norm(direction))
    return STField(grid, np.broadcast_to(v, grid.dims + (5,)).copy())


def test_interpolate_at_voxel_centers(rng):
    f = random_field(rng, 2, (5, 6, 7))
    idx = np.array([[0, 0, 0], [4, 5, 6], [2, 3, 1]], float)
    assert np.allclose(interpolate(f, idx), f.data[tuple(idx.T.astype(int))])
    mid = interpolate(f, np.array([[0.5, 0, 0]]))
    assert np.allclose(mid, 0.5 * (f.data[0, 0, 0] + f.data[1, 0, 0]))


def test_straight_field_gives_straight_lines():
    y = _uniform((0, 0, 1))
    lines = track(y, TrackingParams(step=0.5, seeds=np.array([[5.0, 5.0, 5.0]])))
    assert len(lines) == 1
    p = lines[0]
    assert np.allclose(p[:, :2], 5.0)
    assert p[:, 2].min() >= -0.5 and p[:, 2].max() <= 11.5
    assert p[:, 2].max() - p[:, 2].min() >= 11.0 - 0.5
    assert np.allclose(np.diff(p[:, 2]), 0.5)


def test_zero_field_no_streamlines():
    y = STField.zeros(VolumeGrid((8, 8, 8)), 2)
    assert track(y, TrackingParams(seeds=100)) == []
    assert track(y, TrackingParams(seeds=np.array([[3.0, 3.0, 3.0]]))) == []


def test_threshold_stops_tracking():
    y = _uniform((1, 0, 0))
    y.data[6:] *= 0.1
    lines = track(y, TrackingParams(step=0.5, threshold=0.5, seeds=np.array([[2.0, 5.0, 5.0]])))
    assert lines[0][:, 0].max() < 6.0


def test_circular_field():
    n, R, c = 40, 10.0, 19.5
    grid = VolumeGrid((n, n, 5))
    idx = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(5), indexing="ij"), axis=-1).astype(float)
    t = np.stack([-(idx[..., 1] - c), idx[..., 0] - c, np.zeros(idx.shape[:3])], axis=-1)
    t /= np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    y = STField(grid, y2(t.reshape(-1, 3)).reshape(grid.dims + (5,)))
    lines = track(y, TrackingParams(step=0.1, seeds=np.array([[c + R, c, 2.0]]), max_steps=400))
    p = lines[0]
    r = np.hypot(p[:, 0] - c, p[:, 1] - c)
    assert len(p) > 600
    assert np.max(np.abs(r - R)) <= 0.05 * R


@pytest.mark.parametrize("qi", [1, 7, 13, 22])
def test_tracking_rotation_equivariance(qi, rng):
    y = fields.convolve_radial(random_field(rng, 2, (11, 11, 11)), fields.RadialKernel("gaussian", 2.0))
    seeds = y.grid.center + rng.uniform(-3, 3, size=(5, 3))
    Q = fields.grid_rotations()[qi]
    yq = fields.transform_field(y, Q)
    c = y.grid.center
    a = track(y, TrackingParams(step=0.5, seeds=seeds, max_steps=30))
    b = track(yq, TrackingParams(step=0.5, seeds=(seeds - c) @ Q.T + c, max_steps=30))
    assert len(a) == len(b)
    for la, lb in zip(a, b):
        mapped = (la - c) @ Q.T + c
        d = np.linalg.norm(mapped[:, None] - lb[None], axis=-1)
        assert max(d.min(axis=0).max(), d.min(axis=1).max()) <= 0.5


def test_tracking_deterministic():
    y = _uniform((1, 1, 0))
    a = track(y, TrackingParams(seeds=20, seed=4))
    b = track(y, TrackingParams(seeds=20, seed=4))
    assert len(a) == 20 and all(np.array_equal(u, v) for u, v in zip(a, b))
    c = track(y, TrackingParams(seeds=20, seed=5))
    assert not np.array_equal(a[0], c[0])


def test_tracking_respects_spacing():
    y = _uniform((0, 0, 1), spacing=(2.0, 2.0, 2.0))
    p = track(y, TrackingParams(step=1.0, seeds=np.array([[10.0, 10.0, 10.0]])))[0]
    assert np.allclose(np.diff(p[:, 2]), 1.0)  # world mm


def test_tracking_validation():
    y = _uniform((0, 0, 1))
    with pytest.raises(InvalidArgumentError):
        track(y, TrackingParams(step=0.0))
    with pytest.raises(InvalidArgumentError):
        track(y, TrackingParams(step=2.0))
    with pytest.raises(InvalidArgumentError):
        track(STField.zeros(y.grid, 0), TrackingParams())
