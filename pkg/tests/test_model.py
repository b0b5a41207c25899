import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err, smooth_field
from tractfilter import features as fb
from tractfilter import model as mdl
from tractfilter.errors import CorruptModelError, InvalidArgumentError, RankDeficiencyError
from tractfilter.fields import RadialKernel, STField, VolumeGrid

G1 = RadialKernel("gaussian", 1.0)


# ---------------------------------------------------------------------------
# Ridge


def _dense_oracle(F, Y, lam):
    # stacked least squares [A; sqrt(lam) I] w = [b; 0]
    A = np.concatenate([np.concatenate([f.real, f.imag]) for f in F])
    b = np.concatenate([np.concatenate([y.real, y.imag]) for y in Y])
    n = A.shape[1]
    A = np.vstack([A, math.sqrt(lam) * np.eye(n)])
    b = np.concatenate([b, np.zeros(n)])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def test_ridge_matches_dense_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        F = [rng.normal(size=(50, 8)) + 1j * rng.normal(size=(50, 8)) for _ in range(5)]
        Y = [rng.normal(size=50) + 1j * rng.normal(size=50) for _ in range(5)]
        lam = 10 ** rng.uniform(-4, 1)
        w = mdl.solve_ridge(F, Y, lam)
        ref = _dense_oracle(F, Y, lam)
        assert np.max(np.abs(w - ref)) <= 1e-8 * max(1.0, np.abs(ref).max())


def test_ridge_orthonormal_columns():
    rng = np.random.default_rng(6)
    Q, _ = np.linalg.qr(rng.normal(size=(40, 6)))
    Y = rng.normal(size=40)
    w = mdl.solve_ridge([Q], [Y], 0.0)
    assert np.allclose(w, Q.T @ Y, atol=1e-12)
    lam = 0.5
    assert np.allclose(mdl.solve_ridge([Q], [Y], lam), Q.T @ Y / (1 + lam), atol=1e-12)


def test_ridge_limits_and_errors():
    rng = np.random.default_rng(7)
    F = [rng.normal(size=(30, 4))]
    Y = [rng.normal(size=30)]
    assert np.max(np.abs(mdl.solve_ridge(F, Y, 1e12))) < 1e-9
    dup = np.column_stack([F[0], F[0][:, :1]])
    with pytest.raises(RankDeficiencyError):
        mdl.solve_ridge([dup], Y, 0.0)
    assert np.all(np.isfinite(mdl.solve_ridge([dup], Y, 1e-3)))
    with pytest.raises(InvalidArgumentError):
        mdl.solve_ridge(F, Y, -1.0)
    with pytest.raises(InvalidArgumentError):
        mdl.solve_ridge(F, [Y[0][:10]], 1.0)
    assert np.all(mdl.solve_ridge(F, [np.zeros(30)], 1e-3) == 0)


def test_real_rows_preserve_norm(rng):
    from conftest import real_coeffs

    v = real_coeffs(rng, 2, (7,))
    assert np.isclose(np.sum(mdl.real_rows(v) ** 2), np.sum(np.abs(v) ** 2))


# ---------------------------------------------------------------------------
# Pyramid


def test_pyramid_constant_and_shapes():
    grid = VolumeGrid((33, 30, 20), (2.0, 2.0, 2.0))
    data = {0: STField(grid, np.full(grid.dims + (1,), 3.0))}
    pyr = mdl.build_pyramid(data, (-2, -1, 0))
    assert pyr[-1][0].grid.dims == (17, 15, 10)
    assert pyr[-2][0].grid.dims == (9, 8, 5)
    assert pyr[-1][0].grid.spacing == (4.0, 4.0, 4.0)
    for s in (-2, -1, 0):
        assert np.max(np.abs(pyr[s][0].data - 3.0)) < 1e-12
        assert np.allclose(pyr[s][0].grid.center, grid.center)


def test_pyramid_smoothing_reduces_energy():
    rng = np.random.default_rng(8)
    grid = VolumeGrid((24, 24, 24))
    f = STField(grid, rng.normal(size=grid.dims + (1,)))
    p0 = mdl.pyramid_level(f, 0)
    assert p0.energy() < f.energy()
    with pytest.raises(InvalidArgumentError):
        mdl.build_pyramid({0: f}, (1,))


# ---------------------------------------------------------------------------
# Training on hand-built samples


def _sample(rng, dims=(12, 12, 12), label=None):
    data = {0: smooth_field(rng, 0, dims, 1.0), 2: smooth_field(rng, 2, dims, 1.0)}
    grid = data[0].grid
    lab = label if label is not None else smooth_field(rng, 2, dims, 1.0)
    return mdl.TrainingSample({0: data}, {0: lab}, {0: np.ones(grid.dims, bool)})


def _cfg():
    return fb.enumerate_features([(G1, 1)], False)


def test_zero_labels_give_zero_weights(rng):
    smp = _sample(rng, label=STField.zeros(VolumeGrid((12, 12, 12)), 2))
    res = mdl.fit_filter([smp], [_cfg()], 1e-3)
    assert np.all(res.model.scales[0].weights == 0)
    assert res.model.detect_threshold == 0.0
    assert res.model.scales[0].residual == 0.0


def test_self_consistent_recovery(rng):
    cfg = _cfg()
    smp = _sample(rng)
    true = mdl.ScaleWeights(cfg, rng.normal(size=cfg.N), np.ones(cfg.N))
    smp.labels[0] = mdl.scale_forward(true, smp.pyramid[0], None)
    res = mdl.fit_filter([smp], [cfg], 1e-12)
    sw = res.model.scales[0]
    assert rel_err(sw.weights / sw.powers, true.weights) < 1e-6
    assert sw.residual < 1e-10


def test_training_predictions_match_forward(rng):
    cfg = _cfg()
    smp = _sample(rng)
    res = mdl.fit_filter([smp], [cfg], 1e-3)
    out = mdl.forward(res.model, smp.pyramid)
    assert np.array_equal(out.data, res.predictions[0].data)


def test_residual_monotone_in_lambda(rng):
    cfg = _cfg()
    smp = _sample(rng)
    res = [mdl.fit_filter([smp], [cfg], lam, detect_threshold=0.0).model.scales[0].residual for lam in (1e-6, 1e-3, 1e-1, 10.0)]
    assert all(a <= b + 1e-12 for a, b in zip(res, res[1:]))
    assert 0 <= res[0] <= 1


@given(st.floats(0.1, 10.0))
@settings(max_examples=5, deadline=None)
def test_prediction_invariant_to_input_scale(c):
    # quadratic features scale by c^2; normalized columns absorb that exactly
    rng = np.random.default_rng(9)
    cfg = _cfg()
    smp = _sample(rng)
    scaled = mdl.TrainingSample({0: {j: f * c for j, f in smp.pyramid[0].items()}}, smp.labels, smp.masks)
    a = mdl.fit_filter([smp], [cfg], 1e-3, detect_threshold=0.0)
    b = mdl.fit_filter([scaled], [cfg], 1e-3, detect_threshold=0.0)
    assert rel_err(b.predictions[0].data, a.predictions[0].data) < 1e-8
    assert rel_err(b.model.scales[0].powers, c**2 * a.model.scales[0].powers) < 1e-10


def test_two_scale_fit_and_forward(rng):
    grid = VolumeGrid((16, 16, 16))
    data = {0: smooth_field(rng, 0, grid.dims, 1.0), 2: smooth_field(rng, 2, grid.dims, 1.0)}
    label = smooth_field(rng, 2, grid.dims, 2.0)
    smp = mdl.prepare_sample(data, label, (-1, 0))
    cfgs = [fb.enumerate_features([(G1, 1)], False, s=-1), fb.enumerate_features([(G1, 0)], True, s=0)]
    res = mdl.fit_filter([smp], cfgs, 1e-3)
    m = res.model
    assert [sw.ncols for sw in m.scales] == [cfgs[0].N, 1 + cfgs[1].N + cfgs[1].N_s]
    assert np.array_equal(mdl.forward(m, smp.pyramid).data, res.predictions[0].data)
    assert m.scales[1].residual <= 1.0
    assert smp.masks[0].sum() < grid.nvox  # window border excluded


def test_zero_weights_give_zero_output(rng):
    cfg = _cfg()
    sw = mdl.ScaleWeights(cfg, np.zeros(cfg.N), np.ones(cfg.N))
    m = mdl.FilterModel([sw])
    smp = _sample(rng)
    assert np.all(mdl.forward(m, smp.pyramid).data == 0)


def test_model_validation():
    cfg = _cfg()
    with pytest.raises(CorruptModelError):
        mdl.FilterModel([mdl.ScaleWeights(cfg, np.zeros(cfg.N - 1), np.ones(cfg.N - 1))]).validate()
    with pytest.raises(CorruptModelError):
        mdl.FilterModel([mdl.ScaleWeights(cfg, np.zeros(cfg.N), np.zeros(cfg.N))]).validate()
    linked = fb.enumerate_features([(G1, 0)], True)
    with pytest.raises(CorruptModelError):
        mdl.FilterModel([mdl.ScaleWeights(linked, np.zeros(linked.N + linked.N_s), np.ones(linked.N + linked.N_s))]).validate()


def test_choose_threshold_examples():
    grid = VolumeGrid((4, 4, 4))
    lab = np.zeros(grid.dims + (5,), complex)
    lab[:2, :, :, 2] = 1.0
    pred = lab * 0.3
    t = mdl.choose_threshold([STField(grid, pred)], [STField(grid, lab)], [np.ones(grid.dims, bool)])
    assert 0 < t <= 0.3
    assert mdl.choose_threshold([STField.zeros(grid, 2)], [STField(grid, lab)], [np.ones(grid.dims, bool)]) == 0.0


@pytest.mark.parametrize("previous", [False, True])
def test_scale_forward_equals_column_sum(rng, previous):
    cfg = fb.enumerate_features([(G1, 1), (RadialKernel("log", 1.5), 1)], previous)
    smp = _sample(rng)
    y_up = smooth_field(rng, 2, (12, 12, 12), 1.5) if previous else None
    n = mdl.ncolumns(cfg, previous)
    w = rng.normal(size=n)
    w[rng.random(n) < 0.3] = 0.0
    sw = mdl.ScaleWeights(cfg, w, rng.uniform(0.5, 2.0, n))
    ref = sum(c * col for c, col in zip(sw.weights / sw.powers, mdl.iter_columns(cfg, smp.pyramid[0], y_up)))
    out = mdl.scale_forward(sw, smp.pyramid[0], y_up).data
    assert rel_err(out, ref) < 1e-12
    with pytest.raises(CorruptModelError):
        mdl.scale_forward(mdl.ScaleWeights(cfg, w[:-1], sw.powers[:-1]), smp.pyramid[0], y_up)
