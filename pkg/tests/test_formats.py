import json
from pathlib import Path

import numpy as np
import pytest

from conftest import random_field, smooth_field
from tractfilter import features as fb
from tractfilter import formats
from tractfilter import model as mdl
from tractfilter.errors import CorruptModelError, FormatError, IncompatibleModelError
from tractfilter.fields import DwiVolume, RadialKernel, STField, VolumeGrid

DATA = Path(__file__).parent / "data"
G1 = RadialKernel("gaussian", 1.0)


def test_header_size():
    assert formats.HEADER_SIZE == 80


def test_golden_field():
    f = formats.read_field(DATA / "golden.stf")
    assert f.j == 1
    assert f.grid == VolumeGrid((2, 1, 1), (1.5, 2.0, 2.5), (-1.0, 0.0, 3.0))
    for x in range(2):
        for i, m in enumerate((-1, 0, 1)):
            assert f.data[x, 0, 0, i] == complex(10 * x + m, x - m)
    assert formats.encode_field(f) == (DATA / "golden.stf").read_bytes()


def test_golden_field_single_precision():
    buf = (DATA / "golden_f32.stf").read_bytes()
    f = formats.decode_field(buf)
    assert np.array_equal(f.data[0, 0, :, 0], [0.5 - 0.25j, 2.0])
    assert formats.encode_field(f, precision=1) == buf


def test_golden_dwi():
    v = formats.read_dwi(DATA / "golden.dwv")
    assert np.array_equal(v.gradients, [[1, 0, 0], [0, 0, 1]])
    assert np.array_equal(v.bvals, [1000, 2000])
    assert np.array_equal(v.b0[0, 0], [100, 200])
    assert np.array_equal(v.dwi[0, 0], [[50, 40], [90, 80]])
    assert formats.encode_dwi(v) == (DATA / "golden.dwv").read_bytes()


def test_golden_streamlines():
    lines = formats.read_streamlines(DATA / "golden.trks")
    assert [len(p) for p in lines] == [2, 3]
    assert np.array_equal(lines[0][1], [1, 2, 3])
    assert formats.encode_streamlines(lines) == (DATA / "golden.trks").read_bytes()


def test_field_roundtrip(tmp_path, rng):
    f = random_field(rng, 2, (5, 4, 3), spacing=(1.0, 2.0, 3.0))
    formats.write_field(tmp_path / "a.stf", f)
    g = formats.read_field(tmp_path / "a.stf")
    assert g.grid == f.grid and np.array_equal(g.data, f.data)


def test_dwi_roundtrip(tmp_path, rng):
    grid = VolumeGrid((3, 3, 2))
    g = rng.normal(size=(7, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    v = DwiVolume(grid, rng.uniform(1, 2, grid.dims), g, np.full(7, 1000.0), rng.uniform(0, 1, grid.dims + (7,)))
    formats.write_dwi(tmp_path / "a.dwv", v)
    w = formats.read_dwi(tmp_path / "a.dwv")
    assert np.array_equal(w.dwi, v.dwi) and np.array_equal(w.gradients, v.gradients)


def test_empty_streamlines_roundtrip():
    assert formats.decode_streamlines(formats.encode_streamlines([])) == []


@pytest.mark.parametrize("name", ["golden.stf", "golden.dwv", "golden.trks"])
def test_truncation_and_trailing_bytes(name):
    buf = (DATA / name).read_bytes()
    decode = {"stf": formats.decode_field, "dwv": formats.decode_dwi, "trks": formats.decode_streamlines}[name.split(".")[1]]
    for cut in (3, 40, len(buf) - 1):
        with pytest.raises(FormatError):
            decode(buf[:cut])
    with pytest.raises(FormatError):
        decode(buf + b"\0")


def test_bad_magic_version_precision():
    buf = bytearray((DATA / "golden.stf").read_bytes())
    with pytest.raises(FormatError):
        formats.decode_field(b"XXXX" + bytes(buf[4:]))
    v = bytearray(buf)
    v[4] = 9
    with pytest.raises(FormatError):
        formats.decode_field(bytes(v))
    p = bytearray(buf)
    p[72] = 7
    with pytest.raises(FormatError):
        formats.decode_field(bytes(p))


# ---------------------------------------------------------------------------
# Models


def _model(rng):
    grid = VolumeGrid((16, 16, 16))
    data = {0: smooth_field(rng, 0, grid.dims, 1.0), 2: smooth_field(rng, 2, grid.dims, 1.0)}
    label = smooth_field(rng, 2, grid.dims, 2.0)
    smp = mdl.prepare_sample(data, label, (-1, 0))
    cfgs = [fb.enumerate_features([(G1, 1)], False, s=-1), fb.enumerate_features([(G1, 0)], True, s=0)]
    res = mdl.fit_filter([smp], cfgs, 1e-3)
    res.model.shell = 1000.0
    return res, smp


@pytest.fixture(scope="module")
def trained():
    return _model(np.random.default_rng(77))


def test_model_roundtrip_bytes(trained, tmp_path):
    res, smp = trained
    formats.write_model(tmp_path / "m.hml", res.model)
    m = formats.read_model(tmp_path / "m.hml")
    formats.write_model(tmp_path / "n.hml", m)
    assert (tmp_path / "m.hml").read_bytes() == (tmp_path / "n.hml").read_bytes()
    assert formats.model_hash(tmp_path / "m.hml") == formats.model_hash(tmp_path / "n.hml")
    assert m.shell == 1000.0 and m.detect_threshold == res.model.detect_threshold
    out = mdl.forward(m, smp.pyramid)
    assert np.array_equal(out.data, res.predictions[0].data)


def test_model_manifest_readable(trained):
    buf = formats.encode_model(trained[0].model)
    assert buf.startswith(b"HML1\n")
    man = json.loads(buf[5 : buf.index(b"\n", 5)])
    assert [e["s"] for e in man["scales"]] == [-1, 0]
    assert man["scales"][1]["previous_output"] is True


def _edit_manifest(buf, fn):
    nl = buf.index(b"\n", 5)
    man = json.loads(buf[5:nl])
    fn(man)
    return b"HML1\n" + json.dumps(man, sort_keys=True, separators=(",", ":")).encode() + buf[nl:]


def test_model_incompatible_enumeration(trained):
    buf = formats.encode_model(trained[0].model)

    def bump(man):
        man["scales"][0]["manifest_sha256"] = "0" * 64

    with pytest.raises(IncompatibleModelError):
        formats.decode_model(_edit_manifest(buf, bump))

    def change_kernel(man):
        man["scales"][0]["kernels"][0][1] = 1.5

    with pytest.raises(IncompatibleModelError):
        formats.decode_model(_edit_manifest(buf, change_kernel))


def test_model_corruption(trained):
    buf = bytearray(formats.encode_model(trained[0].model))
    buf[-3] ^= 0xFF
    with pytest.raises(CorruptModelError):
        formats.decode_model(bytes(buf))
    good = formats.encode_model(trained[0].model)
    with pytest.raises(CorruptModelError):
        formats.decode_model(good[:-8])
    with pytest.raises(FormatError):
        formats.decode_model(b"HML2\n{}\n")
    with pytest.raises(FormatError):
        formats.decode_model(b"HML1\n{not json\n")
