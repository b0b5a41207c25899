"""Binary file formats: STF1 fields, DWV1 diffusion volumes, TRKS1 streamlines, HML1 models.

All numbers are little-endian.  Volumes are stored C-order with the channel
index fastest, i.e. ``(X, Y, Z, C)``.

STF1 header (80 bytes)::

    magic "STF1" | version u32 | j u32 | dims 3*u32 | spacing 3*f64 |
    origin 3*f64 | precision u32 (0 = f64, 1 = f32) | 4 reserved bytes

followed by interleaved (re, im) samples.  DWV1 uses the same header layout
with ``j`` replaced by the gradient count, then ``G`` records of
``(gx, gy, gz, b)`` as f64, the b0 volume and the ``(X, Y, Z, G)`` DWI block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import features as fb
from .errors import CorruptModelError, FormatError, IncompatibleModelError
from .fields import DwiVolume, RadialKernel, STField, VolumeGrid
from .model import FilterModel, ScaleWeights

VERSION = 1
_HEADER = struct.Struct("<4sII3I3d3dI4x")
HEADER_SIZE = _HEADER.size  # 80
_PRECISION = {0: "<f8", 1: "<f4"}


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _pack_header(magic: bytes, n: int, grid: VolumeGrid, precision: int) -> bytes:
    return _HEADER.pack(magic, VERSION, n, *grid.dims, *grid.spacing, *grid.origin, precision)


def _unpack_header(buf: bytes, magic: bytes):
    if len(buf) < HEADER_SIZE:
        raise FormatError("file shorter than its header")
    fields = _HEADER.unpack_from(buf, 0)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != VERSION:
        raise FormatError(f"unsupported version {fields[1]}")
    n = fields[2]
    dims, spacing, origin = fields[3:6], fields[6:9], fields[9:12]
    precision = fields[12]
    if precision not in _PRECISION:
        raise FormatError(f"bad precision flag {precision}")
    return n, VolumeGrid(dims, spacing, origin), precision


def _take(buf: bytes, offset: int, dtype: str, count: int):
    size = np.dtype(dtype).itemsize * count
    if offset + size > len(buf):
        raise FormatError("file is truncated")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset), offset + size


# ---------------------------------------------------------------------------
# STF1


def encode_field(f: STField, precision: int = 0) -> bytes:
    dt = _PRECISION[precision]
    inter = np.empty(f.data.shape + (2,), dtype=dt)
    inter[..., 0] = f.data.real
    inter[..., 1] = f.data.imag
    return _pack_header(b"STF1", f.j, f.grid, precision) + inter.tobytes(order="C")


def decode_field(buf: bytes) -> STField:
    j, grid, precision = _unpack_header(buf, b"STF1")
    count = grid.nvox * (2 * j + 1) * 2
    raw, end = _take(buf, HEADER_SIZE, _PRECISION[precision], count)
    if end != len(buf):
        raise FormatError("trailing bytes after field data")
    raw = raw.astype(np.float64).reshape(grid.dims + (2 * j + 1, 2))
    return STField(grid, raw[..., 0] + 1j * raw[..., 1])


def write_field(path, f: STField, precision: int = 0) -> None:
    Path(path).write_bytes(encode_field(f, precision))


def read_field(path) -> STField:
    return decode_field(_read(path))


# ---------------------------------------------------------------------------
# DWV1


def encode_dwi(v: DwiVolume, precision: int = 0) -> bytes:
    dt = _PRECISION[precision]
    table = np.column_stack([v.gradients, v.bvals]).astype("<f8")
    return b"".join(
        [
            _pack_header(b"DWV1", len(v.bvals), v.grid, precision),
            table.tobytes(),
            np.asarray(v.b0, dtype=dt).tobytes(order="C"),
            np.asarray(v.dwi, dtype=dt).tobytes(order="C"),
        ]
    )


def decode_dwi(buf: bytes) -> DwiVolume:
    g, grid, precision = _unpack_header(buf, b"DWV1")
    dt = _PRECISION[precision]
    table, off = _take(buf, HEADER_SIZE, "<f8", 4 * g)
    table = table.reshape(g, 4)
    b0, off = _take(buf, off, dt, grid.nvox)
    dwi, off = _take(buf, off, dt, grid.nvox * g)
    if off != len(buf):
        raise FormatError("trailing bytes after DWI data")
    return DwiVolume(
        grid,
        b0.astype(np.float64).reshape(grid.dims),
        table[:, :3].copy(),
        table[:, 3].copy(),
        dwi.astype(np.float64).reshape(grid.dims + (g,)),
    )


def write_dwi(path, v: DwiVolume, precision: int = 0) -> None:
    Path(path).write_bytes(encode_dwi(v, precision))


def read_dwi(path) -> DwiVolume:
    return decode_dwi(_read(path))


# ---------------------------------------------------------------------------
# TRKS1


def encode_streamlines(lines) -> bytes:
    parts = [b"TRKS1", struct.pack("<I", len(lines))]
    for s in lines:
        p = np.asarray(getattr(s, "points", s), dtype="<f4").reshape(-1, 3)
        parts.append(struct.pack("<I", len(p)))
        parts.append(p.tobytes())
    return b"".join(parts)


def decode_streamlines(buf: bytes) -> list[np.ndarray]:
    if buf[:5] != b"TRKS1":
        raise FormatError("bad streamline magic")
    if len(buf) < 9:
        raise FormatError("file is truncated")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    out = []
    for _ in range(count):
        if off + 4 > len(buf):
            raise FormatError("file is truncated")
        (n,) = struct.unpack_from("<I", buf, off)
        pts, off = _take(buf, off + 4, "<f4", 3 * n)
        out.append(pts.astype(np.float64).reshape(n, 3))
    if off != len(buf):
        raise FormatError("trailing bytes after streamlines")
    return out


def write_streamlines(path, lines) -> None:
    Path(path).write_bytes(encode_streamlines(lines))


def read_streamlines(path) -> list[np.ndarray]:
    return decode_streamlines(_read(path))


# ---------------------------------------------------------------------------
# HML1
#
# "HML1\n", one line of JSON (the manifest), then the weight and power blocks
# of every scale as little-endian f64, in scale order.

MODEL_MAGIC = b"HML1\n"


def spec_hash(configs) -> str:
    h = hashlib.sha256()
    for c in configs:
        h.update(c.manifest().encode())
    return h.hexdigest()


def _kernel_list(config: fb.ScaleConfig):
    return [[k.kind, k.sigma, c] for k, c in config.kernels]


def _rebuild_config(entry: dict) -> fb.ScaleConfig:
    kernels = [(RadialKernel(kind, float(sigma)), int(c)) for kind, sigma, c in entry["kernels"]]
    return fb.enumerate_features(kernels, bool(entry["previous_output"]), s=int(entry["s"]), max_K=entry["max_K"])


def encode_model(model: FilterModel) -> bytes:
    model.validate()
    blob = b"".join(
        np.asarray(sw.weights, dtype="<f8").tobytes() + np.asarray(sw.powers, dtype="<f8").tobytes()
        for sw in model.scales
    )
    manifest = {
        "format": "HML1",
        "gamma": model.gamma,
        "lambda": model.lam,
        "label": model.label_name,
        "threshold": model.detect_threshold,
        "margin": model.margin,
        "lmax": model.lmax,
        "shell": model.shell,
        "scales": [
            {
                "s": sw.config.s,
                "kernels": _kernel_list(sw.config),
                "max_K": sw.config.max_K,
                "previous_output": i > 0,
                "N": sw.config.N,
                "N_s": sw.config.N_s,
                "ncols": sw.ncols,
                "residual": sw.residual,
                "manifest_sha256": sw.config.digest(),
            }
            for i, sw in enumerate(model.scales)
        ],
        "spec_hash": spec_hash([sw.config for sw in model.scales]),
        "content_hash": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MODEL_MAGIC + head + b"\n" + blob


def decode_model(buf: bytes) -> FilterModel:
    if not buf.startswith(MODEL_MAGIC):
        raise FormatError("bad model magic")
    nl = buf.find(b"\n", len(MODEL_MAGIC))
    if nl < 0:
        raise FormatError("model manifest is not terminated")
    try:
        man = json.loads(buf[len(MODEL_MAGIC) : nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"model manifest is not valid JSON: {exc}") from exc
    blob = buf[nl + 1 :]
    if hashlib.sha256(blob).hexdigest() != man.get("content_hash"):
        raise CorruptModelError("weight blocks do not match the content hash")
    configs = [_rebuild_config(e) for e in man["scales"]]
    for c, e in zip(configs, man["scales"]):
        if c.digest() != e["manifest_sha256"]:
            raise IncompatibleModelError(
                f"scale {c.s}: feature enumeration differs from the one the model was trained with"
            )
    if spec_hash(configs) != man["spec_hash"]:
        raise IncompatibleModelError("feature enumeration hash mismatch")
    scales, off = [], 0
    for c, e in zip(configs, man["scales"]):
        n = int(e["ncols"])
        w, off = _take(blob, off, "<f8", n)
        p, off = _take(blob, off, "<f8", n)
        scales.append(ScaleWeights(c, w.astype(float), p.astype(float), float(e["residual"])))
    if off != len(blob):
        raise CorruptModelError("trailing bytes after weight blocks")
    model = FilterModel(
        scales,
        gamma=float(man["gamma"]),
        lam=float(man["lambda"]),
        label_name=man["label"],
        detect_threshold=float(man["threshold"]),
        margin=int(man["margin"]),
        lmax=int(man["lmax"]),
        shell=man["shell"],
    )
    model.validate()
    return model


def write_model(path, model: FilterModel) -> None:
    Path(path).write_bytes(encode_model(model))


def read_model(path) -> FilterModel:
    return decode_model(_read(path))


def model_hash(path) -> str:
    return hashlib.sha256(_read(path)).hexdigest()
