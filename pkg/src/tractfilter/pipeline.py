"""Pipeline configuration and the steps the command line wires together."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as fb
from . import formats
from .errors import InvalidArgumentError
from .fields import RadialKernel, VolumeGrid, sh_project
from .model import DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_MARGIN, fit_filter, prepare_sample
from .tracts import Bundle, PhantomSpec, default_scheme, random_crossing_spec, rasterize_label

SCHEMA_VERSION = 1

# Three-level layout with the kernel sets used for the human-data filter.
FULL_SCALES = (
    {"s": -2, "kernels": [["gaussian", 1.0, 5], ["log", 1.5, 5], ["log", 2.0, 5]]},
    {"s": -1, "kernels": [["gaussian", 1.0, 3], ["log", 1.5, 3], ["log", 2.0, 3]]},
    {"s": 0, "kernels": [["gaussian", 1.0, 3], ["log", 2.0, 3]]},
)
# Reported counts for FULL_SCALES, (N, N_s) per scale.
REPORTED_COUNTS = {-2: (639, 0), -1: (219, 32), 0: (102, 24)}

# Small enough to train on a desktop in minutes.
DESK_SCALES = (
    {"s": -2, "kernels": [["gaussian", 1.0, 2], ["log", 1.5, 2]]},
    {"s": -1, "kernels": [["gaussian", 1.0, 1]]},
    {"s": 0, "kernels": [["gaussian", 1.0, 1]]},
)


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InvalidArgumentError(f"config file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InvalidArgumentError("config must be a JSON object")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise InvalidArgumentError(f"config schema must be {SCHEMA_VERSION}, got {cfg.get('schema')!r}")
    cfg["_base"] = str(p.parent)
    return cfg


def resolve(cfg: dict, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def _number(cfg, key, default, lo=None, hi=None, strict_lo=False):
    v = cfg.get(key, default)
    if v is None:
        return None
    try:
        v = float(v)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"{key} must be a number") from exc
    if lo is not None and (v < lo or (strict_lo and v == lo)):
        raise InvalidArgumentError(f"{key} = {v} is out of range")
    if hi is not None and v > hi:
        raise InvalidArgumentError(f"{key} = {v} is out of range")
    return v


def scale_configs(entries, gamma: float = DEFAULT_GAMMA) -> list[fb.ScaleConfig]:
    """Feature enumerations for a list of ``{"s", "kernels", "max_K"}`` entries."""
    entries = sorted(entries, key=lambda e: int(e["s"]))
    if not entries:
        raise InvalidArgumentError("at least one scale is required")
    out = []
    for i, e in enumerate(entries):
        try:
            kernels = [(RadialKernel(str(k), float(sig)), int(c)) for k, sig, c in e["kernels"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"bad kernel list in scale entry {e}") from exc
        s = int(e["s"])
        if s > 0:
            raise InvalidArgumentError("scales must be <= 0")
        out.append(fb.enumerate_features(kernels, i > 0, s=s, max_K=e.get("max_K")))
    return out


# ---------------------------------------------------------------------------
# Phantoms


def _bundle(entry) -> Bundle:
    kind = entry.get("type", "straight")
    if kind == "straight":
        return Bundle.straight(entry["start"], entry["end"], float(entry["radius"]))
    if kind == "arc":
        return Bundle.arc(entry["center"], float(entry["curvature_radius"]), entry["normal"], entry["start_dir"], float(entry["angle"]), float(entry["radius"]))
    raise InvalidArgumentError(f"unknown bundle type {kind!r}")


def phantom_specs(cfg: dict) -> list[tuple[str, PhantomSpec]]:
    """``[(name, spec)]`` for a phantom config.

    Either explicit ``bundles`` or ``count`` random crossing phantoms whose
    geometry follows ``seed + i`` and whose noise follows ``noise_seed + i``.
    """
    dims = cfg.get("dims", [48, 48, 48])
    spacing = cfg.get("spacing", [2.0, 2.0, 2.0])
    grid = VolumeGrid(tuple(dims), tuple(spacing))
    sigma = _number(cfg, "sigma", 0.05)
    if sigma < 0:
        raise InvalidArgumentError("sigma must be non-negative")
    ndirs = int(cfg.get("directions", 30))
    bval = _number(cfg, "bvalue", 1000.0, lo=0, strict_lo=True)
    seed = int(cfg.get("seed", 0))
    noise_seed = int(cfg.get("noise_seed", seed))
    name = str(cfg.get("name", "phantom"))
    if "bundles" in cfg:
        g, b = default_scheme(ndirs, bval)
        spec = PhantomSpec(grid, tuple(_bundle(e) for e in cfg["bundles"]), g, b, sigma=sigma, seed=noise_seed)
        return [(name, spec)]
    count = int(cfg.get("count", 1))
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    curved = bool(cfg.get("curved", True))
    out = []
    for i in range(count):
        spec = random_crossing_spec(seed + i, grid, sigma=sigma, noise_seed=noise_seed + i, ndirs=ndirs, bval=bval, curved=curved)
        out.append((f"{name}_{i:03d}" if count > 1 else name, spec))
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainSettings:
    scales: list
    gamma: float = DEFAULT_GAMMA
    lam: float = DEFAULT_LAMBDA
    margin: int = DEFAULT_MARGIN
    epsilon: float | None = None
    shell: float | None = None
    label_name: str = "tract"
    threshold: float | None = None
    samples: list = field(default_factory=list)  # [{"dwi": path, "streamlines" | "label": path}]

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainSettings":
        samples = cfg.get("samples")
        if not samples:
            raise InvalidArgumentError("training needs at least one sample")
        resolved = []
        for smp in samples:
            if "dwi" not in smp or not ({"streamlines", "label"} & set(smp)):
                raise InvalidArgumentError("each sample needs 'dwi' and 'streamlines' or 'label'")
            r = {k: resolve(cfg, v) for k, v in smp.items() if k in ("dwi", "streamlines", "label")}
            for p in r.values():
                if not p.is_file():
                    raise InvalidArgumentError(f"input file {p} does not exist")
            resolved.append(r)
        lam = _number(cfg, "lambda", DEFAULT_LAMBDA, lo=0)
        gamma = _number(cfg, "gamma", DEFAULT_GAMMA, lo=1, strict_lo=True)
        eps = _number(cfg, "epsilon", None, lo=0, strict_lo=True)
        margin = int(cfg.get("margin", DEFAULT_MARGIN))
        if margin < 0:
            raise InvalidArgumentError("margin must be >= 0")
        return cls(
            scales=list(cfg.get("scales", DESK_SCALES)),
            gamma=gamma,
            lam=lam,
            margin=margin,
            epsilon=eps,
            shell=_number(cfg, "shell", None, lo=0),
            label_name=str(cfg.get("label_name", "tract")),
            threshold=_number(cfg, "threshold", None, lo=0),
            samples=resolved,
        )


def load_sample_inputs(smp: dict, eps, shell):
    dwi = formats.read_dwi(smp["dwi"])
    data = sh_project(dwi, shell=shell)
    if "label" in smp:
        label = formats.read_field(smp["label"])
        if label.j != 2 or label.grid != dwi.grid:
            raise InvalidArgumentError(f"label {smp['label']} is not an order-2 field on the DWI grid")
    else:
        lines = formats.read_streamlines(smp["streamlines"])
        label = rasterize_label(lines, dwi.grid, eps).field
    return data, label


def run_training(st: TrainSettings):
    configs = scale_configs(st.scales, st.gamma)
    scales = [c.s for c in configs]
    samples = []
    for smp in st.samples:
        data, label = load_sample_inputs(smp, st.epsilon, st.shell)
        samples.append(prepare_sample(data, label, scales, st.gamma, st.margin))
    result = fit_filter(samples, configs, st.lam, st.gamma, st.label_name, st.margin, st.threshold)
    result.model.shell = st.shell
    return result, samples


def report_rows(result, samples) -> list[dict]:
    rows = []
    for i, sw in enumerate(result.model.scales):
        c = sw.config
        s = c.s
        grid = next(iter(samples[0].pyramid[s].values())).grid
        pn, pns = REPORTED_COUNTS.get(s, (None, None))
        rows.append(
            {
                "scale": s,
                "grid": "x".join(str(d) for d in grid.dims),
                "kernels": ",".join(f"{k.tag}:{cut}" for k, cut in c.kernels),
                "N": c.N,
                "N_s": c.N_s if i > 0 else 0,
                "columns": sw.ncols,
                "reported_N": pn,
                "reported_N_s": pns,
                "residual": sw.residual,
            }
        )
    return rows


def write_tsv(path, rows: list[dict], header: list[str] | None = None, comments=()):
    header = header or (list(rows[0]) if rows else [])
    lines = [f"# {c}" for c in comments]
    lines.append("\t".join(header))
    for r in rows:
        lines.append("\t".join(_fmt(r.get(h)) for h in header))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6g}" if np.isfinite(v) else "nan"
    return str(v)
