"""Command-line interface.

Subcommands: phantom, project, train, predict, track, select, metrics and
features.  Exit codes: 0 success, 2 configuration error, 3 data/model
incompatibility, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.fft

from . import formats, pipeline, plotting
from .errors import (
    CorruptModelError,
    FormatError,
    GridTooSmallError,
    IncompatibleModelError,
    InsufficientDirectionsError,
    RankDeficiencyError,
    TractFilterError,
    UndefinedICCError,
)
from .fields import sh_project
from .model import build_pyramid, forward, window_data
from .tracking import TrackingParams, apparent_volume, icc, track
from .tracts import WaypointSpec, generate_phantom, load_waypoint_table, select_tract

log = logging.getLogger("tractfilter")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCOMPATIBLE = 3
EXIT_NUMERIC = 4


class ConfigError(TractFilterError):
    pass


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Commands


def cmd_phantom(args) -> int:
    cfg = pipeline.load_config(args.config)
    out = _outdir(args.out or pipeline.resolve(cfg, cfg.get("output_dir", ".")))
    rows = []
    for name, spec in pipeline.phantom_specs(cfg):
        vol, lines = generate_phantom(spec)
        formats.write_dwi(out / f"{name}.dwv", vol)
        formats.write_streamlines(out / f"{name}.trks", lines)
        rows.append({"name": name, "bundles": len(spec.bundles), "streamlines": len(lines), "seed": spec.seed})
        log.info("wrote %s (%d streamlines)", name, len(lines))
    pipeline.write_tsv(out / "phantoms.tsv", rows)
    return EXIT_OK


def cmd_project(args) -> int:
    vol = formats.read_dwi(args.dwi)
    coeffs = sh_project(vol, shell=args.shell, lmax=args.lmax)
    prefix = _parent(args.out)
    for j, f in coeffs.items():
        formats.write_field(f"{prefix}_j{j}.stf", f)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = pipeline.load_config(args.config)
    st = pipeline.TrainSettings.from_config(cfg)
    if args.threshold is not None:
        st.threshold = args.threshold
    model_path = _parent(args.out or pipeline.resolve(cfg, cfg.get("output", "model.hml")))
    report_dir = _outdir(args.report or model_path.parent)
    result, samples = pipeline.run_training(st)
    formats.write_model(model_path, result.model)

    rows = pipeline.report_rows(result, samples)
    notes = [
        f"gamma={st.gamma:g} lambda={st.lam:g} margin={st.margin} final_smoothing=G1 pyramid_smoothing=0.75*gamma^-s",
        f"label={st.label_name} epsilon={'default' if st.epsilon is None else st.epsilon} shell={'highest' if st.shell is None else st.shell}",
        f"threshold={result.model.detect_threshold:.6g} model_sha256={formats.model_hash(model_path)}",
        "reported_N/reported_N_s are the counts reported for the three-level human-data configuration",
    ]
    if all(e == 0 for e in result.label_energy):
        notes.append("degenerate fit: every training label is zero, the weights are zero")
    pipeline.write_tsv(report_dir / "train_report.tsv", rows, comments=notes)
    plotting.plot_training(rows, report_dir / "train_report.png")
    if args.save_predictions:
        for i, y in enumerate(result.predictions):
            formats.write_field(report_dir / f"train_prediction_{i:03d}.stf", y)
    for r in rows:
        log.info("scale %s: N=%s N_s=%s residual=%.4g", r["scale"], r["N"], r["N_s"], r["residual"])
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.expect_hash and formats.model_hash(args.model) != args.expect_hash:
        raise IncompatibleModelError("model file hash does not match --expect-hash")
    model = formats.read_model(args.model)
    vol = formats.read_dwi(args.dwi)
    data = sh_project(vol, shell=model.shell, lmax=model.lmax)
    pyr = build_pyramid(window_data(data, model.margin), model.scale_indices, model.gamma)
    y = forward(model, pyr)
    out = _parent(args.out)
    formats.write_field(out, y)
    if args.figure:
        plotting.plot_field_slices(y, _parent(args.figure), title=model.label_name)
    return EXIT_OK


def cmd_track(args) -> int:
    y = formats.read_field(args.field)
    threshold = args.threshold
    if threshold is None:
        threshold = formats.read_model(args.model).detect_threshold if args.model else 0.0
    params = TrackingParams(step=args.step, threshold=threshold, seeds=args.seeds, max_steps=args.max_steps, seed=args.seed)
    lines = track(y, params)
    formats.write_streamlines(_parent(args.out), lines)
    if args.figure:
        plotting.plot_streamlines(lines, _parent(args.figure), grid=y.grid)
    log.info("%d streamlines", len(lines))
    return EXIT_OK


def _waypoints(args) -> WaypointSpec:
    if args.tract:
        table = load_waypoint_table()
        if args.tract not in table:
            raise ConfigError(f"unknown tract {args.tract!r}; known: {', '.join(table)}")
        if table[args.tract] is None:
            raise ConfigError(f"tract {args.tract!r} has no waypoint definition")
        return table[args.tract]
    cfg = pipeline.load_config(args.waypoints)
    return WaypointSpec(cfg["points"], cfg["tolerances"])


def cmd_select(args) -> int:
    if not (args.tract or args.waypoints):
        raise ConfigError("give --tract or --waypoints")
    spec = _waypoints(args)
    lines = formats.read_streamlines(args.streamlines)
    picked = select_tract(lines, spec)
    formats.write_streamlines(_parent(args.out), picked)
    log.info("selected %d of %d streamlines", len(picked), len(lines))
    return EXIT_OK


def cmd_metrics(args) -> int:
    """Volumes of paired sessions and per-tract ICC.

    The config lists ``pairs`` of ``{"tract", "subject", "session1", "session2"}``.
    """
    cfg = pipeline.load_config(args.config)
    pairs = cfg.get("pairs")
    if not pairs:
        raise ConfigError("metrics config needs a non-empty 'pairs' list")
    rows = []
    for p in pairs:
        v1 = apparent_volume(formats.read_field(pipeline.resolve(cfg, p["session1"])))
        v2 = apparent_volume(formats.read_field(pipeline.resolve(cfg, p["session2"])))
        rows.append({"tract": p.get("tract", "tract"), "subject": p.get("subject", ""), "volume_1": v1, "volume_2": v2})
    out = _outdir(args.out)
    pipeline.write_tsv(out / "volumes.tsv", rows)
    summary = []
    for tract in dict.fromkeys(r["tract"] for r in rows):
        sel = [r for r in rows if r["tract"] == tract]
        x1 = np.array([r["volume_1"] for r in sel])
        x2 = np.array([r["volume_2"] for r in sel])
        try:
            value = icc(x1, x2)
        except (UndefinedICCError, ValueError):
            value = float("nan")
        summary.append({"tract": tract, "n": len(sel), "mean_volume": float(np.mean(np.r_[x1, x2])), "icc": value})
        plotting.plot_retest(x1, x2, out / f"retest_{tract}.png", names=[r["subject"] for r in sel], icc_value=value if np.isfinite(value) else None)
    pipeline.write_tsv(out / "icc.tsv", summary)
    return EXIT_OK


def cmd_features(args) -> int:
    entries = pipeline.load_config(args.config)["scales"] if args.config else pipeline.FULL_SCALES
    rows = []
    for i, c in enumerate(pipeline.scale_configs(entries)):
        pn, pns = pipeline.REPORTED_COUNTS.get(c.s, (None, None))
        rows.append(
            {
                "scale": c.s,
                "kernels": ",".join(f"{k.tag}:{cut}" for k, cut in c.kernels),
                "linear": len(c.linear),
                "N": c.N,
                "N_s": c.N_s,
                "reported_N": pn,
                "reported_N_s": pns,
            }
        )
    if args.out:
        pipeline.write_tsv(_parent(args.out), rows)
    header = list(rows[0])
    print("\t".join(header))
    for r in rows:
        print("\t".join(pipeline._fmt(r[h]) for h in header))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tractfilter", description="Covariant tract filter pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate synthetic crossing-bundle phantoms")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("project", help="spherical-harmonic projection of a DWV1 volume")
    s.add_argument("dwi")
    s.add_argument("--out", required=True, help="output prefix; writes <prefix>_j<order>.stf")
    s.add_argument("--shell", type=float)
    s.add_argument("--lmax", type=int, default=2)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("train", help="train a filter model")
    s.add_argument("config")
    s.add_argument("--out", help="model path (overrides output)")
    s.add_argument("--report", help="report directory (default: next to the model)")
    s.add_argument("--threshold", type=float, help="fix the detection threshold")
    s.add_argument("--save-predictions", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="apply a model to a DWV1 volume")
    s.add_argument("model")
    s.add_argument("dwi")
    s.add_argument("--out", required=True)
    s.add_argument("--expect-hash", help="sha256 the model file must have")
    s.add_argument("--figure", help="write a slice figure here")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("track", help="Euler streamline tracking on a predicted field")
    s.add_argument("field")
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="take the default threshold from this model")
    s.add_argument("--threshold", type=float)
    s.add_argument("--step", type=float, default=0.5)
    s.add_argument("--seeds", type=int, default=1000)
    s.add_argument("--max-steps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--figure")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("select", help="select streamlines by ordered waypoints")
    s.add_argument("streamlines")
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--tract", help="name in the bundled waypoint table")
    g.add_argument("--waypoints", help="JSON file with points and tolerances")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("metrics", help="apparent volumes and test-retest ICC")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("features", help="list feature counts per scale")
    s.add_argument("--config", help="config with a 'scales' list (default: the three-level layout)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_features)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (IncompatibleModelError, CorruptModelError, FormatError, GridTooSmallError, InsufficientDirectionsError)):
        return EXIT_INCOMPATIBLE
    if isinstance(exc, (RankDeficiencyError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with scipy.fft.set_workers(args.threads):
            return args.func(args)
    except (TractFilterError, ValueError, KeyError, TypeError, OSError, ArithmeticError, np.linalg.LinAlgError, json.JSONDecodeError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
