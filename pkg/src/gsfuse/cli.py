"""Command-line entry point: ``gsfuse <command> ...``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 format/validation/config,
5 degenerate input, 6 registration failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SECTIONS, PipelineConfig
from .errors import ConfigError, GSFuseError, RegistrationFailure
from .evaluate import evaluate_fusion
from .fusion import FusionConfig, fuse
from .gafeat import extract_features
from .model import apply_transform
from .ply import load_ply, save_ply
from .registration import register, registration_errors
from .skeleton import extract_skeleton, skeleton_metrics, with_config
from .synth import (GroundTruth, SceneSpec, generate, planted_ridge_pair, random_scene_spec,
                    random_transform, split_pair)
from .transform import SimilarityTransform

EXIT_IO = 3

# fields that the common flags or dedicated options already cover
_SKIP = {("registration", "seed")}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_optional_float(text: str):
    return None if text.lower() in ("none", "off") else float(text)


def _flag_type(section: str, f: dataclasses.Field):
    default = f.default if f.default is not dataclasses.MISSING else None
    if f.name == "layer_dims":
        return lambda s: tuple(int(x) for x in s.split(","))
    if f.name == "tau":
        return _parse_optional_float
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, str):
        return str
    return float


def _add_config_flags(p: argparse.ArgumentParser, sections) -> None:
    for section in sections:
        grp = p.add_argument_group(f"{section} settings")
        for f in dataclasses.fields(SECTIONS[section]):
            if (section, f.name) in _SKIP:
                continue
            grp.add_argument("--" + f.name.replace("_", "-"), dest=f"{section}__{f.name}",
                             type=_flag_type(section, f), default=None, metavar=f.name.upper())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap for spatial queries")
    p.add_argument("--report", type=Path, help="write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsfuse", description="Register and fuse 3D Gaussian splatting sub-maps.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene or A/B pair")
    _common(p)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--spec", type=Path, help="SceneSpec JSON (default: a random cluttered scene)")
    p.add_argument("--preset", choices=["random", "ridge"], default="random")
    p.add_argument("--pair", action="store_true", help="also split into a.ply / b.ply with ground truth")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.01, help="noise on B's means (metres)")
    p.add_argument("--max-rotation", type=float, default=30.0, help="degrees")
    p.add_argument("--extent", type=float, default=3.0)
    p.add_argument("--structures", type=int, default=10)

    p = sub.add_parser("skeletonize", help="extract a skeleton and its quality metrics")
    _common(p)
    p.add_argument("model", type=Path)
    p.add_argument("-o", "--output", type=Path, help="skeleton JSON")
    p.add_argument("--baseline", choices=["l1"], help="covariance-blind baseline")
    p.add_argument("--sweep-dbscan", metavar="EPS:MINPTS,...",
                   help="grid of DBSCAN settings; reports both methods for each")
    p.add_argument("--reference", type=Path, help="ground-truth sidecar with skeleton polylines")
    _add_config_flags(p, ["skeleton"])

    p = sub.add_parser("features", help="per-primitive convolution features and detail scores")
    _common(p)
    p.add_argument("model", type=Path)
    p.add_argument("-o", "--output", type=Path, help="feature JSON")
    p.add_argument("--dump", type=Path, help="binary dump of all layer outputs")
    _add_config_flags(p, ["conv"])

    p = sub.add_parser("register", help="estimate the similarity transform taking B onto A")
    _common(p)
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("-o", "--output", type=Path, help="transform JSON")
    p.add_argument("--gt", type=Path, help="ground-truth transform or sidecar JSON")
    p.add_argument("--skeleton-fallback", action="store_true",
                   help="retry on skeleton nodes if primitive matching fails")
    _add_config_flags(p, ["conv", "registration", "skeleton"])

    p = sub.add_parser("fuse", help="fuse A with registered B")
    _common(p)
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("transform", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True, help="fused PLY")
    p.add_argument("--baseline", choices=["center-proximity"])
    p.add_argument("--verbose-report", action="store_true", help="include per-pair scores")
    _add_config_flags(p, ["skeleton", "conv", "fusion"])

    p = sub.add_parser("eval", help="geometric metrics of a fused model against ground truth")
    _common(p)
    p.add_argument("fused", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--fusion-report", type=Path, required=True, help="report written by 'fuse'")
    p.add_argument("--eps-coverage", type=float)
    p.add_argument("--eps-overlap", type=float)
    return ap


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {name: {} for name in SECTIONS}
    for key, value in vars(args).items():
        if "__" in key and value is not None:
            section, name = key.split("__", 1)
            overrides[section][name] = value
    if args.seed is not None:
        overrides["registration"]["seed"] = args.seed
    cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1 and args.threads != -1:
            raise ConfigError("--threads must be >= 1 (or -1 for all cores)")
        cfg.threads = args.threads
    return cfg


_FILE_ONLY = ("kept_a", "kept_b", "pair_records")


def _emit(report: dict, args) -> None:
    """Full report to ``--report``; stdout gets it without the bulky index lists."""
    if args.report:
        args.report.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    brief = {k: v for k, v in report.items() if k not in _FILE_ONLY}
    sys.stdout.write(json.dumps(brief, indent=1, sort_keys=True) + "\n")


def _load_gt_transform(path: Path) -> SimilarityTransform:
    data = json.loads(path.read_text())
    return SimilarityTransform.from_dict(data["transform"] if "transform" in data else data)


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: PipelineConfig) -> dict:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    report = {"seed": seed}
    if args.preset == "ridge" and args.spec is None:
        A, B, gt = planted_ridge_pair(seed, noise_sigma=args.noise, overlap_fraction=args.overlap)
        save_ply(A, args.out_dir / "a.ply")
        save_ply(B, args.out_dir / "b.ply")
        gt.save(args.out_dir / "gt.json")
        report.update(a=len(A), b=len(B), transform=gt.transform.to_dict())
        return report
    spec = SceneSpec.load(args.spec) if args.spec else random_scene_spec(
        seed, extent=args.extent, n_structures=args.structures)
    model, truth = generate(spec)
    save_ply(model, args.out_dir / "scene.ply")
    report["scene"] = len(model)
    if args.pair:
        T = random_transform(np.random.default_rng(seed + 1), max_deg=args.max_rotation)
        A, B, gt = split_pair(model, args.overlap, T, noise_sigma=args.noise, seed=seed, truth=truth)
        save_ply(A, args.out_dir / "a.ply")
        save_ply(B, args.out_dir / "b.ply")
        gt.save(args.out_dir / "gt.json")
        report.update(a=len(A), b=len(B), transform=T.to_dict())
    else:
        n = len(model)
        scene_gt = GroundTruth(SimilarityTransform.identity(), np.zeros(n, bool), np.zeros(0, bool),
                               truth.detail_labels, np.zeros(0, bool), np.arange(n), np.zeros(0, np.int64),
                               truth.skeleton_polylines, truth.structure_samples, truth.sample_spacing)
        scene_gt.save(args.out_dir / "scene_gt.json")
    return report


def _parse_sweep(text: str):
    cells = []
    for item in text.split(","):
        try:
            eps, mp = item.split(":")
            cells.append((float(eps), int(mp)))
        except ValueError:
            raise ConfigError(f"bad --sweep-dbscan entry {item!r}; expected EPS:MINPTS") from None
    return cells


def cmd_skeletonize(args, cfg: PipelineConfig) -> dict:
    model = load_ply(args.model)
    reference = GroundTruth.load(args.reference).skeleton_polylines if args.reference else None
    method = "l1" if args.baseline == "l1" else "ga-l1"

    def run(scfg, meth):
        t0 = time.perf_counter()
        skel, trace = extract_skeleton(model, scfg, method=meth, workers=cfg.threads)
        metrics = skeleton_metrics(skel, reference, scfg)
        metrics.update(time_s=time.perf_counter() - t0, iterations=trace.iterations, converged=trace.converged)
        return skel, metrics

    if args.sweep_dbscan:
        grid = _parse_sweep(args.sweep_dbscan)
        methods = ["ga-l1", "l1"]
        cells = [[run(with_config(cfg.skeleton, dbscan_eps=e, dbscan_min_pts=m), meth)[1]
                  for e, m in grid] for meth in methods]
        return {"rows": methods, "columns": [{"dbscan_eps": e, "dbscan_min_pts": m} for e, m in grid],
                "cells": cells, "config": cfg.to_dict()}
    skel, metrics = run(cfg.skeleton, method)
    if args.output:
        skel.save(args.output)
    return {"method": method, **metrics, "config": cfg.to_dict()}


def cmd_features(args, cfg: PipelineConfig) -> dict:
    model = load_ply(args.model)
    t0 = time.perf_counter()
    field = extract_features(model, cfg.conv, workers=cfg.threads)
    elapsed = time.perf_counter() - t0
    if args.output:
        field.save(args.output)
    if args.dump:
        field.dump_layers(args.dump)
    s = field.detail_score
    return {"num_primitives": len(model), "kernel_radius": field.kernel_radius,
            "detail_score": {"min": float(s.min()), "max": float(s.max()), "mean": float(s.mean())},
            "time_s": elapsed, "config": cfg.to_dict()}


def cmd_register(args, cfg: PipelineConfig) -> dict:
    a, b = load_ply(args.a), load_ply(args.b)
    t0 = time.perf_counter()
    skeletons = None
    if args.skeleton_fallback:
        skeletons = (extract_skeleton(a, cfg.skeleton, workers=cfg.threads)[0],
                     extract_skeleton(b, cfg.skeleton, workers=cfg.threads)[0])
    result = register(a, b, cfg.conv, cfg.registration, skeletons=skeletons, workers=cfg.threads)
    elapsed = time.perf_counter() - t0
    if args.output:
        result.transform.save(args.output)
    report = {"transform": result.transform.to_dict(), "matches": int(len(result.matches)),
              "inliers": result.inlier_count, "level": result.level, "time_s": elapsed,
              "config": cfg.to_dict()}
    if args.gt:
        report.update(registration_errors(result.transform, _load_gt_transform(args.gt)))
    return report


def cmd_fuse(args, cfg: PipelineConfig) -> dict:
    a, b = load_ply(args.a), load_ply(args.b)
    T = SimilarityTransform.load(args.transform)
    fcfg = cfg.fusion
    if args.baseline == "center-proximity":
        fcfg = FusionConfig.center_proximity(eps_skel=fcfg.eps_skel, eps_overlap=fcfg.eps_overlap, delta=fcfg.delta)
    t0 = time.perf_counter()
    b_reg = apply_transform(b, T)
    skel_a, _ = extract_skeleton(a, cfg.skeleton, workers=cfg.threads)
    skel_b, _ = extract_skeleton(b_reg, cfg.skeleton, workers=cfg.threads)
    feat_a = extract_features(a, cfg.conv, workers=cfg.threads)
    feat_b = extract_features(b_reg, cfg.conv, workers=cfg.threads)
    fused, rep = fuse(a, b_reg, skel_a, skel_b, feat_a, feat_b, fcfg,
                      merge_dist=cfg.skeleton.resolved_merge_dist)
    elapsed = time.perf_counter() - t0
    save_ply(fused, args.output)
    out = rep.to_dict(verbose=args.verbose_report)
    out["config"] = {**cfg.to_dict(), "fusion": out["config"], "baseline": args.baseline}
    out["time_s"] = elapsed
    return out


def cmd_eval(args, cfg: PipelineConfig) -> dict:
    fused = load_ply(args.fused)
    gt = GroundTruth.load(args.gt)
    rep = json.loads(args.fusion_report.read_text())
    try:
        kept_a, kept_b = rep["kept_a"], rep["kept_b"]
    except KeyError as exc:
        raise ConfigError(f"fusion report lacks {exc}") from None
    return evaluate_fusion(fused, gt, kept_a, kept_b, args.eps_coverage, args.eps_overlap)


COMMANDS = {
    "synth": cmd_synth,
    "skeletonize": cmd_skeletonize,
    "features": cmd_features,
    "register": cmd_register,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        report = COMMANDS[args.command](args, cfg)
    except RegistrationFailure as exc:
        diag = {"error": "registration_failure", "message": str(exc)}
        if getattr(args, "report", None):
            args.report.write_text(json.dumps(diag, indent=1) + "\n")
        print(f"gsfuse: {exc}", file=sys.stderr)
        return exc.exit_code
    except GSFuseError as exc:
        print(f"gsfuse: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gsfuse: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"gsfuse: invalid JSON: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    _emit(report, args)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
