"""Command-line entry point: ``run``, ``validate`` and ``render-debug``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    build_config,
    make_runtime,
    reference_default_report,
    parse_override,
    read_config_file,
    set_path,
    validate_data,
)
from .metrics import ROT_BOUNDS, TRANS_BOUNDS, PoseRecord, accuracy_grid, fp_rejection_ratio

log = logging.getLogger("seqscene")

METRICS_COLUMNS = [
    "mode", "runs", "frames", "true_positives", "spurious_detections", "fp_rejection_ratio",
    "fp_rejection_mean", "completion_ratio", "manipulation_trials", "manipulation_errors",
    "unrecovered_failures", "trial_cap_hits", "accuracy_20cm_45deg",
]


def _gather_overrides(args) -> dict:
    out = {}
    for text in args.override or []:
        k, v = parse_override(text)
        out[k] = v
    if getattr(args, "mode", None):
        out["mode"] = args.mode
    if getattr(args, "seeds", None):
        out["seeds"] = _parse_seeds(args.seeds)
    return out


def _parse_seeds(text: str) -> list[int]:
    """``N`` means seeds 0..N-1; a comma list is taken literally."""
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise ConfigError([f"seeds: need at least one seed, got {n}"])
    return list(range(n))


def _load(args) -> ExperimentConfig:
    data = read_config_file(args.config) if args.config else {}
    return build_config(data, _gather_overrides(args))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_metrics(path: Path, cfg: ExperimentConfig, results) -> dict:
    pose: list[PoseRecord] = [p for r in results for p in r.report.pose_records]
    rej = [x for r in results for x in r.report.rejection_records]
    per_run = [fp_rejection_ratio(r.report.rejection_records) for r in results]
    grid = accuracy_grid(pose, TRANS_BOUNDS, ROT_BOUNDS)
    seq = cfg.mode == "sequential"
    row = {
        "mode": cfg.mode,
        "runs": len(results),
        "frames": sum(r.report.frames for r in results),
        "true_positives": len(pose),
        "spurious_detections": sum(x.spurious for x in rej),
        "fp_rejection_ratio": fp_rejection_ratio(rej),
        "fp_rejection_mean": float(np.mean(per_run)),
        "completion_ratio": float(np.mean([r.report.completion for r in results])) if seq else None,
        "manipulation_trials": sum(r.report.trials for r in results) if seq else None,
        "manipulation_errors": sum(r.report.manipulation_errors for r in results) if seq else None,
        "unrecovered_failures": sum(r.report.unrecovered_failures for r in results) if seq else None,
        "trial_cap_hits": sum(r.report.trial_cap_hit for r in results) if seq else None,
        "accuracy_20cm_45deg": float(grid[TRANS_BOUNDS.index(0.20), ROT_BOUNDS.index(45.0)]),
    }
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
    with open(path.with_name("accuracy_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trans_bound", "rot_bound", "accuracy"])
        for i, t in enumerate(TRANS_BOUNDS):
            for j, r in enumerate(ROT_BOUNDS):
                w.writerow([f"{t:.2f}", f"{r:.1f}", f"{grid[i, j]:.6f}"])
    return row


def cmd_run(args) -> int:
    from .harness import _scene, run, write_trace

    cfg = _load(args)
    rt = make_runtime(cfg)
    out = Path(args.out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    results = []
    for scene, seed in cfg.runs():
        log.info("run scene=%d seed=%d", scene, seed)
        res = run(rt, scene, seed)
        results.append(res)
        name = f"trace_seed{seed}.csv" if cfg.scenes is None else f"trace_scene{scene}_seed{seed}.csv"
        write_trace(out / "traces" / name, res)
        if args.debug_dumps:
            _dump_frame(rt, _scene(rt, scene), out / "debug" / f"scene{scene}_seed{seed}", seed)
    row = write_metrics(out / "metrics.csv", cfg, results)
    print(", ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    return 0


def cmd_validate(args) -> int:
    data = read_config_file(args.config) if args.config else {}
    for key, value in _gather_overrides(args).items():
        set_path(data, key, value)
    problems = validate_data(data)
    if problems:
        print(f"{len(problems)} violation(s):")
        for p in problems:
            print(f"  - {p}")
        return 1
    cfg = build_config(data)
    print("no violations")
    for key, value, matches in reference_default_report(cfg):
        tag = "reference default" if matches else "overridden (reference default differs)"
        print(f"  {key} = {value}  [{tag}]")
    return 0


def _dump_frame(rt, world, out: Path, seed: int) -> None:
    from .detect import write_detections_csv
    from .harness import _observe
    from .render import write_cloud_ply, write_pgm

    out.mkdir(parents=True, exist_ok=True)
    obs = _observe(rt, world, seed, 0)
    write_pgm(out / "depth.pgm", obs.depth)
    write_cloud_ply(out / "cloud.ply", obs.cloud)
    write_detections_csv(out / "detections.csv", [(0, d) for d in obs.detections])


def cmd_render_debug(args) -> int:
    from .harness import _scene

    cfg = _load(args)
    rt = make_runtime(cfg)
    scene, seed = cfg.runs()[0]
    _dump_frame(rt, _scene(rt, scene), Path(args.out_dir), seed)
    print(f"wrote depth.pgm, cloud.ply, detections.csv to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqscene", description="Sequential tabletop scene estimation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seeds", help="N for seeds 0..N-1, or a comma-separated list")
        sp.add_argument("--mode", choices=["single_scene", "sequential"])
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted config path, e.g. filter.n_particles=100 (repeatable)")
        if out:
            sp.add_argument("--out-dir", default="out")
        sp.add_argument("-v", "--verbose", action="store_true")

    r = sub.add_parser("run", help="run the configured experiment over all seeds")
    common(r)
    r.add_argument("--debug-dumps", action="store_true", help="write depth/cloud/detections of each final world")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a config without running it")
    common(v, out=False)
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("render-debug", help="dump one frame's depth image, point cloud and detections")
    common(d)
    d.set_defaults(func=cmd_render_debug)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure inside an experiment
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
