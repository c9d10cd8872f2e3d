"""Command line entry point.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cloud as cl
from . import merge as mg
from . import metrics
from . import patching as pt
from . import pipeline as pl
from . import scenes
from . import segmenters as sg

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

SUITES = {
    "small": scenes.small_primitive_spec,
    "curvature": scenes.curvature_aligned_spec,
    "flat": scenes.flat_facet_spec,
}


class UsageError(ValueError):
    pass


def _config(args) -> pl.PipelineConfig:
    return pl.load_config(args.config) if args.config else pl.PipelineConfig()


def _load_input(path):
    """A scene directory or a bare cloud file."""
    p = Path(path)
    if p.is_dir():
        return cl.load_scene(p)
    if p.is_file():
        return cl.load_cloud(p)
    raise FileNotFoundError(f"no scene or cloud at {path}")


def _cloud_of(obj):
    return obj.cloud if isinstance(obj, cl.Scene) else obj


def cmd_synth(args) -> int:
    if args.suite == "random":
        spec = cl.SceneSpec(args.primitives, seed=args.seed)
    else:
        spec = SUITES[args.suite](args.seed)
    scene = cl.synthesize_scene(spec, args.points, args.noise)
    cl.save_scene(scene, args.output)
    print(f"{args.output}: {len(scene.surfaces)} primitives, {len(scene.cloud)} points"
          f", culled {scene.culled}")
    return EXIT_OK


def cmd_patches(args) -> int:
    cfg = _config(args)
    scene = _load_input(args.input)
    cloud = _cloud_of(scene)
    cfg.validate(len(cloud))
    cover, info = pl.patch_stage(cfg, cloud)
    src = Path(args.input) / "cloud.cpf" if Path(args.input).is_dir() else Path(args.input)
    pt.save_patch_set(cover, args.output, src, extra={"info": info})
    for w in info["warnings"]:
        logging.warning(w)
    print(f"{args.output}: {len(cover)} patches, pool {info.get('pool_size', 0)}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args)
    scene = _load_input(args.input)
    cloud = _cloud_of(scene)
    cfg.validate(len(cloud))
    scope = sg.parse_scope(args.scope)
    if scope == sg.GLOBAL:
        seg = pl.global_stage(cfg, cloud)
    else:
        if not args.patches:
            raise UsageError("--patches is required for a patch scope")
        cover, _ = pt.load_patch_set(args.patches)
        if not 0 <= scope < len(cover):
            raise UsageError(f"patch {scope} not in the patch set ({len(cover)} patches)")
        seg = pl.segment_patch(cfg, cloud, cover[scope], scope)
    sg.save_segmentation(seg, args.output)
    print(f"{args.output}: scope {sg.scope_name(seg.scope)}, {seg.k} segments")
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = _config(args)
    scene = _load_input(args.input)
    cloud = _cloud_of(scene)
    segs = [sg.load_segmentation(p) for p in args.segmentations]
    glob = [s for s in segs if s.scope == sg.GLOBAL]
    if len(glob) > 1:
        raise UsageError("more than one global segmentation given")
    patches = [s for s in segs if s.scope != sg.GLOBAL]
    final, grouping, stacked = pl.merge_stage(cfg, cloud, glob[0] if glob else None, patches)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    cl.save_cloud(pl.labeled_cloud(cloud, final), out / "labels.cpf")
    cl.save_primitives(final.primitives, out / "primitives.json")
    mg.save_grouping(grouping, stacked, out / "grouping.json", final.group_types)
    print(f"{out}: {stacked.n_columns} columns -> {grouping.n_groups} groups,"
          f" objective {grouping.objective:.6g}")
    return EXIT_OK


def _final_from_dir(d: Path) -> mg.FinalLabeling:
    labeled = cl.load_cloud(d / "labels.cpf")
    prims = cl.load_primitives(d / "primitives.json")
    grouping = mg.load_grouping(d / "grouping.json")
    if grouping.group_types is None:
        raise UsageError(f"{d / 'grouping.json'} has no group types")
    return mg.FinalLabeling(labeled.gt_label.astype(np.int64), labeled.gt_type,
                            labeled.normals, np.asarray(grouping.group_types, dtype=np.uint8),
                            prims, np.zeros(len(labeled), dtype=bool), [False] * len(prims))


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    scene = _load_input(args.input)
    if not isinstance(scene, cl.Scene):
        raise UsageError("evaluation needs a scene directory with ground truth")
    pred = Path(args.prediction)
    final = _final_from_dir(pred)
    report = pl.evaluate_stage(cfg, final, scene, Path(args.input).name)
    out = Path(args.output) if args.output else pred
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report_json(report, out / "report.json")
    metrics.write_cloud_csv([report], out / "report_cloud.csv")
    metrics.write_primitive_csv([report], out / "report_primitives.csv")
    print(json.dumps(report.table(), indent=1))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.output)
    reports = []
    multi = len(args.inputs) > 1
    for path in args.inputs:
        scene = _load_input(path)
        cid = Path(path).name
        result = pl.run_pipeline(cfg, scene, cloud_id=cid)
        target = out / cid if multi else out
        pl.write_outputs(result, _cloud_of(scene), target)
        if result.report is not None:
            reports.append(result.report)
            print(f"{cid}: mIoU {result.report.seg_miou:.3f}")
        else:
            print(f"{cid}: {result.grouping.n_groups} primitives (no ground truth)")
    if multi and reports:
        agg = metrics.aggregate(reports)
        metrics.write_report_json(agg, out / "report.json")
        metrics.write_cloud_csv(reports, out / "report_cloud.csv")
        metrics.write_primitive_csv(reports, out / "report_primitives.csv")
    return EXIT_OK


def cmd_bench_merge(args) -> int:
    if args.columns < 1 or args.instances < 1:
        raise UsageError("--columns and --instances must be positive")
    rng = np.random.default_rng(args.seed)
    rows = []
    for i in range(args.instances):
        inst = mg.random_instance(args.columns, rng)
        t = time.perf_counter()
        g = mg.greedy_merge(inst)
        tg = time.perf_counter() - t
        t = time.perf_counter()
        e = mg.exact_merge(inst, max_columns=args.max_columns, time_budget=args.time_budget)
        te = time.perf_counter() - t
        ratio = g.objective / e.objective if e.solved and e.objective > 0 else float("nan")
        rows.append({"instance": i, "columns": args.columns, "greedy_obj": g.objective,
                     "exact_obj": e.objective, "ratio": ratio, "greedy_ms": 1e3 * tg,
                     "exact_ms": 1e3 * te, "exact_solved": e.solved})
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.output:
            fh.close()
    solved = [r for r in rows if r["exact_solved"]]
    if solved:
        ratios = np.array([r["ratio"] for r in solved])
        print(f"solved {len(solved)}/{len(rows)}; mean ratio {np.nanmean(ratios):.4f};"
              f" optimal {np.mean(ratios >= 1 - 1e-9):.1%};"
              f" mean exact {np.mean([r['exact_ms'] for r in solved]):.1f} ms", file=sys.stderr)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="primcascade", description="Cascaded primitive fitting on point clouds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize a labelled scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=131072)
    s.add_argument("--primitives", type=int, default=10)
    s.add_argument("--noise", type=float, default=5e-3)
    s.add_argument("--suite", choices=["random", *SUITES], default="random")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("patches", help="select covering patches")
    s.add_argument("input")
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_patches)

    s = sub.add_parser("segment", help="segment one scope")
    s.add_argument("input")
    s.add_argument("--scope", default="global", help="'global' or 'patch:<i>'")
    s.add_argument("--patches")
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("merge", help="merge scoped segmentations")
    s.add_argument("input")
    s.add_argument("segmentations", nargs="+")
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("evaluate", help="evaluate a merge output against ground truth")
    s.add_argument("input")
    s.add_argument("prediction", help="directory written by 'merge' or 'run'")
    s.add_argument("--config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="run the whole cascade")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("bench-merge", help="greedy vs exact merge on random instances")
    s.add_argument("--columns", type=int, default=12)
    s.add_argument("--instances", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-columns", type=int, default=16)
    s.add_argument("--time-budget", type=float, default=60.0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_bench_merge)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, pl.ConfigError, cl.CloudFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
