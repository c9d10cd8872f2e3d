"""End-to-end cascade: global pass, patch selection, local passes, merge, evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import merge as mg
from . import metrics
from . import patching as pt
from . import segmenters as sg
from .cloud import K_GLOB, K_LOC, PointCloud, Scene, fps_downsample, save_cloud, save_primitives

log = logging.getLogger(__name__)

WORKERS_ENV = "PRIMCASCADE_WORKERS"
SEGMENTERS = ("oracle", "ransac")
HEATMAPS = (pt.GT_SCALE, pt.CURVATURE)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    n_full: int = 131072
    n_low: int = 8192
    eta: float = 0.05
    theta: float = 0.5
    max_patches: int = 32
    k_glob: int = K_GLOB
    k_loc: int = K_LOC
    heatmap: str = pt.GT_SCALE
    curvature_k: int = 30
    curvature_top_fraction: float = 0.2
    global_segmenter: str = "ransac"
    local_segmenter: str = "ransac"
    global_resolution: str = "full"
    use_patches: bool = True
    use_global_in_merge: bool = True
    use_patch_selection: bool = True
    global_ransac: dict = field(default_factory=lambda: {"min_inliers": 0.01})
    local_ransac: dict = field(default_factory=lambda: {"min_inliers": 0.005})
    oracle_corruption: dict = field(default_factory=dict)
    mass_floor: float = mg.MASS_FLOOR
    epsilons: tuple = metrics.EPSILONS
    fps_start: int = 0
    seed: int = 0

    def validate(self, n_points: Optional[int] = None) -> None:
        if not 1 <= self.n_low <= self.n_full:
            raise ConfigError(f"need 1 <= n_low <= n_full, got {self.n_low}, {self.n_full}")
        if n_points is not None and self.n_low > n_points:
            raise ConfigError(f"n_low={self.n_low} exceeds the cloud size {n_points}")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if not 0 <= self.theta <= 1:
            raise ConfigError("theta must lie in [0, 1]")
        if self.max_patches < 0:
            raise ConfigError("max_patches must be non-negative")
        if self.heatmap not in HEATMAPS:
            raise ConfigError(f"heatmap must be one of {HEATMAPS}")
        for name in ("global_segmenter", "local_segmenter"):
            if getattr(self, name) not in SEGMENTERS:
                raise ConfigError(f"{name} must be one of {SEGMENTERS}")
        if self.global_resolution not in ("full", "low"):
            raise ConfigError("global_resolution must be 'full' or 'low'")
        if not self.use_global_in_merge and not self.use_patches:
            raise ConfigError("nothing to merge: global columns and patches both disabled")
        for name in ("global_ransac", "local_ransac"):
            bad = set(getattr(self, name)) - {f.name for f in dataclasses.fields(sg.RansacParams)}
            if bad:
                raise ConfigError(f"{name}: unknown RANSAC parameters {sorted(bad)}")
        bad = set(self.oracle_corruption) - {f.name for f in dataclasses.fields(sg.Corruption)}
        if bad:
            raise ConfigError(f"oracle_corruption: unknown fields {sorted(bad)}")
        try:
            sg.Corruption(**self.oracle_corruption).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epsilons"] = list(self.epsilons)
        return d


def config_from_dict(d: dict) -> PipelineConfig:
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"unknown config keys {sorted(bad)}")
    d = dict(d)
    if "epsilons" in d:
        d["epsilons"] = tuple(float(e) for e in d["epsilons"])
    cfg = PipelineConfig(**d)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(d)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _stage_seed(cfg: PipelineConfig, *key) -> int:
    return int(np.random.SeedSequence(cfg.seed, spawn_key=key).generate_state(1)[0])


# --- stages -------------------------------------------------------------------------


def downsample(cfg: PipelineConfig, cloud: PointCloud) -> np.ndarray:
    return fps_downsample(cloud, cfg.n_low, cfg.fps_start)


def global_stage(cfg: PipelineConfig, cloud: PointCloud,
                 low_indices: Optional[np.ndarray] = None) -> sg.SoftSegmentation:
    """Segment the whole cloud, at full resolution or on the downsampled cloud."""
    n = len(cloud)
    seed = _stage_seed(cfg, 0)
    if cfg.global_segmenter == "oracle":
        return sg.oracle_segment(np.arange(n), cloud, sg.Corruption(**cfg.oracle_corruption),
                                 seed=seed, scope=sg.GLOBAL, k_max=cfg.k_glob)
    params = sg.RansacParams(**{**cfg.global_ransac, "k_max": cfg.k_glob, "seed": seed})
    if cloud.normals is None:
        raise ValueError("RANSAC needs normals in the cloud")
    if cfg.global_resolution == "full":
        return sg.ransac_segment(cloud.points, cloud.normals, params, scope=sg.GLOBAL)
    if low_indices is None:
        low_indices = downsample(cfg, cloud)
    low = sg.ransac_segment(cloud.points[low_indices], cloud.normals[low_indices], params,
                            scope=sg.GLOBAL)
    # every full-resolution point takes the segmentation of its nearest low-resolution point
    _, nn = cKDTree(cloud.points[low_indices]).query(cloud.points, k=1)
    return sg.SoftSegmentation(sg.GLOBAL, n, np.arange(n), low.probs[nn], low.type_probs[nn],
                               cloud.normals.copy(), primitives=low.primitives,
                               leftover=low.leftover[nn], flags={**low.flags, "propagated": True})


def heatmap_stage(cfg: PipelineConfig, cloud: PointCloud, low_indices) -> pt.Heatmap:
    if cfg.heatmap == pt.GT_SCALE:
        if cloud.gt_label is None:
            raise ValueError("the ground-truth scale heatmap needs ground-truth labels")
        return pt.gt_scale_heatmap(cloud.gt_label, cfg.eta, subset=low_indices)
    return pt.curvature_heatmap(cloud.points[low_indices], cfg.curvature_k,
                                cfg.curvature_top_fraction)


def patch_stage(cfg: PipelineConfig, cloud: PointCloud, low_indices=None) -> tuple:
    """Heatmap, pool and covering patches. Returns ``(cover, info)``."""
    if low_indices is None:
        low_indices = downsample(cfg, cloud)
    info = {"warnings": []}
    if not cfg.use_patches or cfg.max_patches == 0:
        empty = np.zeros(0, dtype=np.int64)
        return pt.PatchCover([], empty, np.zeros(0, bool), np.zeros(0)), info
    if cfg.use_patch_selection:
        hm = heatmap_stage(cfg, cloud, low_indices)
        pool = pt.binarize_and_pool(hm, cfg.theta)
        info["heatmap_hash"] = array_hash(hm.scores)
    else:
        # uniform sampling over the whole object with the same patch budget
        pool = np.arange(len(low_indices))
    info["pool_size"] = int(len(pool))
    if len(pool) == 0:
        info["warnings"].append("empty patch pool: result is global-only")
    cover = pt.sample_covering_patches(cloud, cloud.points[low_indices[pool]], cfg.n_low,
                                       cfg.max_patches, seed=_stage_seed(cfg, 1))
    cover = pt.PatchCover([pt.normalize_patch(p, cloud)[2] for p in cover.patches],
                          cover.pool_indices, cover.covered, cover.mapping_distance)
    info["n_patches"] = len(cover)
    info["uncovered_pool_points"] = cover.uncovered_count
    if len(cover.mapping_distance):
        info["pool_mapping_distance_max"] = float(cover.mapping_distance.max())
        info["pool_mapping_distance_mean"] = float(cover.mapping_distance.mean())
    return cover, info


def segment_patch(cfg: PipelineConfig, cloud: PointCloud, patch: pt.Patch,
                  index: int) -> sg.SoftSegmentation:
    seed = _stage_seed(cfg, 2, index)
    if cfg.local_segmenter == "oracle":
        return sg.oracle_segment(patch.member_indices, cloud,
                                 sg.Corruption(**cfg.oracle_corruption), seed=seed,
                                 scope=index, k_max=cfg.k_loc)
    pts, nrm, frame = pt.normalize_patch(patch, cloud)
    if nrm is None:
        raise ValueError("RANSAC needs normals in the cloud")
    params = sg.RansacParams(**{**cfg.local_ransac, "k_max": cfg.k_loc, "seed": seed})
    seg = sg.ransac_segment(pts, nrm, params.scaled(frame.scale), indices=patch.member_indices,
                            n_points=len(cloud), scope=index)
    if seg.primitives is not None:
        seg.primitives = [None if p is None else p.from_frame(frame.center, frame.scale)
                          for p in seg.primitives]
    return seg


def local_stage(cfg: PipelineConfig, cloud: PointCloud, cover: pt.PatchCover,
                workers: Optional[int] = None) -> tuple:
    """Segment every patch in a worker pool; results come back in patch order.

    Returns ``(segmentations, skipped)`` where ``skipped`` lists failed patches.
    """
    workers = worker_count() if workers is None else workers

    def job(i):
        try:
            return segment_patch(cfg, cloud, cover[i], i), None
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            return None, f"patch {i}: {exc}"

    if workers > 1 and len(cover) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(job, range(len(cover))))
    else:
        results = [job(i) for i in range(len(cover))]
    segs = [s for s, _ in results if s is not None]
    skipped = [e for _, e in results if e is not None]
    for e in skipped:
        log.warning("skipping %s", e)
    return segs, skipped


def merge_stage(cfg: PipelineConfig, cloud: PointCloud, global_seg, patch_segs) -> tuple:
    """Stack, merge greedily and finalize. Returns ``(final, grouping, stacked)``."""
    segs = list(patch_segs)
    if cfg.use_global_in_merge and global_seg is not None:
        segs.append(global_seg)
    if not segs:
        raise RuntimeError("no segmentation available to merge")
    stacked = mg.stack(segs, cfg.mass_floor)
    inter = mg.intersections(stacked)
    grouping = mg.greedy_merge(inter)
    problems = mg.constraint_violations(grouping, stacked.column_scope)
    if problems:
        raise RuntimeError("merge constraint violated: " + "; ".join(problems))
    final = mg.finalize(stacked, grouping, cloud.points, fallback_normals=cloud.normals)
    return final, grouping, stacked


def evaluate_stage(cfg: PipelineConfig, final: mg.FinalLabeling, scene: Scene,
                   cloud_id: str = "") -> metrics.EvalReport:
    return metrics.evaluate_labeling(final, scene, cfg.epsilons, cloud_id)


# --- driver -------------------------------------------------------------------------


@dataclass(eq=False)
class PipelineResult:
    final: mg.FinalLabeling
    report: Optional[metrics.EvalReport]
    grouping: mg.MergeGrouping
    stacked: mg.StackedSegmentation
    cover: pt.PatchCover
    global_seg: Optional[sg.SoftSegmentation]
    patch_segs: list
    provenance: dict


def run_pipeline(cfg: PipelineConfig, scene, low_indices=None, workers: Optional[int] = None,
                 cloud_id: str = "") -> PipelineResult:
    """Run the whole cascade on a Scene (evaluated) or a bare PointCloud."""
    if isinstance(scene, Scene):
        cloud = scene.cloud
    else:
        cloud, scene = scene, None
    cfg.validate(len(cloud))
    prov = {"config": cfg.to_dict(), "cloud_hash": array_hash(cloud.points),
            "n_points": len(cloud), "warnings": []}
    needs_low = cfg.use_patches or cfg.global_resolution == "low"
    if needs_low and low_indices is None:
        low_indices = downsample(cfg, cloud)
    if needs_low:
        prov["downsample_hash"] = array_hash(low_indices)

    global_seg = None
    if cfg.use_global_in_merge or not cfg.use_patches:
        global_seg = global_stage(cfg, cloud, low_indices)
        prov["global"] = {"hash": array_hash(global_seg.indices, global_seg.probs),
                          "segments": global_seg.k,
                          "flags": {k: v for k, v in global_seg.flags.items()
                                    if isinstance(v, (bool, int, float, str))}}

    cover, info = patch_stage(cfg, cloud, low_indices)
    prov["warnings"].extend(info.pop("warnings"))
    prov["patches"] = info
    if not len(cover) and global_seg is None:
        global_seg = global_stage(cfg, cloud, low_indices)
        prov["warnings"].append("no patches and global columns disabled: using global only")
    patch_segs, skipped = local_stage(cfg, cloud, cover, workers)
    prov["skipped_patches"] = skipped
    prov["patch_hashes"] = [array_hash(s.indices, s.probs) for s in patch_segs]

    merge_global = global_seg if (cfg.use_global_in_merge or not patch_segs) else None
    final, grouping, stacked = merge_stage(cfg, cloud, merge_global, patch_segs)
    prov["merge"] = {"columns": stacked.n_columns, "groups": grouping.n_groups,
                     "objective": grouping.objective, "dropped_columns": stacked.dropped,
                     "flagged_points": int(final.flagged.sum()),
                     "fit_fallbacks": int(sum(final.fit_fallback))}
    prov["labels_hash"] = array_hash(final.labels, final.types, final.normals)
    for w in prov["warnings"]:
        log.warning(w)

    report = None
    if scene is not None:
        report = evaluate_stage(cfg, final, scene, cloud_id)
    return PipelineResult(final, report, grouping, stacked, cover, global_seg, patch_segs,
                          prov)


def labeled_cloud(cloud: PointCloud, final: mg.FinalLabeling) -> PointCloud:
    """The input cloud with predicted labels, types and normals as its channels."""
    return PointCloud(cloud.points, final.normals, final.labels.astype(np.int32),
                      final.types.astype(np.uint8))


def write_outputs(result: PipelineResult, cloud: PointCloud, out_dir) -> dict:
    """Write labels, primitives, grouping, report and provenance; return file hashes."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_cloud(labeled_cloud(cloud, result.final), d / "labels.cpf")
    save_primitives(result.final.primitives, d / "primitives.json")
    mg.save_grouping(result.grouping, result.stacked, d / "grouping.json",
                     result.final.group_types)
    if result.report is not None:
        metrics.write_report_json(result.report, d / "report.json")
        metrics.write_cloud_csv([result.report], d / "report_cloud.csv")
        metrics.write_primitive_csv([result.report], d / "report_primitives.csv")
    hashes = {p.name: pt.file_sha256(p) for p in sorted(d.iterdir())
              if p.is_file() and p.name != "provenance.json"}
    prov = {**result.provenance, "files": hashes}
    (d / "provenance.json").write_text(json.dumps(prov, indent=1, default=str))
    return hashes
