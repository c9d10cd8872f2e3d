"""Cascaded primitive fitting: global and patch-level segmentations merged into primitives."""

from .cloud import PointCloud, Scene, SceneSpec, fps_downsample, synthesize_scene
from .merge import (FinalLabeling, MergeGrouping, exact_merge, finalize, greedy_merge,
                    intersections, stack)
from .metrics import EvalReport, evaluate, match_primitives
from .pipeline import PipelineConfig, run_pipeline

__all__ = [
    "PointCloud", "Scene", "SceneSpec", "fps_downsample", "synthesize_scene",
    "FinalLabeling", "MergeGrouping", "exact_merge", "finalize", "greedy_merge",
    "intersections", "stack", "EvalReport", "evaluate", "match_primitives",
    "PipelineConfig", "run_pipeline",
]
